"""Recover hidden sensor parameters from observed traces: update period,
rise time and transient class, boxcar window, and steady-state gain/offset."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .trace import (
    PowerTrace,
    TimeWindow,
    TraceSource,
    TransientClass,
    cumulative_energy,
    mse,
    normalize,
    run_lengths,
)

__all__ = [
    "UpdatePeriodEstimate",
    "LinearFit",
    "WindowEstimate",
    "NelderMeadResult",
    "TransientFit",
    "estimate_update_period",
    "measure_rise_time",
    "classify_transient",
    "emulate_boxcar",
    "window_loss",
    "nelder_mead",
    "estimate_window",
    "estimate_window_protocol",
    "steady_state_regression",
    "fit_load_calibration",
    "iterations_for",
    "PROTOCOL_FRACTIONS",
]

# Load periods as fractions of the update period used by the window protocol.
PROTOCOL_FRACTIONS = (2 / 3, 3 / 4, 4 / 5, 6 / 5, 5 / 4, 4 / 3)


@dataclass(frozen=True)
class UpdatePeriodEstimate:
    """Median update period with a histogram of run durations.

    Histogram keys are bin indices: round(duration / bin_width), with the
    1 ms default bin width the key is the duration in milliseconds.
    """

    median_period: float
    histogram: dict[int, int]
    bin_width: float = 0.001

    def __post_init__(self) -> None:
        if self.median_period <= 0:
            raise ValueError("median_period must be positive")
        if not self.histogram:
            raise ValueError("histogram must not be empty")


@dataclass(frozen=True)
class LinearFit:
    gradient: float
    intercept: float
    r_squared: float

    def __post_init__(self) -> None:
        if not 0 <= self.r_squared <= 1:
            raise ValueError("r_squared must be in [0, 1]")


@dataclass(frozen=True)
class WindowEstimate:
    """Boxcar-window estimate; for protocol runs, the median over all runs."""

    window: float
    loss_at_min: float
    samples: tuple[float, ...]
    stddev: float
    converged: bool = True

    def __post_init__(self) -> None:
        if self.window <= 0:
            raise ValueError("window must be positive")


@dataclass(frozen=True)
class NelderMeadResult:
    x: np.ndarray
    fun: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class TransientFit:
    transient_class: TransientClass
    residuals: dict[TransientClass, float]
    ambiguous: bool


def estimate_update_period(
    trace: PowerTrace, *, epsilon: float = 0.0, bin_width: float = 0.001
) -> UpdatePeriodEstimate:
    """Median duration of constant-reading runs in a polled sensor trace.

    The trace must come from polling faster than the update period while the
    load varies, so that every published update produces a new value.
    """
    runs = run_lengths(trace, epsilon)
    complete = [r for r in runs if not r.partial]
    if len(complete) < 20:
        raise ValueError(
            f"insufficient variation: need >= 20 complete runs, got {len(complete)}"
        )
    durations = np.array([r.duration for r in complete])
    median = float(np.median(durations))
    bins = Counter(int(round(d / bin_width)) for d in durations)
    return UpdatePeriodEstimate(median, dict(sorted(bins.items())), bin_width)


def _first_crossing(trace: PowerTrace, level: float) -> float:
    """Time of the first upward crossing of level, per the trace's
    interpolation rule."""
    p, t = trace.values, trace.times
    above = p >= level
    idx = np.nonzero(above)[0]
    if idx.size == 0:
        raise ValueError(f"no step detected: level {level:g} W never crossed")
    i = int(idx[0])
    if i == 0 or trace.source.holds_last_value:
        return float(t[i])
    # Linear interpolation between the last sample below and the first above.
    frac = (level - p[i - 1]) / (p[i] - p[i - 1])
    return float(t[i - 1] + frac * (t[i] - t[i - 1]))


def measure_rise_time(trace: PowerTrace, baseline: float, plateau: float) -> float:
    """Time from the 10 % to the 90 % crossing of the step amplitude."""
    delta = plateau - baseline
    if delta <= 0:
        raise ValueError("no step detected: plateau must exceed baseline")
    t_lo = _first_crossing(trace, baseline + 0.1 * delta)
    t_hi = _first_crossing(trace, baseline + 0.9 * delta)
    return t_hi - t_lo


def _instant_residual(
    ts: np.ndarray, ps: np.ndarray, base: float, plateau: float, max_jump: float
) -> float:
    """Best SSE of a one-update step: base before the jump, plateau after,
    with the single straddling sample free."""
    lo_sq = np.concatenate(([0.0], np.cumsum((ps - base) ** 2)))
    hi_sq = np.concatenate(([0.0], np.cumsum((ps - plateau) ** 2)))
    total = hi_sq[-1]
    best = math.inf
    for j in range(len(ps)):
        if ts[j] > max_jump:
            break
        # samples [0, j) at base, sample j free, samples (j, n) at plateau
        sse = lo_sq[j] + (total - hi_sq[j + 1])
        best = min(best, sse)
    return best


def _ramp_residual(
    ts: np.ndarray,
    ps: np.ndarray,
    base: float,
    plateau: float,
    t_step: float,
    d_min: float,
) -> float:
    delta = plateau - base

    def sse(params: np.ndarray) -> float:
        t0 = np.clip(params[0], t_step - d_min, t_step + d_min)
        d = np.clip(params[1], d_min, 4.0)
        pred = base + delta * np.clip((ts - t0) / d, 0.0, 1.0)
        return float(np.sum((ps - pred) ** 2))

    res = nelder_mead(sse, [t_step, 1.0], step=[0.05, 0.3], tol=1e-4, max_iter=300)
    return res.fun


def _log_residual(
    ts: np.ndarray,
    ps: np.ndarray,
    base: float,
    plateau: float,
    t_step: float,
    tau_min: float,
) -> float:
    delta = plateau - base

    def sse(params: np.ndarray) -> float:
        t0 = np.clip(params[0], t_step - tau_min, t_step + 2 * tau_min)
        tau = np.clip(params[1], tau_min, 2.0)
        rel = np.maximum(ts - t0, 0.0)
        pred = base + delta * (1.0 - np.exp(-rel / tau))
        return float(np.sum((ps - pred) ** 2))

    res = nelder_mead(sse, [t_step, 0.2], step=[0.05, 0.1], tol=1e-4, max_iter=300)
    return res.fun


def classify_transient(
    smi: PowerTrace,
    step_time: float,
    update_period: float,
    *,
    reference: PowerTrace | None = None,
    fit_span: float = 3.0,
    ambiguity: float = 0.05,
    slow_threshold: float | None = None,
) -> TransientFit:
    """Classify the step response by the best of three parametric fits.

    When a dense reference trace shows that the actual power itself rises
    slowly (10-90 rise above slow_threshold, default twice the update
    period), the sensor is not to blame and SLOW_SOURCE is returned.
    """
    pre = smi.values[smi.times < step_time]
    if pre.size == 0:
        raise ValueError("no step detected: no samples before step_time")
    base = float(np.median(pre))
    mask = (smi.times >= step_time - update_period) & (
        smi.times <= step_time + fit_span
    )
    ts, ps = smi.times[mask], smi.values[mask]
    if ts.size < 3:
        raise ValueError("no step detected: too few samples after step_time")
    late = ps[ts >= step_time + 2 * fit_span / 3]
    if late.size == 0:
        raise ValueError("no step detected: trace ends before settle")
    plateau = float(np.median(late))
    if plateau - base <= 0:
        raise ValueError("no step detected: plateau must exceed baseline")

    if reference is not None:
        thresh = 2 * update_period if slow_threshold is None else slow_threshold
        try:
            ref_rise = measure_rise_time(reference, base, plateau)
        except ValueError:
            ref_rise = 0.0
        if ref_rise > thresh:
            return TransientFit(TransientClass.SLOW_SOURCE, {}, False)

    residuals = {
        TransientClass.INSTANT: _instant_residual(
            ts, ps, base, plateau, step_time + 1.5 * update_period
        ),
        TransientClass.LINEAR_RUNNING_AVG: _ramp_residual(
            ts, ps, base, plateau, step_time, d_min=max(3 * update_period, 0.2)
        ),
        TransientClass.LOG_GROWTH: _log_residual(
            ts, ps, base, plateau, step_time, tau_min=max(update_period / 2, 0.02)
        ),
    }
    residuals = {k: float(v) for k, v in residuals.items()}
    ordered = sorted(residuals.items(), key=lambda kv: kv[1])
    best, second = ordered[0][1], ordered[1][1]
    ambiguous = bool((second - best) <= ambiguity * max(best, 1e-12))
    return TransientFit(ordered[0][0], residuals, ambiguous)


def emulate_boxcar(
    reference: PowerTrace, sample_times: Sequence[float] | np.ndarray, w: float
) -> PowerTrace:
    """Reconstruct sensor readings from a reference trace: the trailing
    boxcar mean over [t - w, t] at each sample time."""
    if w <= 0:
        raise ValueError("window must be positive")
    ts = np.asarray(sample_times, dtype=np.float64)
    if ts.size == 0:
        raise ValueError("sample_times must not be empty")
    eps = 1e-9 * max(1.0, abs(reference.t_end))
    if ts.min() - w < reference.t_start - eps or ts.max() > reference.t_end + eps:
        raise ValueError(
            "insufficient reference span: boxcar windows extend outside the reference"
        )
    starts = np.clip(ts - w, reference.t_start, None)
    means = (
        cumulative_energy(reference, ts) - cumulative_energy(reference, starts)
    ) / w
    return PowerTrace(ts, np.maximum(means, 0.0), TraceSource.EMULATED)


def window_loss(
    w: float, smi: PowerTrace, reference: PowerTrace, discard: float = 1.0
) -> float:
    """Shape mismatch between observed readings and a w-window emulation.

    Discards the first `discard` seconds of the capture, then compares the
    min-max-normalized observed and emulated traces by MSE.
    """
    keep = smi.times >= smi.t_start + discard
    if int(np.sum(keep)) < 3:
        raise ValueError("insufficient overlap: too few samples after discard")
    sub = PowerTrace(
        smi.times[keep], smi.values[keep], smi.source, smi.nominal_period
    )
    emu = emulate_boxcar(reference, sub.times, w)
    return mse(normalize(sub), normalize(emu))


def nelder_mead(
    f: Callable[[np.ndarray], float],
    x0: Sequence[float] | np.ndarray,
    *,
    step: Sequence[float] | np.ndarray | float | None = None,
    tol: float = 1e-4,
    max_iter: int = 200,
) -> NelderMeadResult:
    """Minimize f by the simplex method (reflection 1, expansion 2,
    contraction 0.5, shrink 0.5), stopping when the simplex diameter falls
    below tol or after max_iter iterations (flagged not converged)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    n = x0.size
    if step is None:
        step_arr = np.where(np.abs(x0) > 1e-12, 0.25 * np.abs(x0), 0.05)
    else:
        step_arr = np.broadcast_to(np.asarray(step, dtype=np.float64), x0.shape)

    def feval(x: np.ndarray) -> float:
        v = float(f(x))
        return v if not math.isnan(v) else math.inf

    simplex = [x0.copy()]
    for i in range(n):
        v = x0.copy()
        v[i] += step_arr[i]
        simplex.append(v)
    fvals = [feval(v) for v in simplex]
    if not all(math.isfinite(v) for v in fvals):
        raise ValueError("objective not finite at initial simplex")

    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        order = np.argsort(fvals)
        simplex = [simplex[i] for i in order]
        fvals = [fvals[i] for i in order]
        diameter = max(
            float(np.linalg.norm(v - simplex[0])) for v in simplex[1:]
        )
        if diameter < tol:
            converged = True
            break
        centroid = np.mean(simplex[:-1], axis=0)
        worst = simplex[-1]
        reflected = centroid + 1.0 * (centroid - worst)
        f_r = feval(reflected)
        if f_r < fvals[0]:
            expanded = centroid + 2.0 * (centroid - worst)
            f_e = feval(expanded)
            if f_e < f_r:
                simplex[-1], fvals[-1] = expanded, f_e
            else:
                simplex[-1], fvals[-1] = reflected, f_r
            continue
        if f_r < fvals[-2]:
            simplex[-1], fvals[-1] = reflected, f_r
            continue
        if f_r < fvals[-1]:
            contracted = centroid + 0.5 * (reflected - centroid)
            f_c = feval(contracted)
            if f_c <= f_r:
                simplex[-1], fvals[-1] = contracted, f_c
                continue
        else:
            contracted = centroid - 0.5 * (centroid - worst)
            f_c = feval(contracted)
            if f_c < fvals[-1]:
                simplex[-1], fvals[-1] = contracted, f_c
                continue
        # Shrink toward the best vertex.
        for i in range(1, len(simplex)):
            simplex[i] = simplex[0] + 0.5 * (simplex[i] - simplex[0])
            fvals[i] = feval(simplex[i])

    best = int(np.argmin(fvals))
    return NelderMeadResult(
        x=simplex[best], fun=fvals[best], converged=converged, iterations=iterations
    )


def estimate_window(
    smi: PowerTrace,
    reference: PowerTrace,
    update_period: float,
    *,
    discard: float = 1.0,
    bounds: tuple[float, float] = (1e-3, 2.0),
    tol: float = 1e-4,
    max_iter: int = 200,
    grid_step: float = 0.001,
) -> WindowEstimate:
    """Recover the boxcar window from one capture by minimizing window_loss.

    The simplex search starts from half the update period; because windows
    that differ by a whole load period leave shallow spurious minima, the
    loss is also scanned on a coarse grid and the search is restarted from
    the best grid point whenever that beats the first descent.
    """
    keep = smi.times[smi.times >= smi.t_start + discard]
    if keep.size < 3:
        raise ValueError("insufficient overlap: too few samples after discard")
    lower = bounds[0]
    upper = min(bounds[1], float(keep[0]) - reference.t_start)
    if upper <= lower:
        raise ValueError("insufficient reference span for any window candidate")

    def loss(x: np.ndarray) -> float:
        w = float(np.clip(x[0], lower, upper))
        try:
            return window_loss(w, smi, reference, discard)
        except ValueError:
            # Degenerate emulation (e.g. whole-period window over a square
            # wave); steer the search away rather than aborting it.
            return math.inf

    res = nelder_mead(
        loss, [update_period / 2], step=[update_period / 20], tol=tol,
        max_iter=max_iter,
    )
    grid = np.arange(
        max(lower, grid_step), min(upper, 1.6 * update_period), grid_step
    )
    if grid.size:
        grid_losses = np.array([loss(np.array([w])) for w in grid])
        best = int(np.argmin(grid_losses))
        if grid_losses[best] < res.fun:
            res2 = nelder_mead(
                loss,
                [float(grid[best])],
                step=[grid_step],
                tol=tol,
                max_iter=max_iter,
            )
            if res2.fun <= res.fun:
                res = res2
    w = float(np.clip(res.x[0], lower, upper))
    return WindowEstimate(
        window=w,
        loss_at_min=res.fun,
        samples=(w,),
        stddev=0.0,
        converged=res.converged,
    )


def estimate_window_protocol(
    source: Callable[[float, int], tuple[PowerTrace, PowerTrace]],
    update_period: float,
    *,
    fractions: Sequence[float] = PROTOCOL_FRACTIONS,
    repeats: int = 32,
    discard: float = 1.0,
    tol: float = 1e-4,
    max_iter: int = 200,
    max_failure_frac: float = 0.25,
) -> WindowEstimate:
    """Full window-estimation protocol: independent captures for each load
    fraction, repeated, reporting the median window across all runs.

    source(fraction, repeat) must return a fresh (smi, reference) capture
    pair for a load period of fraction * update_period.
    """
    windows: list[float] = []
    losses: list[float] = []
    failures = 0
    total = 0
    for fraction in fractions:
        for rep in range(repeats):
            total += 1
            smi, reference = source(fraction, rep)
            est = estimate_window(
                smi,
                reference,
                update_period,
                discard=discard,
                tol=tol,
                max_iter=max_iter,
            )
            if not est.converged:
                failures += 1
                continue
            windows.append(est.window)
            losses.append(est.loss_at_min)
    if total == 0:
        raise ValueError("protocol ran zero captures")
    if failures / total > max_failure_frac:
        raise ValueError(
            f"unstable estimation: {failures}/{total} runs did not converge"
        )
    arr = np.array(windows)
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return WindowEstimate(
        window=float(np.median(arr)),
        loss_at_min=float(np.median(losses)),
        samples=tuple(windows),
        stddev=std,
        converged=True,
    )


def _ols(x: np.ndarray, y: np.ndarray) -> LinearFit:
    if x.size < 2:
        raise ValueError("need at least 2 points")
    xm, ym = float(np.mean(x)), float(np.mean(y))
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0:
        raise ValueError("all reference values equal; cannot fit a line")
    gradient = float(np.sum((x - xm) * (y - ym))) / sxx
    intercept = ym - gradient * xm
    pred = gradient * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - ym) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LinearFit(gradient, intercept, min(max(r2, 0.0), 1.0))


def steady_state_regression(
    points: Iterable[tuple[float, float]],
) -> LinearFit:
    """Least-squares sensor = gradient * reference + intercept, with R²."""
    pts = list(points)
    x = np.array([p[0] for p in pts], dtype=np.float64)
    y = np.array([p[1] for p in pts], dtype=np.float64)
    return _ols(x, y)


def fit_load_calibration(points: Iterable[tuple[float, float]]) -> LinearFit:
    """Least-squares duration_s = gradient * iterations + intercept."""
    pts = list(points)
    x = np.array([p[0] for p in pts], dtype=np.float64)
    y = np.array([p[1] for p in pts], dtype=np.float64)
    return _ols(x, y)


def iterations_for(fit: LinearFit, duration_s: float) -> float:
    """Invert a load calibration: iteration count hitting a target duration."""
    if fit.gradient == 0:
        raise ValueError("calibration gradient is zero")
    return (duration_s - fit.intercept) / fit.gradient
