"""Deterministic ground-truth oracle: continuous GPU power from a load
profile, plus emulation of the on-board sensor and a high-rate external meter.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .energy import MeasurementPlan, schedule_shifts
from .trace import (
    LoadProfile,
    PowerTrace,
    SensorCharacteristics,
    TimeWindow,
    TraceSource,
    TransientClass,
    cumulative_energy,
    mean_power,
)

__all__ = [
    "GroundTruthModel",
    "SensorConfig",
    "PmdConfig",
    "EventMarkers",
    "VirtualExperiment",
    "PRESETS",
    "get_preset",
    "gen_ground_truth",
    "ideal_load_trace",
    "as_executed_traces",
    "sample_sensor",
    "sample_pmd",
    "query_sensor",
    "run_virtual_experiment",
    "window_protocol_source",
    "steady_state_points",
]

PMD_CURRENT_LIMIT_A = 200.0


@dataclass(frozen=True)
class GroundTruthModel:
    """Continuous power model: square-wave load over an idle floor with
    first-order settling at edges and Gaussian noise."""

    load: LoadProfile
    idle_power: float = 0.0
    transition_tau: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.idle_power < 0:
            raise ValueError("idle_power must be >= 0")
        if self.transition_tau < 0:
            raise ValueError("transition_tau must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass(frozen=True)
class SensorConfig:
    """On-board sensor emulation knobs on top of SensorCharacteristics.

    update_jitter adds a uniform [0, update_jitter) stretch to every update
    interval (the cause of off-nominal measured periods is left open);
    extra_latency delays the reported window without widening it.
    """

    chars: SensorCharacteristics
    quant_step: float = 0.01
    seed: int = 0
    update_jitter: float = 0.0
    extra_latency: float = 0.0

    def __post_init__(self) -> None:
        if self.quant_step < 0:
            raise ValueError("quant_step must be >= 0")
        if self.update_jitter < 0 or self.extra_latency < 0:
            raise ValueError("jitter and latency must be >= 0")


@dataclass(frozen=True)
class PmdConfig:
    """External shunt-resistor meter: 12-bit ADC quantization at 5 kHz."""

    sample_rate: float = 5000.0
    volt_quantum: float = 0.007568
    amp_quantum: float = 0.0488
    bus_voltage: float = 12.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.volt_quantum <= 0 or self.amp_quantum <= 0:
            raise ValueError("quanta must be positive")
        if self.bus_voltage <= 0:
            raise ValueError("bus_voltage must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass(frozen=True)
class EventMarkers:
    """Repetition and inserted-delay spans of a virtual experiment."""

    rep_spans: tuple[TimeWindow, ...]
    delay_spans: tuple[TimeWindow, ...]

    def __post_init__(self) -> None:
        for spans in (self.rep_spans, self.delay_spans):
            for a, b in zip(spans, spans[1:]):
                if b.start < a.end:
                    raise ValueError("marker spans must be ordered and disjoint")


@dataclass(frozen=True)
class VirtualExperiment:
    smi: PowerTrace
    pmd: PowerTrace | None
    truth: PowerTrace
    markers: EventMarkers


# Paper-reported sensor parameter combinations, usable as simulator inputs
# and as priors for live characterization.
PRESETS: dict[str, SensorCharacteristics] = {
    "v100": SensorCharacteristics(update_period=0.020, window=0.010),
    "a100": SensorCharacteristics(update_period=0.100, window=0.025),
    "h100": SensorCharacteristics(update_period=0.100, window=0.025),
    "rtx3090-instant": SensorCharacteristics(update_period=0.100, window=0.100),
    "rtx3090-average": SensorCharacteristics(
        update_period=0.100,
        window=1.0,
        transient_class=TransientClass.LINEAR_RUNNING_AVG,
        rise_time=0.8,
    ),
    "gtx1080ti": SensorCharacteristics(update_period=0.020, window=0.010),
    "gh200-gpu": SensorCharacteristics(update_period=0.100, window=0.020),
    "gh200-cpu": SensorCharacteristics(update_period=0.100, window=0.010),
}


def get_preset(name: str) -> SensorCharacteristics:
    try:
        return PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(PRESETS))
        raise ValueError(f"unknown preset {name!r}; known presets: {known}") from None


def _session_levels(
    segments: list[tuple[float, float, float]],
    idle: float,
    t_lo: float,
    t_hi: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Breakpoints and per-segment levels over [t_lo, t_hi], idle outside the
    given load segments, floored at idle."""
    breaks = [t_lo]
    levels = [idle]
    for s, e, lvl in segments:
        s, e = max(s, t_lo), min(e, t_hi)
        if e <= s:
            continue
        if s > breaks[-1]:
            breaks.append(s)
            levels.append(max(lvl, idle))
        else:
            levels[-1] = max(lvl, idle)
        breaks.append(e)
        levels.append(idle)
    return np.asarray(breaks), np.asarray(levels)


def _settled(
    times: np.ndarray,
    breaks: np.ndarray,
    levels: np.ndarray,
    tau: float,
) -> np.ndarray:
    """Exact first-order response to a piecewise-constant target."""
    idx = np.clip(np.searchsorted(breaks, times, side="right") - 1, 0, len(levels) - 1)
    if tau <= 0:
        return levels[idx].astype(np.float64)
    out = np.empty_like(times)
    v = levels[0]
    for k in range(len(levels)):
        lo = breaks[k]
        hi = breaks[k + 1] if k + 1 < len(breaks) else np.inf
        mask = idx == k
        target = levels[k]
        out[mask] = target + (v - target) * np.exp(-(times[mask] - lo) / tau)
        if np.isfinite(hi):
            v = target + (v - target) * math.exp(-(hi - lo) / tau)
    return out


def _sample_grid(t0: float, duration: float, rate: float) -> np.ndarray:
    n = int(math.floor(duration * rate + 1e-9)) + 1
    return t0 + np.arange(n) / rate


def gen_ground_truth(
    model: GroundTruthModel, duration: float, rate: float
) -> PowerTrace:
    """Dense ground-truth trace over [0, duration] at the given rate."""
    if duration <= 0 or rate <= 0:
        raise ValueError("duration and rate must be positive")
    times = _sample_grid(0.0, duration, rate)
    breaks, levels = _session_levels(
        model.load.segments(), model.idle_power, 0.0, duration
    )
    p = _settled(times, breaks, levels, model.transition_tau)
    if model.noise_std > 0:
        rng = np.random.default_rng(model.seed)
        p = p + rng.normal(0.0, model.noise_std, times.size)
    return PowerTrace(times, np.maximum(p, 0.0), TraceSource.GROUND_TRUTH, 1.0 / rate)


def ideal_load_trace(
    load: LoadProfile, duration: float, rate: float, idle_power: float = 0.0
) -> PowerTrace:
    """Noise-free square-wave trace of the commanded load (emulation reference)."""
    model = GroundTruthModel(load, idle_power=idle_power)
    return gen_ground_truth(model, duration, rate)


def _lag_filter(trace: PowerTrace, tau: float) -> PowerTrace:
    """First-order lag of the trace values (capacitor-charging response)."""
    t, x = trace.times, trace.values
    y = np.empty_like(x)
    y[0] = x[0]
    alpha = 1.0 - np.exp(-np.diff(t) / tau)
    for i in range(1, len(x)):
        y[i] = y[i - 1] + alpha[i - 1] * (x[i] - y[i - 1])
    return trace.with_values(y)


def _quantize(values: np.ndarray, step: float) -> np.ndarray:
    if step <= 0:
        return values
    return np.round(values / step) * step


def sample_sensor(truth: PowerTrace, cfg: SensorConfig) -> PowerTrace:
    """Emulated on-board sensor readings of a dense ground-truth trace.

    Samples at phase + k*update_period; each value is the gain/offset-skewed
    trailing boxcar mean over the effective window, quantized to the reading
    granularity. The transient class selects the pre-sampling pipeline.
    """
    chars = cfg.chars
    w = chars.effective_window
    span = truth.t_end - truth.t_start
    if w + cfg.extra_latency >= span:
        raise ValueError(
            f"window {w:g}s (+latency) exceeds truth span {span:g}s"
        )
    pre = truth
    if chars.transient_class is TransientClass.LOG_GROWTH:
        pre = _lag_filter(truth, chars.log_tau)

    t0 = truth.t_start + chars.phase
    n_max = int(math.floor((truth.t_end - t0) / chars.update_period)) + 2
    if cfg.update_jitter > 0:
        rng = np.random.default_rng(cfg.seed)
        gaps = chars.update_period + rng.uniform(0.0, cfg.update_jitter, n_max)
        ticks = t0 + np.concatenate(([0.0], np.cumsum(gaps)))
    else:
        ticks = t0 + np.arange(n_max + 1) * chars.update_period
    lo_ok = ticks - cfg.extra_latency - w >= truth.t_start - 1e-12
    hi_ok = ticks <= truth.t_end + 1e-12
    ticks = ticks[lo_ok & hi_ok]
    if ticks.size == 0:
        raise ValueError("truth span too short for any sensor update")
    ends = np.minimum(ticks - cfg.extra_latency, truth.t_end)
    means = (
        cumulative_energy(pre, ends) - cumulative_energy(pre, ends - w)
    ) / w
    vals = _quantize(chars.gain * means + chars.offset, cfg.quant_step)
    source = (
        TraceSource.SMI_AVERAGE
        if chars.transient_class is TransientClass.LINEAR_RUNNING_AVG
        else TraceSource.SMI_INSTANT
    )
    return PowerTrace(ticks, np.maximum(vals, 0.0), source, chars.update_period)


def sample_pmd(truth: PowerTrace, cfg: PmdConfig) -> PowerTrace:
    """External-meter view of the truth: ADC-quantized V and I at sample_rate."""
    times = _sample_grid(truth.t_start, truth.t_end - truth.t_start, cfg.sample_rate)
    p = np.interp(times, truth.times, truth.values)
    current = p / cfg.bus_voltage
    over = current > PMD_CURRENT_LIMIT_A
    if np.any(over):
        warnings.warn(
            f"{int(np.sum(over))} samples exceed the {PMD_CURRENT_LIMIT_A:g} A "
            "meter range; clamped",
            RuntimeWarning,
            stacklevel=2,
        )
        current = np.minimum(current, PMD_CURRENT_LIMIT_A)
    i_q = np.round(current / cfg.amp_quantum) * cfg.amp_quantum
    v_q = round(cfg.bus_voltage / cfg.volt_quantum) * cfg.volt_quantum
    vals = v_q * i_q
    if cfg.noise_std > 0:
        rng = np.random.default_rng(cfg.seed)
        vals = vals + rng.normal(0.0, cfg.noise_std, times.size)
    return PowerTrace(
        times, np.maximum(vals, 0.0), TraceSource.PMD, 1.0 / cfg.sample_rate
    )


def query_sensor(
    updates: PowerTrace,
    interval: float,
    *,
    jitter: float = 0.0,
    seed: int = 0,
    duration: float | None = None,
) -> PowerTrace:
    """Poll the sensor the way nvidia-smi loop mode does: the reading holds
    between updates, and the query period can deviate by the jitter."""
    if interval <= 0:
        raise ValueError("interval must be positive")
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    t_end = updates.t_end if duration is None else min(
        updates.t_start + duration, updates.t_end
    )
    n_max = int(math.ceil((t_end - updates.t_start) / interval)) + 1
    if jitter > 0:
        rng = np.random.default_rng(seed)
        gaps = interval + rng.uniform(-jitter, jitter, n_max)
        gaps = np.maximum(gaps, 0.1 * interval)
        times = updates.t_start + np.concatenate(([0.0], np.cumsum(gaps)))
    else:
        times = updates.t_start + np.arange(n_max + 1) * interval
    times = times[times <= t_end + 1e-12]
    idx = np.clip(
        np.searchsorted(updates.times, times, side="right") - 1, 0, len(updates) - 1
    )
    return PowerTrace(times, updates.values[idx], updates.source, interval)


def _experiment_schedule(
    plan: MeasurementPlan, rep_duration: float, lead: float, rng: np.random.Generator
) -> tuple[list[TimeWindow], list[TimeWindow], float]:
    """Rep spans, shift-delay spans and total session length."""
    shift_points = {
        ev.after_rep: ev.delay
        for ev in schedule_shifts(plan.repetitions, plan.shifts, plan.shift_delay)
    }
    t = lead
    rep_spans: list[TimeWindow] = []
    delay_spans: list[TimeWindow] = []
    for trial in range(plan.trials):
        if trial > 0:
            t += rng.uniform(*plan.inter_trial_delay)
        for rep in range(plan.repetitions):
            rep_spans.append(TimeWindow(t, t + rep_duration))
            t += rep_duration
            delay = shift_points.get(rep + 1)
            if delay:
                delay_spans.append(TimeWindow(t, t + delay))
                t += delay
    return rep_spans, delay_spans, t


def run_virtual_experiment(
    plan: MeasurementPlan,
    rep_duration: float,
    model: GroundTruthModel,
    sensor: SensorConfig,
    pmd: PmdConfig | None = None,
    *,
    seed: int = 0,
    rate: float = 2000.0,
) -> VirtualExperiment:
    """Execute the plan against the simulator.

    Each repetition is one load cycle (duty and amplitudes from model.load,
    duration from rep_duration); shift delays and randomized inter-trial gaps
    sit at idle power. The sensor phase is drawn uniformly from one update
    period when the plan randomizes phase, since a real sensor's grid cannot
    be synchronized with the workload.
    """
    if rep_duration <= 0:
        raise ValueError("rep_duration must be positive")
    rng = np.random.default_rng(seed)
    chars = sensor.chars
    # The raw capture must already be publishing by the first repetition
    # (one full window plus an update of warm-up) and keep publishing one
    # shifted window past the last.
    margin = chars.effective_window + 2.0 * chars.update_period + 0.25
    lead = max(0.5, 2.0 * rep_duration, margin)
    rep_spans, delay_spans, t_last = _experiment_schedule(
        plan, rep_duration, lead, rng
    )
    total = t_last + max(0.5, margin)

    load = model.load
    segments: list[tuple[float, float, float]] = []
    for span in rep_spans:
        split = span.start + load.duty * rep_duration
        segments.append((span.start, split, load.p_high))
        if load.duty < 1.0:
            segments.append((split, span.end, load.p_low))
    times = _sample_grid(0.0, total, rate)
    breaks, levels = _session_levels(segments, model.idle_power, 0.0, total)
    p = _settled(times, breaks, levels, model.transition_tau)
    if model.noise_std > 0:
        noise_rng = np.random.default_rng(model.seed)
        p = p + noise_rng.normal(0.0, model.noise_std, times.size)
    truth = PowerTrace(
        times, np.maximum(p, 0.0), TraceSource.GROUND_TRUTH, 1.0 / rate
    )

    if plan.randomize_phase:
        chars = replace(chars, phase=rng.uniform(0.0, chars.update_period))
    smi = sample_sensor(truth, replace(sensor, chars=chars))
    pmd_trace = sample_pmd(truth, pmd) if pmd is not None else None
    markers = EventMarkers(tuple(rep_spans), tuple(delay_spans))
    return VirtualExperiment(smi=smi, pmd=pmd_trace, truth=truth, markers=markers)


def as_executed_traces(
    load: LoadProfile,
    duration: float,
    rate: float,
    idle_power: float,
    *,
    cycle_jitter: float = 0.0,
    noise_std: float = 0.0,
    transition_tau: float = 0.0,
    timing_seed: int = 0,
    noise_seed: int = 0,
) -> tuple[PowerTrace, PowerTrace]:
    """Ground truth and its as-executed reference for one load run.

    cycle_jitter perturbs every load edge by a uniform +-jitter (kernel and
    sleep durations never hit their nominal lengths exactly); the reference
    is the noise-free square wave with the *same* executed edge times, the
    signal a load runner reconstructs from its own timestamps.
    """
    segs = load.segments()
    if cycle_jitter > 0 and len(segs) > 1:
        rng = np.random.default_rng(timing_seed)
        bounds = np.array([s for s, _, _ in segs] + [segs[-1][1]])
        inner = bounds[1:-1] + rng.uniform(-cycle_jitter, cycle_jitter, bounds.size - 2)
        bounds = np.maximum.accumulate(
            np.concatenate(([bounds[0]], inner, [bounds[-1]]))
        )
        segs = [
            (float(bounds[i]), float(bounds[i + 1]), segs[i][2])
            for i in range(len(segs))
        ]
    times = _sample_grid(0.0, duration, rate)
    breaks, levels = _session_levels(segs, idle_power, 0.0, duration)
    clean = _settled(times, breaks, levels, 0.0)
    reference = PowerTrace(times, clean, TraceSource.GROUND_TRUTH, 1.0 / rate)
    p = clean if transition_tau <= 0 else _settled(times, breaks, levels, transition_tau)
    if noise_std > 0:
        noise_rng = np.random.default_rng(noise_seed)
        p = p + noise_rng.normal(0.0, noise_std, times.size)
    truth = PowerTrace(
        times, np.maximum(p, 0.0), TraceSource.GROUND_TRUTH, 1.0 / rate
    )
    return truth, reference


def window_protocol_source(
    chars: SensorCharacteristics,
    *,
    p_high: float = 200.0,
    p_low: float = 80.0,
    idle_power: float = 80.0,
    duty: float = 0.5,
    noise_std: float = 1.0,
    transition_tau: float = 0.0,
    quant_step: float = 0.01,
    update_jitter: float = 0.002,
    cycle_jitter: float = 0.001,
    capture_s: float = 9.0,
    rate: float = 5000.0,
    seed: int = 0,
) -> Callable[[float, int], tuple[PowerTrace, PowerTrace]]:
    """Capture factory for the window-estimation protocol.

    Returns source(fraction, repeat) -> (smi, reference): a 9 s square-wave
    run whose period is the given fraction of the update period, with a fresh
    random sensor phase per capture, and the as-executed load square wave as
    the emulation reference.

    The default jitters matter: with an exactly periodic load and an exactly
    rational update-to-load ratio the aliasing collapses into a repeating
    pattern that windows differing by whole load periods reproduce equally
    well (an extra full period only adds a constant, and normalization
    removes it). Real captures never behave that way: the sensor grid drifts
    (update_jitter) and every load cycle's timing wobbles (cycle_jitter), so
    the spurious window candidates lose their match while the true window
    keeps it, exactly as in hardware loss curves.
    """

    def source(fraction: float, repeat: int) -> tuple[PowerTrace, PowerTrace]:
        run_seed = (seed * 1_000_003 + repeat * 131 + int(round(fraction * 1e6))) % (
            2**63
        )
        period = fraction * chars.update_period
        cycles = int(math.ceil(capture_s / period)) + 1
        load = LoadProfile(period, duty, p_high, p_low, cycles, t_start=0.0)
        truth, reference = as_executed_traces(
            load,
            capture_s,
            rate,
            idle_power,
            cycle_jitter=cycle_jitter,
            noise_std=noise_std,
            transition_tau=transition_tau,
            timing_seed=run_seed + 3,
            noise_seed=run_seed,
        )
        phase_rng = np.random.default_rng(run_seed + 1)
        cfg = SensorConfig(
            replace(chars, phase=phase_rng.uniform(0.0, chars.update_period)),
            quant_step=quant_step,
            seed=run_seed + 2,
            update_jitter=update_jitter,
        )
        smi = sample_sensor(truth, cfg)
        return smi, reference

    return source


def steady_state_points(
    chars: SensorCharacteristics,
    levels: list[float],
    *,
    reps: int = 8,
    dwell: float = 1.0,
    noise_frac: float = 0.0,
    quant_step: float = 0.0,
    rate: float = 2000.0,
    seed: int = 0,
) -> list[tuple[float, float]]:
    """(reference_w, sensor_w) pairs from constant-load dwells per level.

    noise_frac is the truth noise standard deviation as a fraction of the
    commanded level.
    """
    pairs: list[tuple[float, float]] = []
    lead = chars.effective_window + 2.0 * chars.update_period
    duration = lead + dwell
    run = 0
    for level in levels:
        if level <= 0:
            raise ValueError("levels must be positive")
        for _ in range(reps):
            run += 1
            load = LoadProfile(
                period=duration, duty=1.0, p_high=level, p_low=level, cycles=1
            )
            model = GroundTruthModel(
                load, idle_power=0.0, noise_std=noise_frac * level, seed=seed + run
            )
            truth = gen_ground_truth(model, duration, rate)
            phase_rng = np.random.default_rng(seed + 10_000 + run)
            cfg = SensorConfig(
                replace(chars, phase=phase_rng.uniform(0.0, chars.update_period)),
                quant_step=quant_step,
                seed=seed + 20_000 + run,
            )
            smi = sample_sensor(truth, cfg)
            keep = smi.times >= lead
            sensor_w = float(np.mean(smi.values[keep]))
            ref_w = mean_power(truth, TimeWindow(lead, truth.t_end))
            pairs.append((ref_w, sensor_w))
    return pairs
