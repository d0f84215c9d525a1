"""Core time-series model: power traces, integration, and trace arithmetic.

Everything here is a pure function over immutable values; traces never share
mutable state with their inputs, so they are safe to use across threads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

__all__ = [
    "TraceSource",
    "TransientClass",
    "PowerSample",
    "PowerTrace",
    "TimeWindow",
    "LoadProfile",
    "SensorCharacteristics",
    "RunLength",
    "value_at",
    "values_at",
    "cumulative_energy",
    "integrate_energy",
    "mean_power",
    "normalize",
    "shift_earlier",
    "run_lengths",
    "mse",
    "read_trace",
    "write_trace",
]


class TraceSource(enum.Enum):
    """Origin of a trace; determines its interpolation semantics."""

    SMI_INSTANT = "smi_instant"
    SMI_AVERAGE = "smi_average"
    PMD = "pmd"
    GROUND_TRUTH = "ground_truth"
    EMULATED = "emulated"

    @property
    def holds_last_value(self) -> bool:
        # A sensor reading persists until the next update; meter and
        # ground-truth streams are dense enough to interpolate linearly.
        return self in (
            TraceSource.SMI_INSTANT,
            TraceSource.SMI_AVERAGE,
            TraceSource.EMULATED,
        )


class TransientClass(enum.Enum):
    """Qualitative shape of a sensor's step response."""

    INSTANT = "instant"
    SLOW_SOURCE = "slow_source"
    LINEAR_RUNNING_AVG = "linear_running_avg"
    LOG_GROWTH = "log_growth"


class PowerSample(NamedTuple):
    t: float
    p: float


class RunLength(NamedTuple):
    value: float
    duration: float
    partial: bool


@dataclass(frozen=True)
class TimeWindow:
    """Half-open-ish time span [start, end] on the shared timebase."""

    start: float
    end: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError("window bounds must be finite")
        if self.start > self.end:
            raise ValueError(f"window start {self.start} after end {self.end}")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def contains(self, t: float) -> bool:
        return self.start <= t <= self.end

    def intersects(self, other: "TimeWindow") -> bool:
        return self.start < other.end and other.start < self.end


@dataclass(frozen=True)
class LoadProfile:
    """Square-wave workload: each period is p_high for duty*period then p_low."""

    period: float
    duty: float = 0.5
    p_high: float = 200.0
    p_low: float = 0.0
    cycles: int = 1
    t_start: float = 0.0

    def __post_init__(self) -> None:
        if self.period <= 0:
            raise ValueError("period must be positive")
        if not 0 < self.duty <= 1:
            raise ValueError("duty must be in (0, 1]")
        if not self.p_high >= self.p_low >= 0:
            raise ValueError("need p_high >= p_low >= 0")
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")

    @property
    def duration(self) -> float:
        return self.cycles * self.period

    @property
    def t_end(self) -> float:
        return self.t_start + self.duration

    def segments(self) -> list[tuple[float, float, float]]:
        """(start, end, level) pieces covering the load span in order."""
        out = []
        for k in range(self.cycles):
            s = self.t_start + k * self.period
            split = s + self.duty * self.period
            out.append((s, split, self.p_high))
            if self.duty < 1.0:
                out.append((split, s + self.period, self.p_low))
        return out


@dataclass(frozen=True)
class SensorCharacteristics:
    """Recovered (or configured) hidden parameter set of a power sensor."""

    update_period: float
    window: float
    gain: float = 1.0
    offset: float = 0.0
    rise_time: float = 0.0
    transient_class: TransientClass = TransientClass.INSTANT
    log_tau: float = 0.2
    phase: float = 0.0

    def __post_init__(self) -> None:
        if self.update_period <= 0:
            raise ValueError("update_period must be positive")
        if self.window <= 0:
            raise ValueError("window must be positive")
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.rise_time < 0:
            raise ValueError("rise_time must be >= 0")
        if self.log_tau <= 0:
            raise ValueError("log_tau must be positive")
        if not 0 <= self.phase < self.update_period:
            raise ValueError("phase must be in [0, update_period)")

    @property
    def effective_window(self) -> float:
        """Averaging span actually applied by the sensor pipeline."""
        if self.transient_class is TransientClass.LINEAR_RUNNING_AVG:
            return 1.0
        return self.window


@dataclass(frozen=True, eq=False)
class PowerTrace:
    """Timestamped power samples from one source.

    Timestamps are relative seconds on a shared monotonic timebase and must be
    strictly increasing; values are watts, finite and non-negative.
    """

    times: np.ndarray
    values: np.ndarray
    source: TraceSource
    nominal_period: float = 0.0

    def __post_init__(self) -> None:
        t = np.array(self.times, dtype=np.float64, copy=True).ravel()
        p = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if t.size == 0:
            raise ValueError("trace must contain at least one sample")
        if t.shape != p.shape:
            raise ValueError("times and values must have equal length")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(p)):
            raise ValueError("trace contains non-finite samples")
        if np.any(p < 0):
            raise ValueError("power values must be >= 0")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("timestamps must be strictly increasing")
        t.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", p)
        if self.nominal_period < 0:
            raise ValueError("nominal_period must be >= 0")

    def __len__(self) -> int:
        return int(self.times.size)

    def __iter__(self) -> Iterator[PowerSample]:
        for t, p in zip(self.times, self.values):
            yield PowerSample(float(t), float(p))

    @property
    def samples(self) -> list[PowerSample]:
        return list(self)

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def span(self) -> TimeWindow:
        return TimeWindow(self.t_start, self.t_end)

    def with_values(self, values: np.ndarray) -> "PowerTrace":
        return replace(self, values=values)

    def restrict(self, win: TimeWindow) -> "PowerTrace":
        """Sub-trace of samples falling inside win (inclusive)."""
        mask = (self.times >= win.start) & (self.times <= win.end)
        if not np.any(mask):
            raise ValueError("insufficient samples: no samples inside window")
        return replace(self, times=self.times[mask], values=self.values[mask])


def _span_eps(trace: PowerTrace) -> float:
    return 1e-9 * max(1.0, abs(trace.t_start), abs(trace.t_end))


def values_at(trace: PowerTrace, times: Sequence[float] | np.ndarray) -> np.ndarray:
    """Interpolated values at each time, using the trace's source rule."""
    ts = np.asarray(times, dtype=np.float64)
    eps = _span_eps(trace)
    if np.any(ts < trace.t_start - eps) or np.any(ts > trace.t_end + eps):
        raise ValueError("out of range: time outside trace span")
    ts = np.clip(ts, trace.t_start, trace.t_end)
    if trace.source.holds_last_value:
        idx = np.searchsorted(trace.times, ts, side="right") - 1
        idx = np.clip(idx, 0, len(trace) - 1)
        return trace.values[idx]
    return np.interp(ts, trace.times, trace.values)


def value_at(trace: PowerTrace, t: float) -> float:
    """Value of the trace's interpolant at time t (hold or linear by source)."""
    return float(values_at(trace, np.array([t]))[0])


def _cumulative_table(trace: PowerTrace) -> np.ndarray:
    # Memoized on the instance; safe because traces are immutable.
    cached = trace.__dict__.get("_cum_table")
    if cached is not None:
        return cached
    t, p = trace.times, trace.values
    dt = np.diff(t)
    if trace.source.holds_last_value:
        seg = p[:-1] * dt
    else:
        seg = 0.5 * (p[:-1] + p[1:]) * dt
    cum = np.concatenate(([0.0], np.cumsum(seg)))
    cum.flags.writeable = False
    object.__setattr__(trace, "_cum_table", cum)
    return cum


def cumulative_energy(trace: PowerTrace, times: Sequence[float] | np.ndarray) -> np.ndarray:
    """Integral of the trace's interpolant from its first sample to each time.

    Exact for the piecewise interpolant (rectangles for hold sources,
    trapezoids for dense sources), so window integrals built from differences
    are additive to machine precision.
    """
    if len(trace) < 2:
        raise ValueError("insufficient samples: need at least 2 samples")
    ts = np.asarray(times, dtype=np.float64)
    eps = _span_eps(trace)
    if np.any(ts < trace.t_start - eps) or np.any(ts > trace.t_end + eps):
        raise ValueError("out of range: time outside trace span")
    ts = np.clip(ts, trace.t_start, trace.t_end)
    t, p = trace.times, trace.values
    cum = _cumulative_table(trace)
    idx = np.clip(np.searchsorted(t, ts, side="right") - 1, 0, len(t) - 2)
    frac = ts - t[idx]
    if trace.source.holds_last_value:
        extra = p[idx] * frac
    else:
        dt = t[idx + 1] - t[idx]
        p_at = p[idx] + (p[idx + 1] - p[idx]) * frac / dt
        extra = 0.5 * (p[idx] + p_at) * frac
    return cum[idx] + extra


def integrate_energy(trace: PowerTrace, win: TimeWindow) -> float:
    """Energy in joules of the trace restricted to win."""
    if len(trace) < 2:
        raise ValueError("insufficient samples: need at least 2 samples")
    eps = _span_eps(trace)
    if win.start < trace.t_start - eps or win.end > trace.t_end + eps:
        raise ValueError(
            "insufficient samples: window "
            f"[{win.start:g}, {win.end:g}] extends outside trace span "
            f"[{trace.t_start:g}, {trace.t_end:g}]"
        )
    lo, hi = cumulative_energy(trace, np.array([win.start, win.end]))
    return float(hi - lo)


def mean_power(trace: PowerTrace, win: TimeWindow) -> float:
    """Average power over win, in watts."""
    if win.duration <= 0:
        raise ValueError("insufficient samples: zero-length window")
    return integrate_energy(trace, win) / win.duration


def normalize(trace: PowerTrace) -> PowerTrace:
    """Affine min-max rescale of values to [0, 1]; timestamps unchanged."""
    lo = float(trace.values.min())
    hi = float(trace.values.max())
    if hi <= lo:
        raise ValueError("degenerate normalization: constant trace")
    return trace.with_values((trace.values - lo) / (hi - lo))


def shift_earlier(trace: PowerTrace, dt: float) -> PowerTrace:
    """Trace with every timestamp decreased by dt >= 0; values unchanged."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    return _shifted(trace, dt)


def _shifted(trace: PowerTrace, dt: float) -> PowerTrace:
    if dt == 0:
        return trace
    return replace(trace, times=trace.times - dt)


def run_lengths(trace: PowerTrace, epsilon: float = 0.0) -> list[RunLength]:
    """Maximal runs of consecutive equal values and their durations.

    A run lasts from its first sample to the next run's first sample; the
    final run only extends to the last sample and is flagged partial.
    Values within epsilon of their predecessor belong to the same run
    (sensor readings repeat bit-identically, so the default is exact equality).
    """
    if len(trace) < 2:
        raise ValueError("insufficient samples: need at least 2 samples")
    changed = np.abs(np.diff(trace.values)) > epsilon
    starts = np.concatenate(([0], np.nonzero(changed)[0] + 1))
    runs = []
    for i, s in enumerate(starts):
        last = i == len(starts) - 1
        t_next = trace.times[-1] if last else trace.times[starts[i + 1]]
        runs.append(
            RunLength(float(trace.values[s]), float(t_next - trace.times[s]), last)
        )
    return runs


def mse(a: PowerTrace, b: PowerTrace) -> float:
    """Mean squared difference between two traces on identical timestamps."""
    if len(a) != len(b) or not np.array_equal(a.times, b.times):
        raise ValueError("timestamp mismatch between traces")
    return float(np.mean((a.values - b.values) ** 2))


TRACE_HEADER = "t_s,power_w,source"


def write_trace(trace: PowerTrace, path: str | Path) -> None:
    """Write the delimited text trace format (t_s,power_w,source)."""
    src = trace.source.value
    lines = [TRACE_HEADER]
    lines.extend(
        f"{t:.9f},{p:.6f},{src}" for t, p in zip(trace.times, trace.values)
    )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trace(path: str | Path) -> PowerTrace:
    """Read a trace written by write_trace."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"empty trace file: {path}")
    if lines[0].strip() != TRACE_HEADER:
        raise ValueError(f"bad trace header {lines[0]!r} in {path}")
    if len(lines) < 2:
        raise ValueError(f"trace file has no samples: {path}")
    times, vals, sources = [], [], set()
    for i, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != 3:
            raise ValueError(f"malformed row at line {i} in {path}")
        try:
            times.append(float(parts[0]))
            vals.append(float(parts[1]))
        except ValueError as exc:
            raise ValueError(f"malformed row at line {i} in {path}: {exc}") from None
        sources.add(parts[2].strip())
    if len(sources) != 1:
        raise ValueError(f"mixed sources in trace file: {path}")
    try:
        source = TraceSource(sources.pop())
    except ValueError:
        raise ValueError(f"unknown trace source in {path}") from None
    return PowerTrace(np.array(times), np.array(vals), source)
