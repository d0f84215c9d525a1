"""Measurement good practice: planning, phase-shift scheduling, trace
correction, per-repetition energy accounting, and error reporting."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .trace import (
    PowerTrace,
    SensorCharacteristics,
    TimeWindow,
    integrate_energy,
    shift_earlier,
)

__all__ = [
    "MeasurementPlan",
    "RepetitionLog",
    "EnergyReport",
    "ShiftEvent",
    "plan_measurement",
    "schedule_shifts",
    "correct_trace",
    "discard_rise",
    "measure_energy",
    "compare_with_reference",
]


@dataclass(frozen=True)
class MeasurementPlan:
    """Execution schedule for a good-practice measurement session."""

    repetitions: int
    min_runtime: float = 5.0
    shifts: int = 0
    shift_delay: float = 0.0
    trials: int = 4
    inter_trial_delay: tuple[float, float] = (0.0, 1.0)
    discard_lead: float = 0.0
    randomize_phase: bool = True

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not 0 <= self.shifts <= self.repetitions:
            raise ValueError("shifts must be in [0, repetitions]")
        if self.shift_delay < 0 or self.discard_lead < 0:
            raise ValueError("delays must be >= 0")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        lo, hi = self.inter_trial_delay
        if lo < 0 or hi < lo:
            raise ValueError("inter_trial_delay must be a valid [min, max] range")


@dataclass(frozen=True)
class RepetitionLog:
    """Per-repetition spans with trial membership and discard flags."""

    spans: tuple[TimeWindow, ...]
    trial_ids: tuple[int, ...]
    discarded: tuple[bool, ...]

    def __post_init__(self) -> None:
        if not self.spans:
            raise ValueError("log must contain at least one repetition")
        if not len(self.spans) == len(self.trial_ids) == len(self.discarded):
            raise ValueError("spans, trial_ids and discarded must align")
        by_trial: dict[int, TimeWindow] = {}
        for span, trial in zip(self.spans, self.trial_ids):
            prev = by_trial.get(trial)
            if prev is not None and span.start < prev.end:
                raise ValueError("repetition spans overlap within a trial")
            by_trial[trial] = span

    @classmethod
    def from_markers(
        cls,
        markers,
        plan: MeasurementPlan,
        *,
        guard_before: float = 0.0,
        guard_after: float = 0.0,
    ) -> "RepetitionLog":
        """Group simulator rep markers into trials of plan.repetitions each.

        Non-zero guards pre-discard repetitions adjacent to an inserted
        delay: readings whose averaging window overlaps the idle gap mix in
        idle power, the same contamination the rise-time discard removes.
        One window before and one update period after each delay covers the
        reach of a trailing boxcar plus its hold interval.
        """
        spans = tuple(markers.rep_spans)
        expect = plan.trials * plan.repetitions
        if len(spans) != expect:
            raise ValueError(
                f"marker count {len(spans)} does not match plan ({expect})"
            )
        trial_ids = tuple(i // plan.repetitions for i in range(len(spans)))
        discarded = [False] * len(spans)
        if (guard_before > 0 or guard_after > 0) and markers.delay_spans:
            zones = [
                TimeWindow(d.start - guard_before, d.end + guard_after)
                for d in markers.delay_spans
            ]
            for i, span in enumerate(spans):
                discarded[i] = any(span.intersects(z) for z in zones)
        return cls(spans, trial_ids, tuple(discarded))

    @property
    def trials(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.trial_ids)))

    def kept_spans(self, trial: int) -> list[TimeWindow]:
        return [
            s
            for s, t, d in zip(self.spans, self.trial_ids, self.discarded)
            if t == trial and not d
        ]


@dataclass(frozen=True)
class EnergyReport:
    """Naive vs corrected energy, per-trial statistics, error vs reference.

    corrected_energy_j and per_trial_j are energies per repetition;
    naive_energy_j is the single-run estimate scaled to all repetitions.
    """

    naive_energy_j: float
    corrected_energy_j: float
    per_trial_j: tuple[float, ...]
    per_rep_j: tuple[float, ...]
    mean_error_pct: float | None = None
    std_error_pct: float | None = None
    naive_error_pct: float | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.naive_energy_j < 0 or self.corrected_energy_j < 0:
            raise ValueError("energies must be >= 0")


class ShiftEvent(NamedTuple):
    after_rep: int  # number of completed repetitions before the delay
    delay: float


def plan_measurement(
    chars: SensorCharacteristics,
    rep_duration: float,
    *,
    min_runtime: float = 5.0,
    shifts: int = 8,
    trials: int = 4,
    inter_trial_delay: tuple[float, float] = (0.0, 1.0),
    randomize_phase: bool = True,
) -> MeasurementPlan:
    """Good-practice plan for a workload repetition of rep_duration seconds.

    Runs at least 32 repetitions or min_runtime seconds, inserts evenly
    spaced delays of one window length when the window undersamples the
    update period, and discards the rise-time lead per trial.
    """
    if rep_duration <= 0:
        raise ValueError("rep_duration must be positive")
    n = max(32, math.ceil(min_runtime / rep_duration))
    if chars.effective_window < chars.update_period:
        n_shifts, delay = shifts, chars.window
    else:
        n_shifts, delay = 0, 0.0
    discard = chars.rise_time + max(chars.effective_window, chars.update_period)
    return MeasurementPlan(
        repetitions=n,
        min_runtime=min_runtime,
        shifts=n_shifts,
        shift_delay=delay,
        trials=trials,
        inter_trial_delay=inter_trial_delay,
        discard_lead=discard,
        randomize_phase=randomize_phase,
    )


def schedule_shifts(n_reps: int, shifts: int, shift_delay: float) -> list[ShiftEvent]:
    """Delay insertion points: after every floor(n/shifts) repetitions,
    never after the final one."""
    if shifts < 0 or n_reps < 1:
        raise ValueError("need n_reps >= 1 and shifts >= 0")
    if shifts > n_reps:
        raise ValueError(f"shift count {shifts} exceeds repetitions {n_reps}")
    if shifts == 0:
        return []
    stride = n_reps // shifts
    return [
        ShiftEvent(k * stride, shift_delay)
        for k in range(1, shifts + 1)
        if k * stride < n_reps
    ]


def correct_trace(smi: PowerTrace, chars: SensorCharacteristics) -> PowerTrace:
    """Undo the sensor pipeline: shift readings one window earlier (a trailing
    boxcar reports activity from up to one window before) and invert the
    steady-state gain/offset."""
    if chars.gain <= 0:
        raise ValueError("gain must be positive")
    shifted = shift_earlier(smi, chars.effective_window)
    vals = (shifted.values - chars.offset) / chars.gain
    return shifted.with_values(np.maximum(vals, 0.0))


def discard_rise(log: RepetitionLog, discard_lead: float) -> RepetitionLog:
    """Mark discarded every repetition intersecting the first discard_lead
    seconds of its trial."""
    if discard_lead <= 0:
        return log
    starts = {
        trial: min(s.start for s, t in zip(log.spans, log.trial_ids) if t == trial)
        for trial in log.trials
    }
    flags = []
    for span, trial, old in zip(log.spans, log.trial_ids, log.discarded):
        cutoff = starts[trial] + discard_lead
        flags.append(old or span.start < cutoff)
    out = RepetitionLog(log.spans, log.trial_ids, tuple(flags))
    for trial in out.trials:
        if not out.kept_spans(trial):
            raise ValueError(
                f"trial too short: all repetitions of trial {trial} fall in the "
                f"{discard_lead:g} s discard window"
            )
    return out


def measure_energy(
    smi: PowerTrace,
    log: RepetitionLog,
    plan: MeasurementPlan,
    chars: SensorCharacteristics,
) -> EnergyReport:
    """Per-repetition energy accounting over the corrected trace.

    The naive baseline integrates the raw trace over the very first
    repetition span and scales it to all repetitions, mirroring the
    single-run practice.
    """
    corrected = correct_trace(smi, chars)
    log = discard_rise(log, plan.discard_lead)
    per_rep: list[float] = []
    per_trial: list[float] = []
    for trial in log.trials:
        energies = [integrate_energy(corrected, s) for s in log.kept_spans(trial)]
        per_rep.extend(energies)
        per_trial.append(float(np.mean(energies)))
    naive = integrate_energy(smi, log.spans[0]) * plan.repetitions
    return EnergyReport(
        naive_energy_j=max(naive, 0.0),
        corrected_energy_j=float(np.mean(per_trial)),
        per_trial_j=tuple(per_trial),
        per_rep_j=tuple(per_rep),
    )


def compare_with_reference(
    report: EnergyReport,
    reference: PowerTrace,
    log: RepetitionLog,
) -> EnergyReport:
    """Fill the error fields of report against a reference trace covering the
    same (already discarded) repetition log."""
    kept_all: list[TimeWindow] = []
    ref_trial: list[float] = []
    for trial in log.trials:
        spans = log.kept_spans(trial)
        kept_all.extend(spans)
        for s in spans:
            if s.start < reference.t_start or s.end > reference.t_end:
                raise ValueError(
                    "coverage gap: reference does not span repetition "
                    f"[{s.start:g}, {s.end:g}]"
                )
        ref_trial.append(float(np.mean([integrate_energy(reference, s) for s in spans])))
    if len(ref_trial) != len(report.per_trial_j):
        raise ValueError("log trials do not match report trials")
    errors = [
        100.0 * (c - r) / r for c, r in zip(report.per_trial_j, ref_trial)
    ]
    n_per_trial = len(
        [1 for t in log.trial_ids if t == log.trials[0]]
    )
    ref_rep_mean = float(
        np.mean([integrate_energy(reference, s) for s in kept_all])
    )
    naive_per_rep = report.naive_energy_j / n_per_trial
    return replace(
        report,
        mean_error_pct=float(np.mean(errors)),
        std_error_pct=float(np.std(errors)),
        naive_error_pct=100.0 * (naive_per_rep - ref_rep_mean) / ref_rep_mean,
    )
