"""Command-line surface tying the toolkit into the measurement workflows:
simulate, characterize, measure, report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import characterize as ch
from . import energy as en
from . import ingest as ig
from . import simulate as sim
from .trace import (
    LoadProfile,
    PowerTrace,
    SensorCharacteristics,
    TimeWindow,
    TransientClass,
    write_trace,
    read_trace,
)

__all__ = ["main", "SessionConfig"]


@dataclass(frozen=True)
class SessionConfig:
    """Resolved configuration of one CLI invocation, embedded in outputs."""

    chars: SensorCharacteristics
    preset: str | None
    load: LoadProfile
    idle_power: float
    transition_tau: float
    noise_std: float
    quant_step: float
    seed: int
    rate: float

    def as_dict(self) -> dict[str, Any]:
        d = {
            "preset": self.preset,
            "sensor": _chars_to_dict(self.chars),
            "load": dataclasses.asdict(self.load),
            "model": {
                "idle_power": self.idle_power,
                "transition_tau": self.transition_tau,
                "noise_std": self.noise_std,
            },
            "quant_step": self.quant_step,
            "seed": self.seed,
            "rate": self.rate,
        }
        return d


def _chars_to_dict(chars: SensorCharacteristics) -> dict[str, Any]:
    d = dataclasses.asdict(chars)
    d["transient_class"] = chars.transient_class.value
    return d


def _check_keys(section: dict, valid: set[str], context: str) -> None:
    unknown = sorted(set(section) - valid)
    if unknown:
        raise ValueError(f"invalid config keys in {context}: {', '.join(unknown)}")


def _chars_from_dict(section: dict) -> SensorCharacteristics:
    fields = {f.name for f in dataclasses.fields(SensorCharacteristics)}
    _check_keys(section, fields, "sensor")
    kwargs = dict(section)
    if "transient_class" in kwargs:
        kwargs["transient_class"] = TransientClass(kwargs["transient_class"])
    return SensorCharacteristics(**kwargs)


def _load_from_dict(section: dict, default_period: float) -> LoadProfile:
    fields = {f.name for f in dataclasses.fields(LoadProfile)}
    _check_keys(section, fields, "load")
    kwargs = {"period": default_period, "duty": 0.5, "p_high": 200.0, "p_low": 80.0}
    kwargs.update(section)
    return LoadProfile(**kwargs)


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(cfg, dict):
        raise ValueError("config file must contain a JSON object")
    _check_keys(
        cfg,
        {"sensor", "correction", "load", "model", "plan", "pmd", "quant_step"},
        "config",
    )
    return cfg


def _resolve_chars(args, config: dict) -> tuple[SensorCharacteristics, str | None]:
    has_preset = getattr(args, "preset", None) is not None
    has_explicit = "sensor" in config
    if has_preset and has_explicit:
        raise ValueError(
            "preset and explicit sensor characteristics are mutually exclusive"
        )
    if has_preset:
        return sim.get_preset(args.preset), args.preset
    if has_explicit:
        return _chars_from_dict(config["sensor"]), None
    raise ValueError("need --preset or a config file with a 'sensor' section")


def _model_params(config: dict) -> dict[str, float]:
    section = dict(config.get("model", {}))
    _check_keys(section, {"idle_power", "transition_tau", "noise_std"}, "model")
    params = {"idle_power": 80.0, "transition_tau": 0.0, "noise_std": 1.0}
    params.update(section)
    return params


def _build_plan(
    chars: SensorCharacteristics, rep_duration: float, config: dict, args
) -> en.MeasurementPlan:
    plan = en.plan_measurement(chars, rep_duration)
    overrides = dict(config.get("plan", {}))
    fields = {f.name for f in dataclasses.fields(en.MeasurementPlan)}
    _check_keys(overrides, fields, "plan")
    if getattr(args, "repetitions", None) is not None:
        overrides["repetitions"] = args.repetitions
    if getattr(args, "trials", None) is not None:
        overrides["trials"] = args.trials
    if "inter_trial_delay" in overrides:
        overrides["inter_trial_delay"] = tuple(overrides["inter_trial_delay"])
    if overrides:
        plan = replace(plan, **overrides)
    return plan


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n",
        encoding="utf-8",
    )


def _session(args, config: dict) -> SessionConfig:
    chars, preset = _resolve_chars(args, config)
    model = _model_params(config)
    load = _load_from_dict(
        dict(config.get("load", {})), getattr(args, "load_period", None) or 0.1
    )
    return SessionConfig(
        chars=chars,
        preset=preset,
        load=load,
        idle_power=model["idle_power"],
        transition_tau=model["transition_tau"],
        noise_std=model["noise_std"],
        quant_step=float(config.get("quant_step", 0.01)),
        seed=args.seed,
        rate=args.rate,
    )


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    config = _read_config(args.config)
    session = _session(args, config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rep_duration = args.rep_duration or session.load.period
    plan = _build_plan(session.chars, rep_duration, config, args)
    model = sim.GroundTruthModel(
        load=session.load,
        idle_power=session.idle_power,
        transition_tau=session.transition_tau,
        noise_std=session.noise_std,
        seed=session.seed,
    )
    sensor = sim.SensorConfig(
        session.chars, quant_step=session.quant_step, seed=session.seed + 1
    )
    pmd_cfg = None
    if not args.no_pmd:
        section = dict(config.get("pmd", {}))
        fields = {f.name for f in dataclasses.fields(sim.PmdConfig)}
        _check_keys(section, fields, "pmd")
        section.setdefault("seed", session.seed + 2)
        pmd_cfg = sim.PmdConfig(**section)

    result = sim.run_virtual_experiment(
        plan, rep_duration, model, sensor, pmd_cfg, seed=session.seed, rate=session.rate
    )
    write_trace(result.truth, out / "ground_truth.csv")
    write_trace(result.smi, out / "smi.csv")
    if result.pmd is not None:
        write_trace(result.pmd, out / "pmd.csv")
    markers = {
        "rep_spans": [[w.start, w.end] for w in result.markers.rep_spans],
        "delay_spans": [[w.start, w.end] for w in result.markers.delay_spans],
        "trials": plan.trials,
        "repetitions": plan.repetitions,
    }
    _write_json(out / "markers.json", markers)
    _write_json(
        out / "session.json",
        {"command": "simulate", "plan": dataclasses.asdict(plan), **session.as_dict()},
    )
    print(f"wrote simulation outputs to {out}")
    return 0


# ------------------------------------------------------------ characterize


def _update_period_experiment(
    chars: SensorCharacteristics, session: SessionConfig, args
) -> ch.UpdatePeriodEstimate:
    duration = max(4.0, 30.0 * chars.update_period)
    cycles = int(math.ceil(duration / 0.02)) + 1
    load = LoadProfile(0.02, 0.5, session.load.p_high, session.load.p_low, cycles)
    model = sim.GroundTruthModel(
        load,
        idle_power=session.idle_power,
        transition_tau=session.transition_tau,
        noise_std=max(session.noise_std, 0.5),
        seed=session.seed,
    )
    truth = sim.gen_ground_truth(model, duration, session.rate)
    phase_rng = np.random.default_rng(session.seed + 11)
    cfg = sim.SensorConfig(
        replace(chars, phase=phase_rng.uniform(0.0, chars.update_period)),
        quant_step=session.quant_step,
        seed=session.seed + 12,
    )
    updates = sim.sample_sensor(truth, cfg)
    queries = sim.query_sensor(
        updates,
        args.query_interval_ms / 1000.0,
        jitter=args.query_jitter_ms / 1000.0,
        seed=session.seed + 13,
    )
    return ch.estimate_update_period(queries)


def _transient_experiment(
    chars: SensorCharacteristics, session: SessionConfig, args
) -> tuple[float, ch.TransientFit, float, float]:
    # The sensor only publishes once a full window of truth exists.
    step_at = max(1.0, chars.effective_window + 3.0 * chars.update_period)
    duration = step_at + 8.0
    load = LoadProfile(
        period=2 * (duration - step_at),
        duty=0.5,
        p_high=session.load.p_high,
        p_low=session.load.p_low,
        cycles=1,
        t_start=step_at,
    )
    model = sim.GroundTruthModel(
        load,
        idle_power=session.idle_power,
        transition_tau=session.transition_tau,
        noise_std=session.noise_std,
        seed=session.seed + 21,
    )
    truth = sim.gen_ground_truth(model, duration, session.rate)
    phase_rng = np.random.default_rng(session.seed + 22)
    cfg = sim.SensorConfig(
        replace(chars, phase=phase_rng.uniform(0.0, chars.update_period)),
        quant_step=session.quant_step,
        seed=session.seed + 23,
    )
    smi = sim.sample_sensor(truth, cfg)
    base = float(np.median(smi.values[smi.times < step_at]))
    plateau = float(np.median(smi.values[smi.times > step_at + 4.0]))
    rise = ch.measure_rise_time(smi, base, plateau)
    fit = ch.classify_transient(
        smi, step_at, chars.update_period, reference=truth, fit_span=4.0
    )
    return rise, fit, base, plateau


def cmd_characterize(args) -> int:
    config = _read_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report: dict[str, Any] = {"command": "characterize", "seed": args.seed}

    if args.simulate:
        session = _session(args, config)
        chars = session.chars
        report["config"] = session.as_dict()

        try:
            period_est = _update_period_experiment(chars, session, args)
        except ValueError as exc:
            raise ValueError(f"update-period experiment failed: {exc}") from exc
        t_u = period_est.median_period

        try:
            rise, fit, base, plateau = _transient_experiment(chars, session, args)
        except ValueError as exc:
            raise ValueError(f"transient experiment failed: {exc}") from exc

        if fit.transient_class is TransientClass.LINEAR_RUNNING_AVG:
            # The protocol's 1 s discard cannot bracket a >= 1 s window; the
            # 10-90 rise of the running-average ramp pins it instead.
            window_est = ch.WindowEstimate(
                window=rise / 0.8,
                loss_at_min=float("nan"),
                samples=(rise / 0.8,),
                stddev=0.0,
            )
            runs_table: list[tuple[float, int, float]] = []
        else:
            source = sim.window_protocol_source(
                chars,
                p_high=session.load.p_high,
                p_low=session.load.p_low,
                idle_power=session.idle_power,
                noise_std=session.noise_std,
                transition_tau=session.transition_tau,
                quant_step=session.quant_step,
                seed=session.seed,
            )
            try:
                window_est = ch.estimate_window_protocol(
                    source, t_u, repeats=args.repeats
                )
            except ValueError as exc:
                raise ValueError(f"window experiment failed: {exc}") from exc
            runs_table = [
                (frac, rep, w)
                for (frac, rep), w in zip(
                    (
                        (f, r)
                        for f in ch.PROTOCOL_FRACTIONS
                        for r in range(args.repeats)
                    ),
                    window_est.samples,
                )
            ]

        levels = [
            session.idle_power
            + f * (session.load.p_high - session.idle_power)
            for f in (0.05, 0.2, 0.4, 0.6, 0.8, 1.0)
        ]
        try:
            points = sim.steady_state_points(
                chars,
                levels,
                reps=4,
                noise_frac=0.005,
                quant_step=session.quant_step,
                rate=session.rate,
                seed=session.seed + 31,
            )
            fit_ss = ch.steady_state_regression(points)
        except ValueError as exc:
            raise ValueError(f"steady-state experiment failed: {exc}") from exc

        report.update(
            update_period_s=t_u,
            window_s=window_est.window,
            window_std_s=window_est.stddev,
            rise_time_s=rise,
            transient_class=fit.transient_class.value,
            transient_ambiguous=fit.ambiguous,
            gain=fit_ss.gradient,
            offset=fit_ss.intercept,
            r_squared=fit_ss.r_squared,
        )

        _write_histogram(out / "update_period_histogram.csv", period_est)
        _write_runs(out / "window_runs.csv", runs_table)
        _write_loss_curve(out / "window_loss_curve.csv", chars, session, t_u)
    else:
        if args.smi is None:
            raise ValueError(
                "characterize needs --simulate or --smi TRACE (optionally --reference)"
            )
        smi = read_trace(args.smi)
        try:
            period_est = ch.estimate_update_period(smi)
            report["update_period_s"] = period_est.median_period
            _write_histogram(out / "update_period_histogram.csv", period_est)
            t_u = period_est.median_period
        except ValueError as exc:
            raise ValueError(f"update-period experiment failed: {exc}") from exc
        if args.reference is not None:
            reference = read_trace(args.reference)
            try:
                est = ch.estimate_window(smi, reference, t_u)
            except ValueError as exc:
                raise ValueError(f"window experiment failed: {exc}") from exc
            report["window_s"] = est.window
            report["window_std_s"] = est.stddev

    _write_json(out / "report.json", report)
    _write_text_report(out / "report.txt", report)
    print(f"wrote characterization report to {out}")
    return 0


def _write_histogram(path: Path, est: ch.UpdatePeriodEstimate) -> None:
    lines = ["duration_ms,count"]
    for key, count in sorted(est.histogram.items()):
        lines.append(f"{key * est.bin_width * 1000.0:.3f},{count}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_runs(path: Path, rows: list[tuple[float, int, float]]) -> None:
    lines = ["fraction,repeat,window_s"]
    for frac, rep, w in rows:
        lines.append(f"{frac:.6f},{rep},{w:.6f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_loss_curve(
    path: Path, chars: SensorCharacteristics, session: SessionConfig, t_u: float
) -> None:
    source = sim.window_protocol_source(
        chars,
        p_high=session.load.p_high,
        p_low=session.load.p_low,
        idle_power=session.idle_power,
        noise_std=session.noise_std,
        quant_step=session.quant_step,
        seed=session.seed + 41,
    )
    smi, reference = source(4 / 3, 0)
    grid = np.linspace(0.002, min(1.5 * t_u, 0.5), 40)
    lines = ["window_s,loss"]
    for w in grid:
        try:
            loss = ch.window_loss(float(w), smi, reference)
        except ValueError:
            continue
        lines.append(f"{w:.6f},{loss:.9f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_text_report(path: Path, report: dict) -> None:
    lines = []
    for key in sorted(report):
        if key in ("config", "command"):
            continue
        lines.append(f"{key}: {report[key]}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- measure


def _correction_chars(args, config: dict, true_chars: SensorCharacteristics):
    if getattr(args, "correction_json", None):
        data = json.loads(Path(args.correction_json).read_text(encoding="utf-8"))
        return SensorCharacteristics(
            update_period=data["update_period_s"],
            window=data["window_s"],
            gain=data.get("gain", 1.0),
            offset=data.get("offset", 0.0),
            rise_time=data.get("rise_time_s", 0.0),
            transient_class=TransientClass(
                data.get("transient_class", "instant")
            ),
        )
    if "correction" in config:
        return _chars_from_dict(config["correction"])
    return true_chars


def cmd_measure(args) -> int:
    config = _read_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.wrap is not None:
        return _measure_live(args, config, out)

    session = _session(args, config)
    correction = _correction_chars(args, config, session.chars)
    rep_duration = args.rep_duration or session.load.period
    plan = _build_plan(correction, rep_duration, config, args)
    model = sim.GroundTruthModel(
        load=session.load,
        idle_power=session.idle_power,
        transition_tau=session.transition_tau,
        noise_std=session.noise_std,
        seed=session.seed,
    )
    sensor = sim.SensorConfig(
        session.chars, quant_step=session.quant_step, seed=session.seed + 1
    )
    result = sim.run_virtual_experiment(
        plan, rep_duration, model, sensor, None, seed=session.seed, rate=session.rate
    )
    log = en.RepetitionLog.from_markers(
        result.markers,
        plan,
        guard_before=correction.effective_window,
        guard_after=correction.update_period,
    )
    report = en.measure_energy(result.smi, log, plan, correction)
    discarded = en.discard_rise(log, plan.discard_lead)
    report = en.compare_with_reference(report, result.truth, discarded)
    report = replace(report, seed=session.seed)
    _write_energy_report(out, report, plan, session)
    print(_energy_table(report))
    return 0


def _measure_live(args, config: dict, out: Path) -> int:
    import subprocess
    import threading

    chars, preset = _resolve_chars(args, config)
    rep_duration = args.rep_duration or 0.1
    plan = _build_plan(chars, rep_duration, config, args)
    sampler_cmd = args.sampler_cmd or ig.smi_query_command(args.query_interval_ms)
    shift_points = {
        ev.after_rep: ev.delay
        for ev in en.schedule_shifts(plan.repetitions, plan.shifts, plan.shift_delay)
    }
    total = plan.trials * (
        plan.repetitions * rep_duration * 1.5 + plan.shifts * plan.shift_delay + 1.0
    ) + 2.0
    session_t0 = time.monotonic()
    captured: dict[str, PowerTrace] = {}
    errors: list[Exception] = []

    def run_sampler() -> None:
        try:
            captured["trace"] = ig.live_sample(
                sampler_cmd, args.query_interval_ms, total, t0=session_t0
            )
        except Exception as exc:  # surfaced after the workload loop
            errors.append(exc)

    sampler = threading.Thread(target=run_sampler)
    sampler.start()
    rng = np.random.default_rng(args.seed)
    spans: list[TimeWindow] = []
    trial_ids: list[int] = []
    for trial in range(plan.trials):
        if trial > 0:
            time.sleep(rng.uniform(*plan.inter_trial_delay))
        for rep in range(plan.repetitions):
            start = time.monotonic() - session_t0
            subprocess.run(args.wrap, shell=True, check=False, capture_output=True)
            spans.append(TimeWindow(start, time.monotonic() - session_t0))
            trial_ids.append(trial)
            delay = shift_points.get(rep + 1)
            if delay:
                time.sleep(delay)
    sampler.join()
    if errors:
        raise ValueError(f"sampler failed: {errors[0]}")
    trace = captured["trace"]
    log = en.RepetitionLog(
        tuple(spans), tuple(trial_ids), (False,) * len(spans)
    )
    report = en.measure_energy(trace, log, plan, chars)
    report = replace(report, seed=args.seed)
    write_trace(trace, out / "live_smi.csv")
    _write_json(
        out / "energy_report.json",
        _report_payload(report, plan, None),
    )
    print(_energy_table(report))
    return 0


def _report_payload(
    report: en.EnergyReport, plan: en.MeasurementPlan, session: SessionConfig | None
) -> dict:
    payload = {
        "naive_energy_j": report.naive_energy_j,
        "corrected_energy_j": report.corrected_energy_j,
        "per_trial_j": list(report.per_trial_j),
        "per_rep_j": list(report.per_rep_j),
        "mean_error_pct": report.mean_error_pct,
        "std_error_pct": report.std_error_pct,
        "naive_error_pct": report.naive_error_pct,
        "seed": report.seed,
        "plan": dataclasses.asdict(plan),
    }
    if session is not None:
        payload["config"] = session.as_dict()
    return payload


def _write_energy_report(
    out: Path, report: en.EnergyReport, plan: en.MeasurementPlan, session: SessionConfig
) -> None:
    _write_json(out / "energy_report.json", _report_payload(report, plan, session))
    (out / "energy_report.txt").write_text(
        _energy_table(report) + "\n", encoding="utf-8"
    )


def _energy_table(report: en.EnergyReport) -> str:
    lines = [
        f"{'':14s}{'energy/rep [J]':>16s}{'error vs ref [%]':>18s}",
        f"{'naive':14s}{report.naive_energy_j / max(len(report.per_rep_j) // max(len(report.per_trial_j), 1), 1):>16.4f}"
        f"{_fmt_pct(report.naive_error_pct):>18s}",
        f"{'corrected':14s}{report.corrected_energy_j:>16.4f}"
        f"{_fmt_pct(report.mean_error_pct):>18s}",
    ]
    for i, (e) in enumerate(report.per_trial_j):
        lines.append(f"{'trial ' + str(i):14s}{e:>16.4f}")
    if report.std_error_pct is not None:
        lines.append(f"{'error std':14s}{'':>16s}{report.std_error_pct:>17.3f}%")
    return "\n".join(lines)


def _fmt_pct(value: float | None) -> str:
    return "-" if value is None else f"{value:.3f}%"


# ----------------------------------------------------------------- report


def _deterministic_figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "wattscope"
    return plt


def cmd_report(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not args.energy and not args.traces:
        raise ValueError("no inputs: pass --energy REPORT and/or --traces TRACE...")

    if args.energy:
        data = json.loads(Path(args.energy).read_text(encoding="utf-8"))
        report = en.EnergyReport(
            naive_energy_j=data["naive_energy_j"],
            corrected_energy_j=data["corrected_energy_j"],
            per_trial_j=tuple(data["per_trial_j"]),
            per_rep_j=tuple(data["per_rep_j"]),
            mean_error_pct=data.get("mean_error_pct"),
            std_error_pct=data.get("std_error_pct"),
            naive_error_pct=data.get("naive_error_pct"),
            seed=data.get("seed"),
        )
        table = _energy_table(report)
        print(table)
        (out / "report_summary.txt").write_text(table + "\n", encoding="utf-8")
        if report.mean_error_pct is not None:
            plt = _deterministic_figure()
            fig, ax = plt.subplots(figsize=(5, 3))
            ax.errorbar(
                ["naive", "corrected"],
                [report.naive_error_pct or 0.0, report.mean_error_pct],
                yerr=[0.0, report.std_error_pct or 0.0],
                fmt="o",
                capsize=4,
            )
            ax.set_ylabel("energy error [%]")
            ax.axhline(0.0, color="grey", lw=0.5)
            fig.tight_layout()
            fig.savefig(out / "energy_errors.svg", metadata={"Date": None})
            plt.close(fig)
            lines = ["label,error_pct,std_pct"]
            lines.append(f"naive,{report.naive_error_pct},0.0")
            lines.append(
                f"corrected,{report.mean_error_pct},{report.std_error_pct or 0.0}"
            )
            (out / "energy_errors.csv").write_text(
                "\n".join(lines) + "\n", encoding="utf-8"
            )

    if args.traces:
        traces = [(Path(p).stem, read_trace(p)) for p in args.traces]
        plt = _deterministic_figure()
        fig, ax = plt.subplots(figsize=(7, 3.5))
        lines = ["series,t_s,power_w"]
        for name, tr in traces:
            style = "steps-post" if tr.source.holds_last_value else "default"
            ax.plot(tr.times, tr.values, label=name, drawstyle=style, lw=0.9)
            lines.extend(
                f"{name},{t:.9f},{p:.6f}" for t, p in zip(tr.times, tr.values)
            )
        ax.set_xlabel("time [s]")
        ax.set_ylabel("power [W]")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "overlay.svg", metadata={"Date": None})
        plt.close(fig)
        (out / "overlay_data.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    print(f"wrote report outputs to {out}")
    return 0


# ------------------------------------------------------------------ parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="session seed")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--preset", default=None, help="sensor preset name")
    p.add_argument(
        "--rate", type=float, default=2000.0, help="ground-truth sample rate [Hz]"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wattscope",
        description=(
            "Characterize on-board GPU power sensors (update period, averaging "
            "window, transients, gain/offset) and apply measurement good "
            "practice to produce corrected energy numbers."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a virtual experiment, write traces")
    _add_common(p)
    p.add_argument("--rep-duration", type=float, default=None)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--load-period", type=float, default=None)
    p.add_argument("--no-pmd", action="store_true", help="skip the meter trace")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("characterize", help="recover sensor characteristics")
    _add_common(p)
    p.add_argument("--simulate", action="store_true", help="characterize a simulated sensor")
    p.add_argument("--smi", default=None, help="observed sensor trace file")
    p.add_argument("--reference", default=None, help="reference trace file")
    p.add_argument("--repeats", type=int, default=32, help="window protocol repeats")
    p.add_argument("--query-interval-ms", type=float, default=5.0)
    p.add_argument("--query-jitter-ms", type=float, default=3.0)
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("measure", help="good-practice energy measurement")
    _add_common(p)
    p.add_argument("--rep-duration", type=float, default=None)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--load-period", type=float, default=None)
    p.add_argument("--correction-json", default=None, help="characterization report")
    p.add_argument("--wrap", default=None, help="shell command to run per repetition")
    p.add_argument("--sampler-cmd", default=None, help="override live sampler command")
    p.add_argument("--query-interval-ms", type=float, default=100.0)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("report", help="human summary and plots")
    _add_common(p)
    p.add_argument("--energy", default=None, help="energy report JSON")
    p.add_argument("--traces", nargs="*", default=None, help="trace files to overlay")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
