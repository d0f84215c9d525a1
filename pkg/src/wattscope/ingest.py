"""Parsers and capture adapters: vendor-CLI power logs, the external meter's
binary stream, live sampling via a child process, and trace alignment."""

from __future__ import annotations

import math
import queue
import shlex
import struct
import subprocess
import threading
import time
from dataclasses import dataclass
from datetime import datetime
from typing import Sequence

import numpy as np

from .trace import PowerTrace, TraceSource, values_at

__all__ = [
    "SmiLogRecord",
    "PmdDecodeResult",
    "PMD_SYNC",
    "PMD_FRAME_LEN",
    "PMD_RAILS",
    "parse_smi_records",
    "parse_smi_log",
    "encode_pmd_frame",
    "encode_pmd_stream",
    "decode_pmd_stream",
    "live_sample",
    "align_traces",
    "smi_query_command",
]

_NA_MARKERS = {"[N/A]", "N/A", "[Not Supported]"}
_TIME_FORMATS = ("%Y/%m/%d %H:%M:%S.%f", "%Y/%m/%d %H:%M:%S")

# Documented vendor-CLI invocation this parser expects (delimited mode with a
# header row, no unit suffixes on values, fixed loop interval):
#   nvidia-smi --query-gpu=timestamp,index,power.draw,power.draw.instant,power.draw.average
#              --format=csv,nounits -lms <interval_ms>
_POWER_FIELDS = ("power.draw", "power.draw.instant", "power.draw.average")
_FIELD_SOURCES = {
    "power.draw": TraceSource.SMI_INSTANT,
    "power.draw.instant": TraceSource.SMI_INSTANT,
    "power.draw.average": TraceSource.SMI_AVERAGE,
}


@dataclass(frozen=True)
class SmiLogRecord:
    wall_time: datetime
    gpu_index: int
    power_draw_w: float | None = None
    power_instant_w: float | None = None
    power_average_w: float | None = None

    def __post_init__(self) -> None:
        powers = (self.power_draw_w, self.power_instant_w, self.power_average_w)
        present = [p for p in powers if p is not None]
        if not present:
            raise ValueError("record has no power field")
        if any(p < 0 for p in present):
            raise ValueError("power must be >= 0")

    def power(self, field: str) -> float | None:
        return {
            "power.draw": self.power_draw_w,
            "power.draw.instant": self.power_instant_w,
            "power.draw.average": self.power_average_w,
        }[field]


def smi_query_command(interval_ms: int, executable: str = "nvidia-smi") -> list[str]:
    """The canonical vendor-CLI loop invocation this toolkit parses."""
    return [
        executable,
        "--query-gpu=timestamp,index,power.draw,power.draw.instant,power.draw.average",
        "--format=csv,nounits",
        f"-lms={interval_ms}",
    ]


def _normalize_header(cell: str) -> str:
    name = cell.strip().lower()
    if name.endswith("[w]"):
        name = name[:-3].strip()
    return name


def _parse_wall_time(cell: str, line_no: int) -> datetime:
    for fmt in _TIME_FORMATS:
        try:
            return datetime.strptime(cell.strip(), fmt)
        except ValueError:
            continue
    raise ValueError(f"malformed row at line {line_no}: bad timestamp {cell.strip()!r}")


def _parse_power(cell: str, line_no: int) -> float | None:
    token = cell.strip()
    if token in _NA_MARKERS:
        return None
    try:
        value = float(token)
    except ValueError:
        raise ValueError(
            f"malformed row at line {line_no}: bad power value {token!r}"
        ) from None
    if value < 0:
        raise ValueError(f"malformed row at line {line_no}: negative power")
    return value


def parse_smi_records(text: str) -> list[SmiLogRecord]:
    """Parse vendor-CLI delimited output (header row required) into records."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty input")
    header = [_normalize_header(c) for c in lines[0].split(",")]
    if "timestamp" not in header:
        raise ValueError("malformed header: no timestamp column")
    if not any(f in header for f in _POWER_FIELDS):
        raise ValueError("malformed header: no power column")
    col = {name: i for i, name in enumerate(header)}
    records = []
    for line_no, ln in enumerate(lines[1:], start=2):
        cells = ln.split(",")
        if len(cells) != len(header):
            raise ValueError(
                f"malformed row at line {line_no}: expected {len(header)} columns, "
                f"got {len(cells)}"
            )
        wall = _parse_wall_time(cells[col["timestamp"]], line_no)
        gpu = 0
        if "index" in col:
            try:
                gpu = int(cells[col["index"]].strip())
            except ValueError:
                raise ValueError(
                    f"malformed row at line {line_no}: bad gpu index"
                ) from None

        def power_of(field: str) -> float | None:
            if field not in col:
                return None
            return _parse_power(cells[col[field]], line_no)

        try:
            records.append(
                SmiLogRecord(
                    wall_time=wall,
                    gpu_index=gpu,
                    power_draw_w=power_of("power.draw"),
                    power_instant_w=power_of("power.draw.instant"),
                    power_average_w=power_of("power.draw.average"),
                )
            )
        except ValueError as exc:
            raise ValueError(f"malformed row at line {line_no}: {exc}") from None
    if not records:
        raise ValueError("empty input: no data rows")
    return records


def parse_smi_log(text: str) -> dict[tuple[int, str], PowerTrace]:
    """Parse a vendor-CLI log into traces keyed by (gpu_index, field name).

    Timestamps are relative seconds with the first record at t = 0; rows
    whose field reads as not-available contribute no sample to that trace.
    """
    records = parse_smi_records(text)
    t0 = records[0].wall_time
    series: dict[tuple[int, str], tuple[list[float], list[float]]] = {}
    for rec in records:
        rel = (rec.wall_time - t0).total_seconds()
        for field in _POWER_FIELDS:
            value = rec.power(field)
            if value is None:
                continue
            ts, vs = series.setdefault((rec.gpu_index, field), ([], []))
            ts.append(rel)
            vs.append(value)
    traces: dict[tuple[int, str], PowerTrace] = {}
    for key, (ts, vs) in sorted(series.items()):
        arr = np.array(ts)
        if arr.size > 1 and not np.all(np.diff(arr) > 0):
            raise ValueError(
                f"timestamps not strictly increasing for gpu {key[0]} {key[1]}"
            )
        traces[key] = PowerTrace(arr, np.array(vs), _FIELD_SOURCES[key[1]])
    return traces


PMD_SYNC = 0xAA
PMD_RAILS = 4
_PAYLOAD_LEN = PMD_RAILS * 2 * 2  # 4 rails x (voltage, current) x uint16
PMD_FRAME_LEN = 1 + _PAYLOAD_LEN + 1
_MAX_CODE = 4095  # 12-bit ADC


def encode_pmd_frame(codes: Sequence[int]) -> bytes:
    """One meter frame: sync byte, 8 little-endian 12-bit codes, checksum."""
    if len(codes) != PMD_RAILS * 2:
        raise ValueError(f"need {PMD_RAILS * 2} codes per frame")
    if any(not 0 <= c <= _MAX_CODE for c in codes):
        raise ValueError("codes must fit a 12-bit ADC (0..4095)")
    payload = struct.pack("<8H", *codes)
    checksum = sum(payload) & 0xFF
    return bytes([PMD_SYNC]) + payload + bytes([checksum])


def encode_pmd_stream(frames: Sequence[Sequence[int]]) -> bytes:
    return b"".join(encode_pmd_frame(f) for f in frames)


@dataclass(frozen=True)
class PmdDecodeResult:
    per_rail: tuple[PowerTrace, ...]
    total: PowerTrace
    frames_decoded: int
    frames_dropped: int


def decode_pmd_stream(
    data: bytes,
    *,
    sample_rate: float = 5000.0,
    volt_quantum: float = 0.007568,
    amp_quantum: float = 0.0488,
) -> PmdDecodeResult:
    """Decode a meter byte stream into per-rail and total power traces.

    Resynchronizes on the sync byte after a checksum or range failure; each
    contiguous skipped stretch counts as dropped frames and leaves a matching
    gap in the timestamps, which are frame slots at the sample rate.
    """
    frames: list[tuple[int, ...]] = []
    slots: list[int] = []
    dropped = 0
    slot = 0
    pos = 0
    skip_run = 0

    def flush_skip() -> None:
        nonlocal dropped, slot, skip_run
        if skip_run > 0:
            n = max(1, round(skip_run / PMD_FRAME_LEN))
            dropped += n
            slot += n
            skip_run = 0

    n_bytes = len(data)
    while pos < n_bytes:
        sync_at = data.find(PMD_SYNC, pos)
        if sync_at < 0:
            skip_run += n_bytes - pos
            break
        skip_run += sync_at - pos
        pos = sync_at
        if pos + PMD_FRAME_LEN > n_bytes:
            skip_run += n_bytes - pos
            break
        payload = data[pos + 1 : pos + 1 + _PAYLOAD_LEN]
        checksum = data[pos + 1 + _PAYLOAD_LEN]
        codes = struct.unpack("<8H", payload)
        if sum(payload) & 0xFF != checksum or any(c > _MAX_CODE for c in codes):
            skip_run += 1
            pos += 1
            continue
        flush_skip()
        frames.append(codes)
        slots.append(slot)
        slot += 1
        pos += PMD_FRAME_LEN
    if skip_run >= PMD_FRAME_LEN:
        flush_skip()
    if not frames:
        raise ValueError("no valid frames in stream")
    total_slots = len(frames) + dropped
    if dropped / total_slots > 0.01:
        raise ValueError(
            f"unrecoverable desync: {dropped} of {total_slots} frames dropped"
        )

    codes_arr = np.array(frames, dtype=np.float64)
    times = np.array(slots, dtype=np.float64) / sample_rate
    rail_traces = []
    rail_powers = []
    for r in range(PMD_RAILS):
        volts = codes_arr[:, 2 * r] * volt_quantum
        amps = codes_arr[:, 2 * r + 1] * amp_quantum
        power = volts * amps
        rail_powers.append(power)
        rail_traces.append(
            PowerTrace(times, power, TraceSource.PMD, 1.0 / sample_rate)
        )
    total = PowerTrace(
        times, np.sum(rail_powers, axis=0), TraceSource.PMD, 1.0 / sample_rate
    )
    return PmdDecodeResult(
        per_rail=tuple(rail_traces),
        total=total,
        frames_decoded=len(frames),
        frames_dropped=dropped,
    )


def live_sample(
    command_spec: str | Sequence[str],
    query_interval_ms: float,
    duration: float,
    *,
    startup_timeout: float = 2.0,
    field: str | None = None,
    t0: float | None = None,
) -> PowerTrace:
    """Spawn a vendor-CLI-style child and capture one power trace.

    Each received line is timestamped on arrival (device clocks cannot be
    synchronized with the host, so arrival time is authoritative); values are
    parsed from the delimited output. Best-effort real time: expect scheduler
    jitter of a few milliseconds per sample.
    """
    if duration <= 0:
        raise ValueError("no rows: duration must be positive")
    cmd = shlex.split(command_spec) if isinstance(command_spec, str) else list(
        command_spec
    )
    try:
        proc = subprocess.Popen(
            cmd,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )
    except OSError as exc:
        raise ValueError(f"failed to start {cmd[0]!r}: {exc}") from exc

    lines: "queue.Queue[tuple[float, str]]" = queue.Queue()

    def pump() -> None:
        assert proc.stdout is not None
        for line in proc.stdout:
            lines.put((time.monotonic(), line.rstrip("\n")))

    reader = threading.Thread(target=pump, daemon=True)
    reader.start()
    start = time.monotonic()
    deadline = start + duration
    received: list[tuple[float, str]] = []
    try:
        while True:
            now = time.monotonic()
            if now >= deadline:
                break
            if not received and now - start > startup_timeout:
                raise ValueError(
                    f"no rows received within {startup_timeout:g} s from {cmd[0]!r}"
                )
            try:
                received.append(lines.get(timeout=min(0.05, deadline - now)))
            except queue.Empty:
                continue
    finally:
        proc.terminate()
        try:
            proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
    reader.join(timeout=1.0)
    while True:
        try:
            item = lines.get_nowait()
        except queue.Empty:
            break
        if item[0] < deadline:
            received.append(item)
    received.sort(key=lambda it: it[0])

    if not received:
        raise ValueError("no rows: child produced no output")
    header = [_normalize_header(c) for c in received[0][1].split(",")]
    if "timestamp" not in header or not any(f in header for f in _POWER_FIELDS):
        raise ValueError("no rows: first line is not a recognized header")
    if field is None:
        for candidate in ("power.draw.instant", "power.draw", "power.draw.average"):
            if candidate in header:
                field = candidate
                break
    if field not in header:
        raise ValueError(f"field {field!r} not present in header")
    col = {name: i for i, name in enumerate(header)}

    times: list[float] = []
    vals: list[float] = []
    base = received[1][0] if len(received) > 1 else received[0][0]
    origin = base if t0 is None else t0
    for arrival, line in received[1:]:
        cells = line.split(",")
        if len(cells) != len(header):
            continue  # torn line at shutdown
        value = _parse_power(cells[col[field]], 0)
        if value is None:
            continue
        t = arrival - origin
        if times and t <= times[-1]:
            t = times[-1] + 1e-9
        times.append(t)
        vals.append(value)
    if not times:
        raise ValueError("no rows: no parseable data rows")
    return PowerTrace(
        np.array(times),
        np.array(vals),
        _FIELD_SOURCES[field],
        query_interval_ms / 1000.0,
    )


def align_traces(
    a: PowerTrace,
    b: PowerTrace,
    search: tuple[float, float] = (-0.2, 0.2),
    *,
    grid: float = 0.001,
) -> float:
    """Offset of b relative to a, by cross-correlation on a 1 ms grid.

    Returns tau maximizing the correlation of a(t) with b(t + tau): negative
    when b's features occur earlier than a's. Subtract the offset from b's
    timestamps to align it with a.
    """
    if search[0] > search[1]:
        raise ValueError("search range must be ordered")
    for name, tr in (("a", a), ("b", b)):
        if float(np.ptp(tr.values)) == 0.0:
            raise ValueError(f"no alignment feature: trace {name} is flat")

    def grid_values(tr: PowerTrace) -> tuple[np.ndarray, float]:
        n = int(math.floor((tr.t_end - tr.t_start) / grid)) + 1
        ts = tr.t_start + np.arange(n) * grid
        g = values_at(tr, ts)
        g = g - np.mean(g)
        return g, tr.t_start

    ga, a0 = grid_values(a)
    gb, b0 = grid_values(b)
    base = (a0 - b0) / grid
    lo = int(math.ceil(search[0] / grid))
    hi = int(math.floor(search[1] / grid))
    best_corr = -np.inf
    best_lag = 0
    min_overlap = 16
    for lag in range(lo, hi + 1):
        shift = int(round(base)) + lag
        i_lo = max(0, -shift)
        i_hi = min(len(ga), len(gb) - shift)
        if i_hi - i_lo < min_overlap:
            continue
        sa = ga[i_lo:i_hi]
        sb = gb[i_lo + shift : i_hi + shift]
        sa = sa - np.mean(sa)
        sb = sb - np.mean(sb)
        denom = float(np.linalg.norm(sa) * np.linalg.norm(sb))
        if denom == 0:
            continue
        corr = float(np.dot(sa, sb)) / denom
        if corr > best_corr:
            best_corr = corr
            best_lag = lag
    if not np.isfinite(best_corr):
        raise ValueError("no alignment feature: traces do not overlap in search range")
    return best_lag * grid
