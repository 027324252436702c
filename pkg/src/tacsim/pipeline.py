"""Signal processing and experiment/simulation alignment.

Processing order for a raw trajectory: subsample at increment marks, tare
against the first sample, zero-phase low-pass the force channels, drop
rows below the 0.5 N force threshold and prepend an interpolated row at
exactly 0.5 N, then align the experimental and simulation sides onto 20
evenly spaced displacement increments.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

FORCE_THRESHOLD = 0.5        # N
N_ALIGNED = 20
ELECTRODE_RAW_MAX = 4095     # 12-bit range


class PipelineError(ValueError):
    pass


class TrajectoryRejected(PipelineError):
    """Trajectory cannot be processed; carries a machine-readable reason."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------

@dataclass
class TimeSeries:
    """Time-stamped channels plus the increment-boundary timestamps."""

    t: np.ndarray                       # (n,) seconds, strictly increasing
    channels: dict                      # name -> (n,) or (n, k) array
    marks: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.marks = np.asarray(self.marks, dtype=np.float64)
        self.channels = {k: np.asarray(v, dtype=np.float64)
                         for k, v in self.channels.items()}
        if len(self.t) and np.any(np.diff(self.t) <= 0):
            raise PipelineError("timestamps must be strictly increasing")
        for name, arr in self.channels.items():
            if len(arr) != len(self.t):
                raise PipelineError(f"channel {name!r} length mismatch")

    def copy(self) -> "TimeSeries":
        return TimeSeries(self.t.copy(),
                          {k: v.copy() for k, v in self.channels.items()},
                          self.marks.copy())


@dataclass
class IncrementSeries:
    """Per-increment rows parameterized by indenter displacement."""

    d: np.ndarray                       # (n,) displacement, non-decreasing
    channels: dict                      # name -> (n, ...) array

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        for name, arr in self.channels.items():
            if len(arr) != len(self.d):
                raise PipelineError(f"channel {name!r} length mismatch")

    def __len__(self) -> int:
        return len(self.d)


@dataclass
class AlignedTrajectory:
    """Both sides interpolated on a common displacement grid."""

    displacement: np.ndarray            # (N_ALIGNED,), evenly spaced
    exp: dict                           # channel -> (N_ALIGNED, ...) array
    sim: dict

    def __post_init__(self):
        n = len(self.displacement)
        if n != N_ALIGNED:
            raise PipelineError(f"expected {N_ALIGNED} rows, got {n}")
        steps = np.diff(self.displacement)
        if len(steps) and not np.allclose(steps, steps[0],
                                          rtol=1e-9, atol=1e-15):
            raise PipelineError("displacements are not evenly spaced")


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def subsample_at_marks(ts: TimeSeries) -> TimeSeries:
    """Keep, per increment mark, the last sample with timestamp <= mark."""
    if len(ts.marks) == 0:
        raise PipelineError("series has no increment marks")
    idx = np.searchsorted(ts.t, ts.marks, side="right") - 1
    if np.any(idx < 0):
        raise PipelineError("no samples before the first mark")
    return TimeSeries(ts.t[idx],
                      {k: v[idx] for k, v in ts.channels.items()},
                      ts.marks)


def tare(ts: TimeSeries, channel_names) -> TimeSeries:
    """Subtract each listed channel's first-row value."""
    if len(ts.t) == 0:
        raise PipelineError("cannot tare an empty series")
    out = ts.copy()
    for name in channel_names:
        out.channels[name] = out.channels[name] - out.channels[name][0]
    return out


def butter_coefficients(fs: float, fc: float):
    """First-order Butterworth low-pass by bilinear transform with
    prewarping. Returns (b, a) with exact unit DC gain."""
    if not fs > 2.0 * fc:
        raise PipelineError(f"need fs > 2*fc (fs={fs}, fc={fc})")
    t = np.tan(np.pi * fc / fs)
    alpha = t / (1.0 + t)
    b = np.array([alpha, alpha])
    a = np.array([1.0, 2.0 * alpha - 1.0])
    return b, a


def butter_filtfilt(x: np.ndarray, fs: float, fc: float) -> np.ndarray:
    """Zero-phase first-order Butterworth low-pass (forward + backward).

    Edges use odd-reflection padding of 3x the filter length; the filter
    state is initialized at steady state so constants pass unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 3:
        raise PipelineError("need at least 3 samples")
    b, a = butter_coefficients(fs, fc)
    pad = min(3 * 2, len(x) - 1)

    def _pass(sig):
        front = 2.0 * sig[0] - sig[pad:0:-1]
        back = 2.0 * sig[-1] - sig[-2:-pad - 2:-1]
        ext = np.concatenate([front, sig, back])
        zi = np.array([1.0 - b[0]]) * ext[0]
        y, _ = lfilter(b, a, ext, zi=zi)
        return y[pad:len(y) - pad]

    if x.ndim == 1:
        return _pass(_pass(x)[::-1])[::-1]
    cols = [_pass(_pass(x[:, j])[::-1])[::-1] for j in range(x.shape[1])]
    return np.column_stack(cols)


def threshold_and_prepend(series: IncrementSeries,
                          force_channel: str = "force",
                          threshold: float = FORCE_THRESHOLD) -> IncrementSeries:
    """Drop rows before the first crossing of the force-magnitude
    threshold and prepend one row interpolated so the force magnitude is
    exactly at the threshold.

    All channels are interpolated linearly in the crossing parameter; the
    parameter itself solves ||(1-s) F0 + s F1|| = threshold.
    """
    force = np.asarray(series.channels[force_channel], dtype=np.float64)
    mag = np.linalg.norm(np.atleast_2d(force.T).T, axis=1) \
        if force.ndim > 1 else np.abs(force)
    if mag[0] >= threshold:
        return series                  # already starts at/above threshold
    above = np.nonzero(mag >= threshold)[0]
    if len(above) == 0:
        raise TrajectoryRejected("below-threshold",
                                 f"max force {mag.max():.3g} N")
    j = int(above[0])
    f0, f1 = force[j - 1], force[j]
    df = f1 - f0
    a = float(df @ df)
    bq = 2.0 * float(f0 @ df)
    c = float(f0 @ f0) - threshold ** 2
    disc = bq * bq - 4.0 * a * c
    s = (-bq + np.sqrt(max(disc, 0.0))) / (2.0 * a)
    s = float(np.clip(s, 0.0, 1.0))

    def interp(arr):
        return (1.0 - s) * arr[j - 1] + s * arr[j]

    d = np.concatenate([[interp(series.d)], series.d[j:]])
    channels = {k: np.concatenate([[interp(v)], v[j:]])
                for k, v in series.channels.items()}
    return IncrementSeries(d, channels)


def _interp_channel(grid, d, arr):
    if arr.ndim == 1:
        return np.interp(grid, d, arr)
    flat = arr.reshape(len(arr), -1)
    out = np.column_stack([np.interp(grid, d, flat[:, j])
                           for j in range(flat.shape[1])])
    return out.reshape((len(grid),) + arr.shape[1:])


def align_pair(exp: IncrementSeries, sim: IncrementSeries,
               n_out: int = N_ALIGNED) -> AlignedTrajectory:
    """Truncate both series to the common displacement range and linearly
    interpolate each channel onto n_out evenly spaced displacements.

    Both inputs must already start at their 0.5 N rows; the simulation
    side must already be truncated at its divergence point.
    """
    if len(exp) < 2 or len(sim) < 2:
        raise TrajectoryRejected("too-short", "need >= 2 rows per side")
    lo = max(exp.d[0], sim.d[0])
    hi = min(exp.d[-1], sim.d[-1])
    if not hi > lo:
        raise TrajectoryRejected("empty-overlap",
                                 f"[{lo:.4g}, {hi:.4g}] m")
    grid = np.linspace(lo, hi, n_out)
    return AlignedTrajectory(
        grid,
        {k: _interp_channel(grid, exp.d, v) for k, v in exp.channels.items()},
        {k: _interp_channel(grid, sim.d, v) for k, v in sim.channels.items()})


def normalize_electrodes(raw: np.ndarray) -> np.ndarray:
    """Map raw 12-bit integer readings onto [0, 1]."""
    raw = np.asarray(raw)
    if np.any(raw < 0) or np.any(raw > ELECTRODE_RAW_MAX):
        raise PipelineError("raw electrode value outside [0, 4095]")
    return raw / float(ELECTRODE_RAW_MAX)


# ---------------------------------------------------------------------------
# CSV and rejection-log I/O
# ---------------------------------------------------------------------------

CSV_COLUMNS = (["t", "d", "fx", "fy", "fz"]
               + [f"e{j:02d}" for j in range(1, 20)]
               + ["tipx", "tipy", "tipz"])


def _rows_from_channels(t, d, channels):
    force = channels["force"]
    elec = channels["electrodes"]
    tip = channels["tip"]
    return np.column_stack([t, d, force, elec, tip])


def save_series_csv(path, t, d, channels, marks=None, meta: dict | None = None):
    """Write the documented trajectory CSV (t, d, fx..fz, e01..e19,
    tipx..tipz); marks and metadata go into leading comment lines."""
    rows = _rows_from_channels(np.asarray(t, dtype=float),
                               np.asarray(d, dtype=float), channels)
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        if marks is not None and len(marks):
            fh.write("# marks=" + ",".join(f"{m:.17g}" for m in marks) + "\n")
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow([f"{v:.17g}" for v in row])


def load_series_csv(path):
    """Read a trajectory CSV. Returns (t, d, channels, marks, meta)."""
    marks = np.empty(0)
    meta: dict = {}
    data_rows = []
    with open(path, newline="") as fh:
        header = None
        for line in fh:
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("marks="):
                    marks = np.array([float(v) for v in
                                      body[len("marks="):].split(",") if v])
                else:
                    meta = json.loads(body)
                continue
            if header is None:
                header = line.strip().split(",")
                if header != CSV_COLUMNS:
                    raise PipelineError(f"unexpected CSV header in {path}")
                continue
            data_rows.append([float(v) for v in line.strip().split(",")])
    arr = np.asarray(data_rows, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, len(CSV_COLUMNS))
    channels = {"force": arr[:, 2:5], "electrodes": arr[:, 5:24],
                "tip": arr[:, 24:27]}
    return arr[:, 0], arr[:, 1], channels, marks, meta


def append_rejection(path, trajectory_id: str, reason: str) -> None:
    """One JSON object per line: {"trajectory": ..., "reason": ...}."""
    with open(path, "a") as fh:
        fh.write(json.dumps({"trajectory": trajectory_id, "reason": reason},
                            sort_keys=True) + "\n")


def load_rejections(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
