"""Sensor recordings: CSV ingestion, synthetic generation and windowing."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

CSV_COLUMNS = ("user", "timestamp", "x", "y", "z")


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Recording:
    """One user's accelerometer stream (m/s^2), optionally with per-sample labels."""

    user_id: str
    timestamps: np.ndarray
    values: np.ndarray
    labels: Optional[tuple] = None

    def __post_init__(self):
        ts = _frozen(self.timestamps)
        vals = _frozen(self.values)
        if vals.ndim != 2 or vals.shape[1] != 3:
            raise DataError(f"recording {self.user_id!r}: values must have shape (n, 3), got {vals.shape}")
        if ts.shape != (vals.shape[0],):
            raise DataError(f"recording {self.user_id!r}: {ts.shape[0]} timestamps for {vals.shape[0]} samples")
        if not np.all(np.isfinite(vals)) or not np.all(np.isfinite(ts)):
            raise DataError(f"recording {self.user_id!r}: non-finite sample")
        if ts.size > 1 and np.any(np.diff(ts) < 0):
            raise DataError(f"recording {self.user_id!r}: timestamps decrease")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        if self.labels is not None:
            labels = tuple(str(l) for l in self.labels)
            if len(labels) != vals.shape[0]:
                raise DataError(f"recording {self.user_id!r}: {len(labels)} labels for {vals.shape[0]} samples")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class SensorWindow:
    values: np.ndarray
    user_id: str = ""
    start_index: int = 0
    oracle_label: Optional[str] = None

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.ndim != 2 or vals.shape[1] != 3 or vals.shape[0] == 0:
            raise DataError(f"window values must have shape (window_len, 3), got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise DataError("window contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def window_len(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class DatasetSpec:
    window_len: int = 128
    overlap: float = 0.5
    label_merge_map: Mapping[str, str] = field(default_factory=dict)
    user_groups: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.window_len < 1:
            raise ConfigError("window_len must be >= 1")
        if not 0 <= self.overlap < 1:
            raise ConfigError("overlap must lie in [0, 1)")
        if window_step(self.window_len, self.overlap) < 1:
            raise ConfigError(f"overlap {self.overlap} leaves a zero window step at window_len {self.window_len}")
        for raw, merged in self.label_merge_map.items():
            # keeps merging idempotent
            if self.label_merge_map.get(merged, merged) != merged:
                raise ConfigError(f"label merge map is not idempotent: {raw!r} -> {merged!r} -> "
                                  f"{self.label_merge_map[merged]!r}")

    def merge_label(self, label: str) -> str:
        return self.label_merge_map.get(label, label)


def window_step(window_len: int, overlap: float) -> int:
    # the epsilon absorbs products like 400 * 0.7 = 279.99999...
    return int(math.floor(window_len * (1.0 - overlap) + 1e-9))


# ---------------------------------------------------------------- CSV


def load_csv(path, spec: DatasetSpec = DatasetSpec()) -> list[Recording]:
    """Read ``user,timestamp,x,y,z[,label]`` rows into one Recording per (pseudo-)user.

    Users mapped to the same pseudo-user by ``spec.user_groups`` are merged
    and re-sorted by timestamp (stable, so equal timestamps keep file order).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    per_user: dict[str, dict] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if tuple(header[:5]) != CSV_COLUMNS or len(header) > 6 or (len(header) == 6 and header[5] != "label"):
            raise DataError(f"{path}:1: expected header user,timestamp,x,y,z[,label], got {','.join(header)}")
        has_labels = len(header) == 6
        for row in reader:
            lineno = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            user = row[0].strip()
            try:
                ts, x, y, z = (float(v) for v in row[1:5])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric timestamp or axis value") from None
            if not all(math.isfinite(v) for v in (ts, x, y, z)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            if not user:
                raise DataError(f"{path}:{lineno}: empty user id")
            rec = per_user.setdefault(user, {"ts": [], "xyz": [], "labels": []})
            if rec["ts"] and ts < rec["ts"][-1]:
                raise DataError(f"{path}:{lineno}: timestamp {ts} precedes {rec['ts'][-1]} for user {user!r}")
            rec["ts"].append(ts)
            rec["xyz"].append((x, y, z))
            if has_labels:
                label = row[5].strip()
                if not label:
                    raise DataError(f"{path}:{lineno}: empty label")
                rec["labels"].append(spec.merge_label(label))

    groups: dict[str, list[str]] = {}
    for user in per_user:
        groups.setdefault(spec.user_groups.get(user, user), []).append(user)

    out = []
    for gid in sorted(groups):
        members = groups[gid]
        ts = np.concatenate([np.asarray(per_user[u]["ts"], dtype=float) for u in members])
        xyz = np.concatenate([np.asarray(per_user[u]["xyz"], dtype=float) for u in members])
        order = np.argsort(ts, kind="stable")
        labels = None
        if has_labels:
            flat = [l for u in members for l in per_user[u]["labels"]]
            labels = tuple(flat[i] for i in order)
        out.append(Recording(gid, ts[order], xyz[order], labels))
    return out


def load_many(paths: Iterable, spec: DatasetSpec = DatasetSpec()) -> list[Recording]:
    recordings: dict[str, Recording] = {}
    for p in paths:
        for rec in load_csv(p, spec):
            if rec.user_id in recordings:
                raise DataError(f"user {rec.user_id!r} appears in more than one file")
            recordings[rec.user_id] = rec
    return [recordings[k] for k in sorted(recordings)]


def write_csv(recordings: Sequence[Recording], path) -> None:
    with_labels = all(r.labels is not None for r in recordings)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS + (("label",) if with_labels else ()))
        for rec in recordings:
            for i in range(len(rec)):
                row = [rec.user_id, repr(float(rec.timestamps[i]))] + [repr(float(v)) for v in rec.values[i]]
                if with_labels:
                    row.append(rec.labels[i])
                w.writerow(row)


# ---------------------------------------------------------- windowing


def _majority(labels: Sequence[str]) -> str:
    counts = Counter(labels)
    best = max(counts.values())
    # earliest occurrence wins ties
    for l in labels:
        if counts[l] == best:
            return l
    raise AssertionError("unreachable")


def segment(recording: Recording, window_len: int, overlap: float) -> list[SensorWindow]:
    """Cut fixed-length windows; the trailing partial window is dropped."""
    if window_len < 1:
        raise ConfigError("window_len must be >= 1")
    if not 0 <= overlap < 1:
        raise ConfigError("overlap must lie in [0, 1)")
    step = window_step(window_len, overlap)
    if step < 1:
        raise ConfigError(f"overlap {overlap} leaves a zero window step at window_len {window_len}")
    n = len(recording)
    windows = []
    for start in range(0, n - window_len + 1, step):
        label = None
        if recording.labels is not None:
            label = _majority(recording.labels[start:start + window_len])
        windows.append(SensorWindow(recording.values[start:start + window_len], recording.user_id, start, label))
    return windows


# ---------------------------------------------------------- synthetic


@dataclass(frozen=True)
class ActivityPattern:
    """A periodic accelerometer signature: offset + amplitude * sin(2 pi f t)."""

    name: str
    frequency: float
    amplitude: tuple = (1.0, 1.0, 1.0)
    offset: tuple = (0.0, 0.0, 9.81)


DEFAULT_ACTIVITIES = (
    ActivityPattern("sitting", 1.1, (0.3, 0.3, 0.4), (0.0, 3.0, 9.3)),
    ActivityPattern("standing", 1.4, (0.4, 0.5, 0.3), (0.5, 9.6, 1.5)),
    ActivityPattern("walking", 1.9, (1.8, 1.4, 1.1), (9.0, 3.0, 2.5)),
    ActivityPattern("jogging", 2.8, (4.0, 5.0, 3.5), (-5.0, 6.5, 5.5)),
    ActivityPattern("biking", 1.3, (1.2, 0.8, 2.0), (-6.0, 4.0, 6.5)),
    ActivityPattern("stairs", 1.6, (2.2, 1.8, 2.6), (-3.0, 8.5, -4.0)),
)


def synth_generate(
    n_users: int,
    activities: Sequence[ActivityPattern],
    windows_per_activity: int,
    noise_std: float,
    seed: int,
    window_len: int = 128,
    sample_rate: float = 50.0,
    rounds: int = 8,
    wobble_std: float = 0.4,
    wobble_tau: float = 5.0,
    posture_std: float = 0.5,
) -> list[Recording]:
    """Labelled synthetic users.

    Each activity contributes ``windows_per_activity * window_len`` samples
    per user, split into ``rounds`` near-equal contiguous bouts; every round holds one
    bout of each activity in shuffled order. Users differ by random
    amplitude, frequency and offset jitter; bouts by phase. A slow
    Ornstein-Uhlenbeck drift (``wobble_std`` m/s^2, time constant
    ``wobble_tau`` s) perturbs the device orientation for all activities,
    and each bout adds a constant posture shift drawn with ``posture_std``.
    """
    if noise_std < 0 or wobble_std < 0 or posture_std < 0:
        raise ConfigError("noise_std, wobble_std and posture_std must be >= 0")
    if len(activities) < 2:
        raise ConfigError("synthetic data needs at least 2 activities")
    if n_users < 1 or windows_per_activity < 1 or window_len < 1 or rounds < 1:
        raise ConfigError("n_users, windows_per_activity, window_len and rounds must be >= 1")
    rounds = min(rounds, windows_per_activity)
    n_total = len(activities) * windows_per_activity * window_len
    decay = math.exp(-1.0 / (sample_rate * wobble_tau)) if wobble_tau > 0 else 0.0
    out = []
    for u in range(n_users):
        rng = np.random.default_rng([seed, u])
        amp_jit = rng.uniform(0.85, 1.15, size=(len(activities), 3))
        freq_jit = rng.uniform(0.92, 1.08, size=len(activities))
        off_jit = rng.normal(0.0, 0.25, size=(len(activities), 3))
        # near-equal bouts; the remainder goes to randomly chosen rounds
        bouts = []
        for a in range(len(activities)):
            sizes = np.full(rounds, windows_per_activity // rounds)
            sizes[rng.choice(rounds, size=windows_per_activity % rounds, replace=False)] += 1
            bouts.append(sizes)
        drive = rng.standard_normal((n_total, 3)) * wobble_std * math.sqrt(1 - decay ** 2)
        wobble = np.empty_like(drive)
        state = rng.standard_normal(3) * wobble_std
        for i in range(n_total):
            state = decay * state + drive[i]
            wobble[i] = state
        chunks, labels = [], []
        t0 = 0
        for r in range(rounds):
            for a in rng.permutation(len(activities)):
                act = activities[a]
                n = int(bouts[a][r]) * window_len
                t = (t0 + np.arange(n)) / sample_rate
                phase = rng.uniform(0, 2 * np.pi, size=3)
                f = act.frequency * freq_jit[a]
                amp = np.asarray(act.amplitude) * amp_jit[a] * rng.uniform(0.97, 1.03)
                arg = 2 * np.pi * f * t[:, None] + phase
                posture = rng.normal(0.0, posture_std, size=3) if posture_std > 0 else 0.0
                sig = (np.asarray(act.offset) + off_jit[a] + posture + wobble[t0:t0 + n]
                       + amp * np.sin(arg) + 0.3 * amp * np.sin(2 * arg + 1.0))
                if noise_std > 0:
                    sig = sig + rng.normal(0.0, noise_std, size=sig.shape)
                chunks.append(sig)
                labels.extend([act.name] * n)
                t0 += n
        values = np.concatenate(chunks)
        out.append(Recording(f"u{u + 1:02d}", np.arange(t0) / sample_rate, values, tuple(labels)))
    return out
