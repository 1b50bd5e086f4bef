"""Per-user client loop: accumulate, cluster, then query on density gain."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import clusterstore as cs
from . import reduction
from .dataset import SensorWindow
from .errors import ConfigError, PipelineError

TRACE_HEADER = "seq,phase,event,cluster_id,queried,label"


class Phase(str, enum.Enum):
    ACCUMULATING = "accumulating"
    ACTIVE_LEARNING = "active_learning"
    FINISHED = "finished"


@dataclass(frozen=True)
class SessionConfig:
    acc_th: int = 100
    out_dim: int = 2
    eps: Optional[float] = None  # None: median eps_k-NN distance of the accumulated points
    eps_k: int = 9
    min_pts: int = 10
    backend: str = "statistical"
    window_len: int = 128
    overlap: float = 0.5

    def __post_init__(self):
        if self.out_dim < 1:
            raise ConfigError("reducer out_dim must be >= 1")
        if self.acc_th < max(1, self.out_dim + 1):
            raise ConfigError(f"acc_th must be >= {self.out_dim + 1} (reducer minimum), got {self.acc_th}")
        if self.eps is not None and self.eps <= 0:
            raise ConfigError("dbscan eps must be > 0")
        if self.min_pts < 1 or self.eps_k < 1:
            raise ConfigError("dbscan min_pts and eps_k must be >= 1")
        if self.backend not in ("statistical", "conv"):
            raise ConfigError(f"unknown encoder backend {self.backend!r}")


@dataclass(frozen=True)
class StepEvent:
    kind: str  # accumulated | clusters_built | query | silent
    seq: int
    cluster_id: Optional[int] = None
    cluster_count: Optional[int] = None
    label: Optional[str] = None
    window: Optional[SensorWindow] = field(default=None, repr=False)

    @property
    def queried(self) -> bool:
        return self.kind == "query"


@dataclass
class SessionResult:
    labeled_samples: list
    queries_issued: int
    stream_samples_in_al_phase: int


def active_learning_needed(store: cs.ClusterStore, cluster_id: int, point) -> bool:
    """True when adding ``point`` would lower the cluster's average pairwise distance."""
    return cs.t_c_after(store, cluster_id, point) < store.get(cluster_id).t_c


def _oracle_label(window: SensorWindow) -> str:
    if window.oracle_label is None:
        raise PipelineError(f"query at window {window.start_index} of {window.user_id!r} but it carries no label")
    return window.oracle_label


class Session:
    """Single-owner state machine; feed windows in stream order."""

    def __init__(self, config: SessionConfig, backend, oracle: Callable[[SensorWindow], str] = _oracle_label):
        self.config = config
        self.backend = backend
        self.oracle = oracle
        self.phase = Phase.ACCUMULATING
        self.samples_seen = 0
        self.storage: list[np.ndarray] = []
        self.reducer: Optional[reduction.ReducerModel] = None
        self.reduced_storage: Optional[np.ndarray] = None
        self.accumulation_labels: Optional[np.ndarray] = None
        self.eps: Optional[float] = None
        self.store: Optional[cs.ClusterStore] = None
        self.labeled_samples: list[tuple[SensorWindow, str]] = []
        self.queries_issued = 0
        self.stream_samples_in_al_phase = 0
        self.events: list[StepEvent] = []
        # (reduced point, cluster id, queried) for each post-threshold sample
        self.stream_points: list[tuple[np.ndarray, int, bool]] = []

    @property
    def cluster_count(self) -> int:
        return len(self.store) if self.store is not None else 0

    def process_sample(self, window: SensorWindow) -> StepEvent:
        if self.phase is Phase.FINISHED:
            raise PipelineError("session already finished")
        self.samples_seen += 1
        seq = self.samples_seen
        emb = np.asarray(self.backend.embed(window), dtype=float)
        acc_th = self.config.acc_th
        if seq <= acc_th:
            self.storage.append(emb)
            if seq < acc_th:
                ev = StepEvent("accumulated", seq)
            else:
                self._build_clusters()
                self.phase = Phase.ACTIVE_LEARNING
                ev = StepEvent("clusters_built", seq, cluster_count=len(self.store))
        else:
            point = reduction.transform(self.reducer, emb)
            cid = cs.nearest_cluster(self.store, point)
            queried = active_learning_needed(self.store, cid, point)
            label = None
            if queried:
                label = self.oracle(window)
                self.labeled_samples.append((window, label))
                self.queries_issued += 1
            cs.insert(self.store, cid, point)
            self.stream_samples_in_al_phase += 1
            self.stream_points.append((point, cid, queried))
            ev = StepEvent("query" if queried else "silent", seq, cid, label=label, window=window)
        self.events.append(ev)
        return ev

    def _build_clusters(self):
        cfg = self.config
        storage = np.stack(self.storage)
        self.reducer = reduction.fit(storage, cfg.out_dim)
        self.reduced_storage = reduction.transform(self.reducer, storage)
        self.eps = cfg.eps if cfg.eps is not None else cs.auto_eps(self.reduced_storage, cfg.eps_k)
        self.accumulation_labels = cs.dbscan(self.reduced_storage, self.eps, cfg.min_pts)
        self.store = cs.build_store(self.reduced_storage, self.accumulation_labels)
        if not self.store.clusters:
            raise PipelineError(
                f"accumulation insufficient: clustering {len(storage)} samples (eps={self.eps:.4g}, "
                f"min_pts={cfg.min_pts}) found only noise")

    def finish(self) -> SessionResult:
        if self.phase is Phase.ACCUMULATING:
            raise PipelineError("accumulation never completed: cannot finish before clustering")
        if self.phase is Phase.FINISHED:
            raise PipelineError("session already finished")
        self.phase = Phase.FINISHED
        return SessionResult(list(self.labeled_samples), self.queries_issued, self.stream_samples_in_al_phase)

    # ------------------------------------------------------------ traces

    def trace_lines(self) -> list[str]:
        lines = [TRACE_HEADER]
        for ev in self.events:
            phase = Phase.ACCUMULATING.value if ev.seq <= self.config.acc_th else Phase.ACTIVE_LEARNING.value
            cid = "" if ev.cluster_id is None else str(ev.cluster_id)
            lines.append(f"{ev.seq},{phase},{ev.kind},{cid},{int(ev.queried)},{ev.label or ''}")
        return lines

    def point_lines(self) -> list[str]:
        """``seq,cluster_id,r0..`` rows: accumulation points with their DBSCAN label, then stream points."""
        if self.reduced_storage is None:
            return []
        dims = self.reduced_storage.shape[1]
        lines = ["seq,cluster_id," + ",".join(f"r{i}" for i in range(dims))]
        for i, (p, lab) in enumerate(zip(self.reduced_storage, self.accumulation_labels)):
            lines.append(f"{i + 1},{lab}," + ",".join(repr(float(v)) for v in p))
        for j, (p, cid, _) in enumerate(self.stream_points):
            lines.append(f"{self.config.acc_th + j + 1},{cid}," + ",".join(repr(float(v)) for v in p))
        return lines


def replay_decisions(acc_points, acc_labels, stream_points, stream_clusters) -> list[bool]:
    """Recompute each stream decision from scratch with brute-force pairwise averages."""
    members: dict[int, list] = {}
    for p, lab in zip(acc_points, acc_labels):
        if lab != cs.NOISE:
            members.setdefault(int(lab), []).append(np.asarray(p, dtype=float))

    def avg_pairwise(pts):
        n = len(pts)
        if n < 2:
            return 0.0
        a = np.stack(pts)
        d = np.sqrt(((a[:, None, :] - a[None, :, :]) ** 2).sum(axis=-1))
        return float(d[np.triu_indices(n, 1)].sum()) / (n * (n - 1) / 2)

    out = []
    for p, cid in zip(stream_points, stream_clusters):
        p = np.asarray(p, dtype=float)
        group = members[int(cid)]
        out.append(avg_pairwise(group + [p]) < avg_pairwise(group))
        group.append(p)
    return out
