"""DBSCAN over reduced embeddings and per-cluster pairwise-distance statistics.

A cluster's density threshold ``t_c`` is the mean Euclidean distance over
all member pairs. It is maintained incrementally: inserting a point costs
one pass over the cluster's members.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, PipelineError

NOISE = -1


def _neighbors(points: np.ndarray, eps: float, block: int = 512) -> list[np.ndarray]:
    out = []
    for start in range(0, len(points), block):
        chunk = points[start:start + block]
        d = np.sqrt(((chunk[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1))
        out.extend(np.flatnonzero(row <= eps) for row in d)
    return out


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Label each point with a cluster id (0, 1, ...) or ``NOISE``.

    ``min_pts`` counts the point itself. Points are scanned in index order;
    a border point joins the first cluster whose expansion reaches it.
    """
    if eps <= 0:
        raise DataError("eps must be > 0")
    if min_pts < 1:
        raise DataError("min_pts must be >= 1")
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if len(pts) == 0:
        raise DataError("dbscan needs at least one point")
    nbrs = _neighbors(pts, eps)
    core = np.array([len(nb) >= min_pts for nb in nbrs])
    labels = np.full(len(pts), NOISE, dtype=int)
    next_id = 0
    for i in range(len(pts)):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = next_id
        queue = deque([i])
        while queue:
            p = queue.popleft()
            if not core[p]:
                continue
            for q in nbrs[p]:
                if labels[q] == NOISE:
                    labels[q] = next_id
                    queue.append(q)
        next_id += 1
    return labels


def knn_distance(points, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n < 2:
        return np.zeros(n)
    k = min(k, n - 1)
    out = np.empty(n)
    for start in range(0, n, 512):
        chunk = pts[start:start + 512]
        d = np.sqrt(((chunk[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1))
        # the zero self-distance sits at position 0 after sorting
        out[start:start + len(chunk)] = np.partition(d, k, axis=1)[:, k]
    return out


def auto_eps(points, k: int = 4) -> float:
    """Median k-NN distance; falls back to the smallest positive one if that is 0."""
    d = knn_distance(points, k)
    eps = float(np.median(d)) if len(d) else 0.0
    if eps <= 0:
        positive = d[d > 0]
        eps = float(positive.min()) if len(positive) else 1.0
    return eps


@dataclass
class Cluster:
    id: int
    members: list = field(default_factory=list)
    centroid: np.ndarray = None
    pair_dist_sum: float = 0.0

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def t_c(self) -> float:
        n = len(self.members)
        return self.pair_dist_sum / (n * (n - 1) / 2) if n >= 2 else 0.0

    def distance_sum(self, point: np.ndarray) -> float:
        return float(np.linalg.norm(np.asarray(self.members) - point, axis=1).sum())

    def add(self, point) -> float:
        """Insert ``point`` and return the new t_c."""
        p = np.array(point, dtype=float)
        if self.members:
            self.pair_dist_sum += self.distance_sum(p)
            self.members.append(p)
            self.centroid = self.centroid + (p - self.centroid) / len(self.members)
        else:
            self.members.append(p)
            self.centroid = p.copy()
        return self.t_c


@dataclass
class ClusterStore:
    clusters: dict = field(default_factory=dict)
    noise_count: int = 0

    def __len__(self) -> int:
        return len(self.clusters)

    def get(self, cluster_id: int) -> Cluster:
        try:
            return self.clusters[cluster_id]
        except KeyError:
            raise PipelineError(f"unknown cluster id {cluster_id}") from None

    def dump(self) -> str:
        """Text listing, one cluster per line: ``id,size,t_c,centroid`` (space-separated centroid)."""
        lines = [f"# noise={self.noise_count}", "id,size,t_c,centroid"]
        for cid in sorted(self.clusters):
            c = self.clusters[cid]
            lines.append(f"{cid},{c.size},{c.t_c!r},{' '.join(repr(float(v)) for v in c.centroid)}")
        return "\n".join(lines) + "\n"


def build_store(points, labels) -> ClusterStore:
    pts = np.asarray(points, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if len(pts) != len(labels):
        raise DataError(f"{len(pts)} points but {len(labels)} labels")
    store = ClusterStore(noise_count=int((labels == NOISE).sum()))
    for cid in sorted(set(labels.tolist()) - {NOISE}):
        cluster = Cluster(cid)
        for p in pts[labels == cid]:
            cluster.add(p)
        store.clusters[cid] = cluster
    return store


def nearest_cluster(store: ClusterStore, point) -> int:
    """Id of the cluster with the closest centroid; ties go to the smallest id."""
    if not store.clusters:
        raise PipelineError("cluster store is empty")
    p = np.asarray(point, dtype=float)
    ids = sorted(store.clusters)
    cents = np.stack([store.clusters[i].centroid for i in ids])
    d = np.linalg.norm(cents - p, axis=1)
    return ids[int(np.argmin(d))]


def insert(store: ClusterStore, cluster_id: int, point) -> float:
    """Add ``point`` to a cluster; returns the cluster's updated t_c."""
    return store.get(cluster_id).add(point)


def t_c_after(store: ClusterStore, cluster_id: int, point) -> float:
    """Average pairwise distance the cluster would have with ``point`` added."""
    c = store.get(cluster_id)
    n = c.size + 1
    extra = c.distance_sum(np.asarray(point, dtype=float)) if c.size else 0.0
    return (c.pair_dist_sum + extra) / (n * (n - 1) / 2) if n >= 2 else 0.0
