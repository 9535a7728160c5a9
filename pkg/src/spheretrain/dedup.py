"""Mini-batch k-means with Bradley-Fayyad seeding and cluster maintenance.

Seeding runs k-means++ on the data, refines that seed on ``J`` small random
subsamples, pools the ``J x K`` refined centroids and clusters the pool again,
keeping the best of the ``J`` pooled solutions. Training then streams random
mini-batches; each touched centroid moves toward its batch mean at rate
``n_batch / (n_k + n_batch)``. Every ``maintenance_period`` iterations, nearly
empty clusters are moved to the batch point farthest from all centroids and
oversized clusters donate a random member as a new centroid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, InitializationError
from .numcore import RngStream


@dataclass(frozen=True)
class KmeansConfig:
    K: int
    J: int = 10
    subsample_fraction: float = 0.01
    sample_iters: int = 20
    batch_size: int = 1024
    maintenance_period: int = 10
    dead_threshold_factor: float = 0.01
    split_factor: float = 12.0
    iterations: int | None = None  # default: 3 epochs of mini-batches

    def __post_init__(self):
        for name in ("K", "J", "sample_iters", "batch_size", "maintenance_period"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if not 0 < self.subsample_fraction <= 1:
            raise ContractError("subsample_fraction must be in (0, 1]")
        if not (self.dead_threshold_factor > 0 and self.split_factor > 0):
            raise ContractError("thresholds must be positive")

    def iteration_budget(self, n: int) -> int:
        if self.iterations is not None:
            return self.iterations
        return 3 * math.ceil(n / self.batch_size)


@dataclass
class ClusterState:
    centroids: np.ndarray
    counts: np.ndarray
    iteration: int = 0

    @classmethod
    def fresh(cls, centroids) -> "ClusterState":
        c = np.array(centroids, dtype=np.float64, order="C")
        return cls(c, np.zeros(c.shape[0]))

    @property
    def K(self) -> int:
        return self.centroids.shape[0]


@dataclass
class MaintenanceEvent:
    iteration: int
    kind: str  # "reseed" | "split"
    cluster: int
    donor: int | None = None

    def to_json(self) -> dict:
        out = {"iteration": self.iteration, "kind": self.kind, "cluster": self.cluster}
        if self.donor is not None:
            out["donor"] = self.donor
        return out


@dataclass
class KmeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    events: list[MaintenanceEvent] = field(default_factory=list)
    state: ClusterState | None = None


def sq_distances(x, c) -> np.ndarray:
    """All squared distances via ``|x|^2 + |c|^2 - 2 x.c``, clamped at 0."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    d = np.einsum("ij,ij->i", x, x)[:, None] + np.einsum("ij,ij->i", c, c)[None, :] - 2.0 * (x @ c.T)
    return np.maximum(d, 0.0)


def assign(x, centroids) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels and squared distances."""
    return kernels.assign_nearest(x, centroids)


def inertia(x, centroids) -> float:
    """Sum over points of the squared distance to the nearest centroid."""
    x = np.asarray(x, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if x.shape[1] != centroids.shape[1]:
        raise ContractError(f"dimension mismatch: {x.shape[1]} vs {centroids.shape[1]}")
    return float(assign(x, centroids)[1].sum())


def kmeans_plus_plus(x, k: int, gen: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[gen.integers(n)]
    closest = sq_distances(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), gen.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(gen.integers(n))
        centers[i] = x[idx]
        closest = np.minimum(closest, sq_distances(x, centers[i : i + 1])[:, 0])
    return centers


def lloyd(x, init, iters: int) -> np.ndarray:
    """Plain full-batch k-means; empty clusters keep their centroid."""
    c = np.array(init, dtype=np.float64, order="C")
    k = c.shape[0]
    for _ in range(iters):
        labels, _ = assign(x, c)
        nb = np.bincount(labels, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        hit = nb > 0
        new = c.copy()
        new[hit] = sums[hit] / nb[hit, None]
        if np.array_equal(new, c):
            break
        c = new
    return c


def _distinct_rows(x) -> int:
    return np.unique(x, axis=0).shape[0]


def bf_init(x, cfg: KmeansConfig, rng: RngStream) -> np.ndarray:
    """Bradley-Fayyad refined starting centroids, shape ``(K, dim)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < cfg.K:
        raise InitializationError(f"{n} points for K={cfg.K}")
    if _distinct_rows(x) < cfg.K:
        raise InitializationError(f"fewer than K={cfg.K} distinct points")
    gen = rng.generator()
    seed = kmeans_plus_plus(x, cfg.K, gen)
    m = min(n, max(cfg.K, math.ceil(cfg.subsample_fraction * n)))
    refined = []
    for _ in range(cfg.J):
        idx = np.sort(gen.choice(n, size=m, replace=False))
        refined.append(lloyd(x[idx], seed, cfg.sample_iters))
    pool = np.concatenate(refined, axis=0)
    best, best_inertia = None, math.inf
    for start in refined:
        c = lloyd(pool, start, cfg.sample_iters)
        val = inertia(pool, c)
        if val < best_inertia:
            best, best_inertia = c, val
    return best


def minibatch_step(state: ClusterState, batch) -> ClusterState:
    """Assign ``batch`` and move every touched centroid toward its batch mean."""
    batch = np.ascontiguousarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ContractError("empty batch")
    if batch.shape[1] != state.centroids.shape[1]:
        raise ContractError("batch dimension does not match centroids")
    labels, _ = assign(batch, state.centroids)
    kernels.minibatch_update(state.centroids, state.counts, batch, labels)
    state.iteration += 1
    return state


def maintain(state: ClusterState, batch, cfg: KmeansConfig, rng: np.random.Generator, events: list | None = None) -> ClusterState:
    """Reseed dead clusters and split oversized ones, in place.

    Dead: ``n_k < dead_threshold_factor * max(n)``; each moves to the batch
    point with the largest distance to its nearest centroid, taking the newly
    placed centroids into account, and its count restarts at 0.
    Oversized: ``n_k > split_factor * mean(n)``; a random batch member of the
    cluster seeds a new centroid in the most recently reseeded slot, or else in
    the lowest-count slot, and the donor's count is split evenly with it.
    """
    batch = np.ascontiguousarray(batch, dtype=np.float64)
    events = [] if events is None else events
    c, n = state.centroids, state.counts
    dead_slots: list[int] = []

    dead = np.flatnonzero(n < cfg.dead_threshold_factor * n.max())
    if dead.size:
        far = assign(batch, c)[1]
        for k in dead:
            i = int(np.argmax(far))
            c[k] = batch[i]
            n[k] = 0.0
            far = np.minimum(far, sq_distances(batch, c[k : k + 1])[:, 0])
            dead_slots.append(int(k))
            events.append(MaintenanceEvent(state.iteration, "reseed", int(k)))

    big = np.flatnonzero(n > cfg.split_factor * n.mean())
    if big.size:
        labels = assign(batch, c)[0]
        for donor in big:
            members = np.flatnonzero(labels == donor)
            if members.size == 0:
                continue
            if dead_slots:
                slot = dead_slots.pop()
            else:
                order = np.argsort(n, kind="stable")
                slot = int(next(j for j in order if j != donor))
            c[slot] = batch[members[rng.integers(members.size)]]
            half = n[donor] / 2.0
            n[donor] = half
            n[slot] = half
            events.append(MaintenanceEvent(state.iteration, "split", slot, int(donor)))
    return state


def fit(x, cfg: KmeansConfig, rng: RngStream, init=None) -> KmeansResult:
    """Seed (or take ``init``), run the mini-batch loop with maintenance, and
    assign every point. Deterministic for fixed ``(x, cfg, rng)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < cfg.K:
        raise InitializationError(f"{n} points for K={cfg.K}")
    if init is None:
        centroids = bf_init(x, cfg, rng.child(1))
    else:
        centroids = np.array(init, dtype=np.float64)
        if centroids.shape != (cfg.K, x.shape[1]):
            raise ContractError(f"init must have shape {(cfg.K, x.shape[1])}")
    state = ClusterState.fresh(centroids)
    gen = rng.child(2).generator()
    events: list[MaintenanceEvent] = []
    bsz = min(cfg.batch_size, n)
    perm = gen.permutation(n)
    pos = 0
    for _ in range(cfg.iteration_budget(n)):
        if pos + bsz > n:
            perm = gen.permutation(n)
            pos = 0
        batch = x[np.sort(perm[pos : pos + bsz])]
        pos += bsz
        minibatch_step(state, batch)
        if state.iteration % cfg.maintenance_period == 0:
            maintain(state, batch, cfg, gen, events)
    labels, dist = assign(x, state.centroids)
    return KmeansResult(state.centroids, labels, float(dist.sum()), events, state)
