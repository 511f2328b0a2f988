"""Scoring a representation: the unsupervised Zipf/KL fitness and a weakly
supervised cluster-accuracy baseline.  Both return "higher is better"."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .synthgen import zipf_pmf


class FitnessError(ValueError):
    pass


@dataclass
class ClusterModel:
    centroids: np.ndarray
    k: int
    seed: int
    iterations: int = 0
    sse_trace: tuple = ()


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(axis=1)[:, None] - 2.0 * (X @ C.T) + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X, k, rng):
    n = len(X)
    centres = [X[rng.integers(n)]]
    d2 = ((X - centres[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        # every remaining point coincides with a centre: any pick is as good
        i = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centres.append(X[i])
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(axis=1))
    return np.array(centres, dtype=np.float64)


def kmeans(X, k: int, seed: int = 0, max_iter: int = 100) -> ClusterModel:
    """k-means++ seeding, then Lloyd iterations to an assignment fixpoint.

    A cluster that loses all its points keeps its previous centroid, so the
    within-cluster SSE never increases.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise FitnessError(f"kmeans expects an (n, D) array, got shape {X.shape}")
    if k < 1 or len(X) < k:
        raise FitnessError(f"need n >= k >= 1, got n={len(X)}, k={k}")
    if not np.isfinite(X).all():
        raise FitnessError("kmeans input contains non-finite values")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    assign = None
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        new = np.argmin(_sq_dists(X, C), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = X[assign == j]
            if len(members):
                C[j] = members.mean(axis=0)
        trace.append(float(((X - C[assign]) ** 2).sum()))
    return ClusterModel(C, k, seed, it, tuple(trace))


def soft_membership(x, model: ClusterModel) -> np.ndarray:
    """Softmax over negative squared distances (2 sigma^2 = 1); rows for 2-D ``x``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    logits = -_sq_dists(X, model.centroids)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if single else p


def zipf_prior(k: int, s: float) -> np.ndarray:
    if k < 1 or not s > 0:
        raise FitnessError(f"zipf prior needs k >= 1 and s > 0, got k={k}, s={s}")
    return zipf_pmf(k, s)


def cluster_mass(memberships) -> np.ndarray:
    m = np.asarray(memberships, dtype=np.float64)
    if m.ndim != 2 or len(m) == 0:
        raise FitnessError("memberships must be a non-empty (n, k) array")
    return m.mean(axis=0)


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise FitnessError(f"distributions differ in shape: {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-6:
            raise FitnessError(f"{name} is not a probability vector")
    live = p > 0
    if np.any(q[live] <= 0):
        raise FitnessError("q has zero mass where p is positive")
    return float(max(0.0, np.sum(p[live] * np.log(p[live] / q[live]))))


@dataclass
class FitnessReport:
    per_trial_kl: list
    mean_kl: float
    fitness: float
    cluster_masses: list
    prior: list

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FitnessReport":
        return cls(**d)


def _canonical_rows(X: np.ndarray) -> np.ndarray:
    # lexicographic row order makes seeded clustering independent of input order
    return X[np.lexsort(X.T[::-1])] if X.shape[1] else X


def elo_fitness(embeddings, k: int, s: float = 1.0, trials: int = 20,
                base_seed: int = 0) -> FitnessReport:
    """Negative mean KL between sorted soft-cluster masses and a Zipf prior."""
    X = _canonical_rows(np.asarray(embeddings, dtype=np.float64))
    if trials < 1:
        raise FitnessError("trials must be >= 1")
    q = zipf_prior(k, s)
    kls, masses = [], None
    for t in range(trials):
        model = kmeans(X, k, seed=base_seed + t)
        masses = np.sort(cluster_mass(soft_membership(X, model)))[::-1]
        masses = masses / masses.sum()
        kls.append(kl_divergence(masses, q))
    mean = math.fsum(kls) / trials
    return FitnessReport(kls, mean, -mean, masses.tolist(), q.tolist())


def parity_split(clip_ids) -> tuple[np.ndarray, np.ndarray]:
    """Indices (fit, eval): even clip ids fit, odd clip ids evaluate; each sorted by id."""
    ids = np.asarray(clip_ids)
    order = np.argsort(ids, kind="stable")
    even = ids[order] % 2 == 0
    return order[even], order[~even]


def cluster_vote_accuracy(X_fit, y_fit, X_eval, y_eval, k: int, seed: int) -> float:
    model = kmeans(X_fit, k, seed=seed)
    fit_assign = np.argmin(_sq_dists(X_fit, model.centroids), axis=1)
    votes = np.full(k, -1)
    for j in range(k):
        members = y_fit[fit_assign == j]
        if len(members):
            vals, counts = np.unique(members, return_counts=True)
            votes[j] = vals[np.argmax(counts)]
    pred = votes[np.argmin(_sq_dists(X_eval, model.centroids), axis=1)]
    # an abstaining (empty) cluster predicts -1, which never matches a label
    return float(np.mean(pred == y_eval))


def weak_fitness(embeddings, labels, k: int, trials: int = 20, clip_ids=None,
                 base_seed: int = 0) -> float:
    """Mean nearest-centroid accuracy; clusters fit on even ids, scored on odd ids."""
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if len(y) != len(X):
        raise FitnessError(f"{len(X)} embeddings but {len(y)} labels")
    ids = np.arange(len(X)) if clip_ids is None else np.asarray(clip_ids)
    fit, ev = parity_split(ids)
    if len(ev) == 0:
        raise FitnessError("evaluation half is empty")
    accs = [cluster_vote_accuracy(X[fit], y[fit], X[ev], y[ev], k, base_seed + t)
            for t in range(trials)]
    return math.fsum(accs) / trials
