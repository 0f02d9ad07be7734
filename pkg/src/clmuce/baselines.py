"""Comparison schemes: single-user CNN, K-Means location-grouped CNN, and joint OMP.

The JOMP baseline is the standard simultaneous orthogonal matching pursuit:
one common angular atom is selected per iteration for all users, followed by
per-user least squares on the accumulated support.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .adaptive import EstimationReport, UserGrouping, per_user_nmse
from .channel_sim import PilotMatrix, SystemConfig, nu_inv, steering_vector
from .clnet import measurement_scale
from .dnet import DispatchError, DsnetResult, TrainSchedule, dsnet_apply, greedy_groups, label_scale, train_dsnet
from .numerics import stream
from .numerics.tensor import ConfigurationError

RAW_PREFIX = "raw"


# -- K-Means ---------------------------------------------------------------------

@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding drawn from stream (seed, 'kmeans')."""
    X = np.asarray(points, float)
    n = len(X)
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if k > n:
        raise ConfigurationError(f"k={k} exceeds the number of points {n}")
    rng = stream(seed, "kmeans")
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    C = np.array(centers)
    labels = None
    it = 0
    for it in range(1, max_iter + 1):
        dist = np.sum((X[:, None, :] - C[None, :, :]) ** 2, axis=2)
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = X[labels == j]
            if len(members):
                C[j] = members.mean(axis=0)
    inertia = float(np.sum((X - C[labels]) ** 2))
    return KMeansResult(labels, C, inertia, it)


def location_groups(positions: np.ndarray, q: int, seed: int) -> list[np.ndarray]:
    """K-Means into ceil(n/q) clusters, then split each cluster into nearest-position groups of <= q."""
    positions = np.asarray(positions, float)
    n = len(positions)
    if q < 1:
        raise ConfigurationError(f"group size must be >= 1, got {q}")
    if q == 1:
        return [np.array([i]) for i in range(n)]
    km = kmeans(positions, math.ceil(n / q), seed)
    groups = []
    for j in range(len(km.centroids)):
        members = np.flatnonzero(km.labels == j)
        if members.size == 0:
            continue
        for g in greedy_groups(positions[members], q):
            groups.append(np.sort(members[g]))
    groups.sort(key=lambda g: int(g[0]))
    return groups


# -- learned raw-signal baselines ----------------------------------------------------

@dataclass
class RawCnnModel:
    nets: dict[int, DsnetResult]
    config: SystemConfig
    group_size: int
    losses: dict[int, list[float]] = field(default_factory=dict)


def _scaled_inputs(y_real: np.ndarray) -> np.ndarray:
    return np.asarray(y_real, float) * measurement_scale(y_real)[:, None]


def train_raw_cnn(q: int, member_idx: np.ndarray, y_real: np.ndarray, h: np.ndarray, config: SystemConfig,
                  schedule: TrainSchedule, seed: int) -> DsnetResult:
    """DSNet-q-shaped CNN trained on raw (gain-normalized) measurements instead of features."""
    return train_dsnet(q, member_idx, _scaled_inputs(y_real), y_real, h, config, schedule, seed, prefix=RAW_PREFIX)


def _apply_raw(model: RawCnnModel, y_real: np.ndarray, groups: list[np.ndarray]) -> np.ndarray:
    x = _scaled_inputs(y_real)
    scale = label_scale(y_real, model.config.channel_len)
    est = [None] * len(y_real)
    for g in groups:
        net = model.nets.get(len(g))
        if net is None:
            raise DispatchError(f"no raw CNN for group size {len(g)}")
        out = dsnet_apply(net.arch, net.params.frozen(), x[g][None, :, :]).data[0]
        for row, user in enumerate(g):
            est[user] = nu_inv(out[row]) / scale[user]
    return np.stack(est)


def single_user_ce_train(y_real: np.ndarray, h: np.ndarray, config: SystemConfig, schedule: TrainSchedule,
                         seed: int) -> RawCnnModel:
    idx = np.arange(len(y_real)).reshape(-1, 1)
    net = train_raw_cnn(1, idx, y_real, h, config, schedule, seed)
    return RawCnnModel({1: net}, config, 1, {1: net.losses})


def single_user_ce_apply(model: RawCnnModel, y_real: np.ndarray, h_true: np.ndarray | None = None
                         ) -> EstimationReport:
    y_real = np.atleast_2d(y_real)
    groups = [np.array([k]) for k in range(len(y_real))]
    est = _apply_raw(model, y_real, groups)
    rep = EstimationReport(est, UserGrouping(groups, [math.inf] * len(groups)), method="single-user")
    if h_true is not None:
        rep.nmse = per_user_nmse(h_true, est)
    return rep


def location_based_ce_train(positions: np.ndarray, y_real: np.ndarray, h: np.ndarray, group_size: int,
                            config: SystemConfig, schedule: TrainSchedule, seed: int) -> RawCnnModel:
    """One raw CNN per group size 1..group_size, each trained on K-Means location groups of that size."""
    nets = {}
    for q in range(1, group_size + 1):
        groups = location_groups(positions, q, seed)
        idx = np.array([g for g in groups if len(g) == q], dtype=np.intp).reshape(-1, q)
        if len(idx) == 0:
            continue
        nets[q] = train_raw_cnn(q, idx, y_real, h, config, schedule, seed)
    return RawCnnModel(nets, config, group_size, {q: n.losses for q, n in nets.items()})


def location_based_ce_apply(model: RawCnnModel, positions: np.ndarray, y_real: np.ndarray, seed: int,
                            h_true: np.ndarray | None = None) -> EstimationReport:
    y_real = np.atleast_2d(y_real)
    groups = location_groups(positions, model.group_size, seed)
    est = _apply_raw(model, y_real, groups)
    rep = EstimationReport(est, UserGrouping(groups, [math.nan] * len(groups)), method="location-based")
    if h_true is not None:
        rep.nmse = per_user_nmse(h_true, est)
    return rep


# -- joint orthogonal matching pursuit -------------------------------------------------

def angular_dictionary(n_tx: int, grid: int) -> np.ndarray:
    """N_t x G steering vectors on the uniform sin(theta) grid -1 + 2g/G."""
    sines = -1.0 + 2.0 * np.arange(grid) / grid
    return steering_vector(n_tx, sines).T


@dataclass
class SparseRecovery:
    support: list[int]
    coefficients: np.ndarray  # (K, G) complex, zero off support
    residual_norms: np.ndarray  # (iterations + 1, K); row 0 is the measurement norm
    flagged_rank_deficient: bool = False

    def estimates(self, A: np.ndarray) -> np.ndarray:
        return self.coefficients @ A.T


def somp(Y: np.ndarray, Phi: np.ndarray, sparsity: int, tol: float = 1e-6) -> SparseRecovery:
    """Common-support OMP for measurement vectors ``Y`` (K, L) against dictionary ``Phi`` (L, G)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=complex))
    Phi = np.asarray(Phi, dtype=complex)
    K, L = Y.shape
    G = Phi.shape[1]
    if sparsity > L:
        raise ConfigurationError(f"sparsity {sparsity} exceeds measurement length {L}")
    col_norm = np.linalg.norm(Phi, axis=0)
    col_norm = np.where(col_norm > 0, col_norm, 1.0)
    support: list[int] = []
    coef = np.zeros((K, G), dtype=complex)
    res = Y.copy()
    norms = [np.linalg.norm(res, axis=1)]
    flagged = False
    for _ in range(sparsity):
        if np.all(norms[-1] < tol):
            break
        score = np.sum(np.abs(Phi.conj().T @ res.T), axis=1) / col_norm  # (G,)
        score[support] = -np.inf
        g = int(np.argmax(score))
        support.append(g)
        sub = Phi[:, support]
        x, _, rank, _ = np.linalg.lstsq(sub, Y.T, rcond=None)
        if rank < len(support):
            flagged = True
        coef[:] = 0
        coef[:, support] = x.T
        res = Y - (sub @ x).T
        norms.append(np.linalg.norm(res, axis=1))
    if flagged:
        warnings.warn("somp: rank-deficient least squares on support; minimum-norm solution used", RuntimeWarning)
    return SparseRecovery(support, coef, np.array(norms), flagged)


def jomp(y: np.ndarray, pilot: PilotMatrix, A: np.ndarray, sparsity: int = 8, tol: float = 1e-6) -> np.ndarray:
    """Joint estimates for K users from their received pilots.

    ``y`` is (K, N_r, L*N_c) complex (or (K, L) for a single antenna / subcarrier).
    Every receive antenna row counts as a separate measurement vector with the same
    support; subcarriers are recovered independently with that shared support.
    Returns (K, N_r*N_t*N_c) in vec(H) order.
    """
    y = np.asarray(y, dtype=complex)
    if y.ndim == 2:
        y = y[:, None, :]
    K, n_rx, _ = y.shape
    n_sc, n_tx, L = pilot.S.shape
    H = np.zeros((K, n_rx, n_tx * n_sc), dtype=complex)
    for n in range(n_sc):
        Phi = pilot.S[n].T @ A  # (L, G)
        rows = y[:, :, n * L : (n + 1) * L].reshape(K * n_rx, L)
        rec = somp(rows, Phi, sparsity, tol)
        H[:, :, n * n_tx : (n + 1) * n_tx] = rec.estimates(A).reshape(K, n_rx, n_tx)
    return np.swapaxes(H, 1, 2).reshape(K, -1)


def jomp_report(Y: np.ndarray, pilot: PilotMatrix, A: np.ndarray, sparsity: int, tol: float,
                h_true: np.ndarray | None = None) -> EstimationReport:
    est = jomp(Y, pilot, A, sparsity, tol)
    k = len(est)
    rep = EstimationReport(est, UserGrouping([np.arange(k)], [math.nan]), method="jomp")
    if h_true is not None:
        rep.nmse = per_user_nmse(h_true, est)
    return rep
