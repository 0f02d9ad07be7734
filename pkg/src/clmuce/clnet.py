"""Contrastive feature network: location-driven positives, multi-positive loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .channel_sim import Dataset, SystemConfig
from .numerics import (
    AdamState,
    ConvNetArch,
    ModelParams,
    Tensor,
    adam_step,
    conv_specs,
    forward,
    init_params,
    logsumexp,
    stream,
)
from .numerics.tensor import ConfigurationError, DimensionError

log = logging.getLogger(__name__)

GAMMA_EPS = 1e-12
MASK_LOGIT = -1e30


class TrainingError(RuntimeError):
    """Training could not proceed or diverged."""


@dataclass(frozen=True)
class ContrastiveConfig:
    d: float = 2.0
    tau: float = 0.1
    n_negatives: int = 16
    max_positives: int = 8
    batch_size: int = 128
    hidden: int = 256
    lr: float = 1e-4
    weight_decay: float = 0.01

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigurationError("tau must be > 0")
        if not self.d > 0:
            raise ConfigurationError("d must be > 0")
        if self.n_negatives < 1 or self.max_positives < 1 or self.batch_size < 1:
            raise ConfigurationError("n_negatives, max_positives and batch_size must be >= 1")


@dataclass(frozen=True)
class ContrastiveBatch:
    anchor: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]

    def __post_init__(self):
        if not self.positives:
            raise ValueError("a contrastive batch needs at least one positive")
        pos, neg = set(self.positives), set(self.negatives)
        if pos & neg or self.anchor in pos | neg:
            raise ValueError("anchor, positives and negatives must be disjoint")


def clnet_arch(config: SystemConfig, hidden: int = 256) -> ConvNetArch:
    """Four conv layers (ker 4,2,2,2 / str 2,1,1,1 / pad 1,1,1,0 / ch 8,16,16,32) and two dense layers."""
    return ConvNetArch(
        in_len=2 * config.measurement_len,
        convs=conv_specs([4, 2, 2, 2], [2, 1, 1, 1], [1, 1, 1, 0], [8, 16, 16, 32]),
        dense=(hidden, config.feature_dim),
        prefix="clnet",
    )


def measurement_scale(y_real: np.ndarray) -> np.ndarray:
    """Per-sample gain c with ||c * y||^2 = len(y); 1 for all-zero rows."""
    y_real = np.atleast_2d(y_real)
    norms = np.linalg.norm(y_real, axis=1)
    return np.where(norms > 0, np.sqrt(y_real.shape[1]) / np.where(norms > 0, norms, 1.0), 1.0)


def normalize_rows(x: Tensor) -> Tensor:
    return x * (x.square().sum(axis=1, keepdims=True)).sqrt().reciprocal()


def feature_map(arch: ConvNetArch, params: ModelParams, y_real) -> Tensor:
    """Differentiable f_theta on raw real measurements (B, 2M) -> unit-norm features (B, m)."""
    y = np.atleast_2d(np.asarray(y_real, dtype=float))
    if y.shape[1] != arch.in_len:
        raise DimensionError(f"measurement length {y.shape[1]} != CLNet input {arch.in_len}")
    scaled = y * measurement_scale(y)[:, None]
    return normalize_rows(forward(arch, params, scaled))


def extract_features(arch: ConvNetArch, params: ModelParams, y_real, chunk: int = 1024) -> np.ndarray:
    """Features for one vector (returns (m,)) or a batch (returns (B, m))."""
    y = np.asarray(y_real, dtype=float)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    frozen = params.frozen()
    out = np.concatenate([feature_map(arch, frozen, y[i : i + chunk]).data for i in range(0, len(y), chunk)])
    return out[0] if single else out


# -- positives / negatives -------------------------------------------------------

def neighbor_table(positions: np.ndarray, d: float, cap: int | None) -> list[np.ndarray]:
    """For each point, indices within distance d (excluding itself), nearest first, capped."""
    tree = cKDTree(positions)
    table = []
    for i, nb in enumerate(tree.query_ball_point(positions, r=d)):
        nb = np.array([j for j in nb if j != i], dtype=np.intp)
        if nb.size:
            dist = np.linalg.norm(positions[nb] - positions[i], axis=1)
            # ties broken by index for determinism
            nb = nb[np.lexsort((nb, dist))]
            if cap is not None:
                nb = nb[:cap]
        table.append(nb)
    return table


def sample_positives_negatives(positions: np.ndarray, anchor: int, config: ContrastiveConfig,
                               rng: np.random.Generator, neighbors: np.ndarray | None = None
                               ) -> ContrastiveBatch | None:
    """Positives: the d-ball around the anchor (nearest ``max_positives``); negatives: uniform from outside.

    Returns None when the anchor has no positive (the caller skips it).
    """
    positions = np.asarray(positions, dtype=float)
    if len(positions) < 2:
        raise ConfigurationError("contrastive sampling needs at least two samples")
    dist = np.linalg.norm(positions - positions[anchor], axis=1)
    if neighbors is None:
        inside = np.flatnonzero(dist <= config.d)
        inside = inside[inside != anchor]
        inside = inside[np.lexsort((inside, dist[inside]))][: config.max_positives]
    else:
        inside = neighbors
    if inside.size == 0:
        return None
    far = np.flatnonzero(dist > config.d)
    if far.size == 0:
        raise ConfigurationError(f"anchor {anchor}: no sample farther than d={config.d}")
    k = min(config.n_negatives, far.size)
    neg = rng.choice(far, size=k, replace=False)
    return ContrastiveBatch(int(anchor), tuple(int(a) for a in inside), tuple(int(b) for b in neg))


# -- similarities and losses -------------------------------------------------------

def pair_similarity(r_i, r_j, tau: float) -> float:
    """s = exp(<r_i, r_j> / tau)."""
    return float(np.exp(np.dot(np.asarray(r_i, float), np.asarray(r_j, float)) / tau))


def csi_similarity(r_i, r_j) -> float:
    """gamma = 1 / max(||r_i - r_j||, 1e-12)."""
    diff = np.asarray(r_i, float) - np.asarray(r_j, float)
    return 1.0 / max(float(np.linalg.norm(diff)), GAMMA_EPS)


def csi_similarity_matrix(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, float)
    sq = np.sum(R * R, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * R @ R.T, 0.0)
    # direct differences are exact where the Gram trick would cancel
    dist = np.sqrt(d2)
    small = dist < 1e-6
    if small.any():
        ii, jj = np.nonzero(small)
        dist[ii, jj] = np.linalg.norm(R[ii] - R[jj], axis=1)
    return 1.0 / np.maximum(dist, GAMMA_EPS)


def _batch_tables(batches: list[ContrastiveBatch]):
    n_pos = max(len(b.positives) for b in batches)
    n_neg = max(len(b.negatives) for b in batches)
    width = n_pos + n_neg
    idx = np.zeros((len(batches), width), dtype=np.intp)
    valid = np.zeros((len(batches), width), dtype=bool)
    pos_mask = np.zeros((len(batches), width))
    for row, b in enumerate(batches):
        idx[row, : len(b.positives)] = b.positives
        valid[row, : len(b.positives)] = True
        pos_mask[row, : len(b.positives)] = 1.0
        idx[row, n_pos : n_pos + len(b.negatives)] = b.negatives
        valid[row, n_pos : n_pos + len(b.negatives)] = True
        idx[row, ~valid[row]] = b.anchor
    anchors = np.array([b.anchor for b in batches], dtype=np.intp)
    return anchors, idx, valid, pos_mask


def contrastive_loss(features: Tensor, batches: list[ContrastiveBatch], tau: float) -> Tensor:
    """Multi-positive contrastive loss averaged over the anchors in ``batches``.

    ``features`` holds one row per dataset index referenced by the batches. Each
    anchor contributes -sum_a log( s(r_i, r_a) / (sum_a' s(r_i, r_a') + sum_b s(r_i, r_b)) ).
    """
    if not isinstance(features, Tensor):
        features = Tensor(features)
    batches = [b for b in batches if b is not None]
    if not batches:
        raise TrainingError("every anchor was skipped; no contrastive loss to compute")
    anchors, idx, valid, pos_mask = _batch_tables(batches)
    ra = features.take(anchors, axis=0)  # (I, m)
    ro = features.take(idx, axis=0)  # (I, W, m)
    logits = (ro * ra.reshape(ra.shape[0], 1, ra.shape[1])).sum(axis=2) * (1.0 / tau)
    masked = logits + Tensor(np.where(valid, 0.0, MASK_LOGIT))
    lse = logsumexp(masked, axis=1)  # (I,)
    n_pos = pos_mask.sum(axis=1)
    per_anchor = lse * Tensor(n_pos) - (logits * Tensor(pos_mask)).sum(axis=1)
    return per_anchor.mean()


def contrastive_loss_value(features: np.ndarray, batches: list[ContrastiveBatch], tau: float) -> float:
    return float(contrastive_loss(Tensor(features), batches, tau).data)


# -- training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)


def train_clnet(dataset: Dataset, config: ContrastiveConfig, epochs: int, seed: int,
                arch: ConvNetArch | None = None, params: ModelParams | None = None) -> TrainResult:
    """Adam on the contrastive loss over shuffled anchor minibatches."""
    if len(dataset) == 0:
        raise TrainingError("empty contrastive dataset")
    arch = arch or clnet_arch(dataset.config, config.hidden)
    params = params if params is not None else init_params(arch, stream(seed, "init", "clnet"))
    y = dataset.y_real
    positions = dataset.positions
    table = neighbor_table(positions, config.d, config.max_positives)
    usable = np.array([i for i, nb in enumerate(table) if nb.size])
    skipped = [i for i, nb in enumerate(table) if not nb.size]
    if usable.size == 0:
        raise TrainingError(f"no anchor has a neighbor within d={config.d}")
    state = AdamState.for_params(params, lr=config.lr, weight_decay=config.weight_decay)
    result = TrainResult(params, skipped=skipped)
    for epoch in range(epochs):
        rng = stream(seed, "clnet-epoch", epoch)
        order = rng.permutation(usable)
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            batches = [sample_positives_negatives(positions, int(i), config, rng, table[i]) for i in chunk]
            loss_val = _clnet_step(arch, params, state, y, batches, config.tau)
            total += loss_val * len(chunk)
            count += len(chunk)
        epoch_loss = total / count
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"contrastive loss diverged at epoch {epoch}")
        result.losses.append(epoch_loss)
        log.debug("clnet epoch %d loss %.6f", epoch, epoch_loss)
    return result


def _clnet_step(arch, params, state, y, batches, tau) -> float:
    used = sorted({b.anchor for b in batches} | {j for b in batches for j in b.positives + b.negatives})
    remap = {j: k for k, j in enumerate(used)}
    local = [ContrastiveBatch(remap[b.anchor], tuple(remap[a] for a in b.positives),
                              tuple(remap[n] for n in b.negatives)) for b in batches]
    params.zero_grad()
    feats = feature_map(arch, params, y[used])
    loss = contrastive_loss(feats, local, tau)
    loss.backward()
    adam_step(params, params.grads(), state)
    return float(loss.data)


# -- similarity-versus-distance study ------------------------------------------------

DEFAULT_BINS = (0.0, 2.0, 5.0, 10.0, 20.0, 40.0, 70.0, 150.0)


def sample_pairs_by_distance(positions: np.ndarray, bins, per_bin: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``per_bin`` distinct pairs (i < j) whose distance falls in each bin."""
    positions = np.asarray(positions, float)
    n = len(positions)
    tree = cKDTree(positions)
    chosen = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        found: set[tuple[int, int]] = set()
        # near bins: enumerate all pairs below hi; far bins: rejection-sample random pairs
        if hi <= 10.0:
            cand = np.array(sorted(tree.query_pairs(r=hi)), dtype=np.intp).reshape(-1, 2)
            if cand.size:
                d = np.linalg.norm(positions[cand[:, 0]] - positions[cand[:, 1]], axis=1)
                cand = cand[(d >= lo) & (d < hi)]
                if len(cand) > per_bin:
                    cand = cand[np.sort(rng.choice(len(cand), per_bin, replace=False))]
                found = {tuple(map(int, c)) for c in cand}
        else:
            attempts = 0
            while len(found) < per_bin and attempts < 200 * per_bin:
                attempts += 1
                i, j = rng.choice(n, size=2, replace=False)
                i, j = (int(i), int(j)) if i < j else (int(j), int(i))
                d = float(np.linalg.norm(positions[i] - positions[j]))
                if lo <= d < hi:
                    found.add((i, j))
        chosen.extend(sorted(found))
    return np.array(chosen, dtype=np.intp).reshape(-1, 2)


def standardize(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, float)
    sd = values.std()
    if not sd > 0:
        return np.zeros_like(values)
    return (values - values.mean()) / sd


def similarity_curve(vectors: np.ndarray, positions: np.ndarray, pairs: np.ndarray, bins) -> list[float | None]:
    """Mean z-scored gamma per distance bin over ``pairs``; ``None`` marks an empty bin.

    ``vectors`` are CLNet features (feature mode) or raw real measurements (raw mode).
    """
    vectors = np.asarray(vectors, float)
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    diff = vectors[pairs[:, 0]] - vectors[pairs[:, 1]]
    gamma = 1.0 / np.maximum(np.linalg.norm(diff, axis=1), GAMMA_EPS)
    z = standardize(gamma)
    dist = np.linalg.norm(positions[pairs[:, 0]] - positions[pairs[:, 1]], axis=1)
    out: list[float | None] = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        sel = (dist >= lo) & (dist < hi)
        out.append(float(z[sel].mean()) if sel.any() else None)
    return out
