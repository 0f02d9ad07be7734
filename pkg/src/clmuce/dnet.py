"""Downstream subnetworks (DSNets) mapping grouped CSI features to channels."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .channel_sim import SystemConfig, nu, nu_inv
from .clnet import TrainingError, csi_similarity_matrix, feature_map, measurement_scale
from .numerics import AdamState, ConvNetArch, ModelParams, Tensor, adam_step, conv_specs, forward, init_params, stream
from .numerics.tensor import ConfigurationError

log = logging.getLogger(__name__)


class DispatchError(ValueError):
    """A group was routed to a DSNet of the wrong size (or none exists)."""


@dataclass(frozen=True)
class JointConfig:
    alpha: float = 0.8
    sim_tau: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if not self.sim_tau > 0:
            raise ConfigurationError("sim_tau must be > 0")


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01


@dataclass
class ClusterGroup:
    members: np.ndarray  # dataset indices, ascending
    R: np.ndarray | None = None  # (m, J) features
    H: np.ndarray | None = None  # (N_r N_t N_c, J) complex labels

    @property
    def size(self) -> int:
        return len(self.members)


def label_scale(y_real: np.ndarray, n_out: int) -> np.ndarray:
    """Per-sample label gain: the measurement gain times sqrt(M/2), giving unit-power channel entries."""
    return measurement_scale(y_real) * np.sqrt(n_out / 2.0)


@dataclass
class FeatureScaler:
    """Fixed per-dimension standardization applied to features before any DSNet."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray, eps: float = 1e-8) -> "FeatureScaler":
        features = np.atleast_2d(np.asarray(features, float))
        return cls(features.mean(axis=0), features.std(axis=0) + eps)

    @classmethod
    def identity(cls, m: int) -> "FeatureScaler":
        return cls(np.zeros(m), np.ones(m))

    def __call__(self, features):
        if isinstance(features, Tensor):
            return (features - Tensor(self.mean)) * Tensor(1.0 / self.std)
        return (np.asarray(features, float) - self.mean) / self.std


def dsnet_arch(q: int, config: SystemConfig, m: int | None = None, prefix: str = "dsnet") -> ConvNetArch:
    """Five conv layers (ker q,2,2,2,2 / str 2,1,1,1,1 / pad 1,1,1,0,0 / ch 8,16,32,64,64) + dense to q*2*M."""
    if q < 1:
        raise ConfigurationError(f"q must be >= 1, got {q}")
    m = config.feature_dim if m is None else m
    return ConvNetArch(
        in_len=q * m,
        convs=conv_specs([q, 2, 2, 2, 2], [2, 1, 1, 1, 1], [1, 1, 1, 0, 0], [8, 16, 32, 64, 64]),
        dense=(q * 2 * config.channel_len,),
        prefix=f"{prefix}{q}",
    )


def group_size_of(arch: ConvNetArch) -> int:
    return arch.convs[0].kernel


def interleave(R) -> Tensor:
    """(B, q, m) member features -> (B, q*m) with element i of every member adjacent."""
    R = R if isinstance(R, Tensor) else Tensor(R)
    B, q, m = R.shape
    return R.transpose(0, 2, 1).reshape(B, q * m)


def dsnet_apply(arch: ConvNetArch, params: ModelParams, R) -> Tensor:
    """Batched DSNet: features (B, q, m) -> real outputs (B, q, 2M)."""
    R = R if isinstance(R, Tensor) else Tensor(R)
    if R.ndim != 3 or R.shape[1] != group_size_of(arch) or R.shape[1] * R.shape[2] != arch.in_len:
        raise DispatchError(f"{arch.prefix} cannot take features of shape {R.shape}")
    out = forward(arch, params, interleave(R))
    return out.reshape(R.shape[0], R.shape[1], -1)


def dsnet_forward(arch: ConvNetArch, params: ModelParams, R: np.ndarray) -> np.ndarray:
    """One group: features (m, q) -> complex channel estimates (M, q)."""
    R = np.asarray(R, dtype=float)
    q = group_size_of(arch)
    if R.ndim != 2 or R.shape[1] != q or R.shape[0] * R.shape[1] != arch.in_len:
        raise DispatchError(f"{arch.prefix} expects an (m, {q}) feature matrix, got {R.shape}")
    out = dsnet_apply(arch, params.frozen(), R.T[None, :, :]).data[0]  # (q, 2M)
    return nu_inv(out).T


# -- losses ----------------------------------------------------------------------

def group_mse(pred: Tensor, target_real: np.ndarray) -> Tensor:
    """Per-group squared Frobenius error; pred/target (B, q, 2M) real images of (M, q) complex."""
    diff = pred - Tensor(target_real)
    return diff.square().sum(axis=2).sum(axis=1)


def mse_loss(arch: ConvNetArch, params: ModelParams, R: np.ndarray, H: np.ndarray) -> Tensor:
    """(1/T) sum_t ||H_t - nu_inv(g(R_t))||_F^2 for features (T, q, m) and labels (T, q, M) complex."""
    pred = dsnet_apply(arch, params, R)
    return group_mse(pred, nu(H)).mean()


def sim_regularizer(features: Tensor, tau: float = 1.0) -> Tensor:
    """L_sim = -sum_{j<i} exp(<r_i, r_j>/tau) for the J member features (J, m) of one group."""
    features = features if isinstance(features, Tensor) else Tensor(features)
    J = features.shape[0]
    if J < 2:
        return Tensor(0.0)
    gram = features @ features.transpose()
    iu = np.triu_indices(J, k=1)
    return -((gram[iu] * (1.0 / tau)).exp().sum())


def batched_sim_regularizer(features: Tensor, tau: float) -> Tensor:
    """L_sim for every group at once: features (B, J, m) -> (B,)."""
    B, J, m = features.shape
    if J < 2:
        return Tensor(np.zeros(B))
    iu, ju = np.triu_indices(J, k=1)
    prods = (features.take(iu, axis=1) * features.take(ju, axis=1)).sum(axis=2)  # (B, pairs)
    return -((prods * (1.0 / tau)).exp().sum(axis=1))


def joint_loss(cl_arch: ConvNetArch, ds_arch: ConvNetArch, params: ModelParams, y_groups: np.ndarray,
               h_groups: np.ndarray, alpha: float, sim_tau: float = 1.0,
               scaler: FeatureScaler | None = None) -> Tensor:
    """(1/T) sum_t (alpha * L_sim(t) + ||H_t - nu_inv(g(f(y_t)))||_F^2).

    ``params`` carries both CLNet and DSNet tensors; ``y_groups`` (T, q, 2M') raw
    real measurements, ``h_groups`` (T, q, M) complex channels (unscaled). L_sim acts on
    the unit-norm CLNet features; the DSNet sees them through ``scaler``.
    """
    T, q, n = y_groups.shape
    flat = y_groups.reshape(T * q, n)
    feats = feature_map(cl_arch, params, flat)
    feats = feats.reshape(T, q, feats.shape[1])
    scale = label_scale(flat, h_groups.shape[2]).reshape(T, q, 1)
    pred = dsnet_apply(ds_arch, params, feats if scaler is None else scaler(feats))
    per_group = group_mse(pred, nu(h_groups) * scale)
    if alpha:
        per_group = per_group + batched_sim_regularizer(feats, sim_tau) * alpha
    return per_group.mean()


# -- clustering ------------------------------------------------------------------

def _grow_groups(gamma: np.ndarray, q: int) -> list[list[int]]:
    n = gamma.shape[0]
    assigned = np.zeros(n, dtype=bool)
    groups: list[list[int]] = []
    if q == 1:
        return [[i] for i in range(n)]
    iu, ju = np.triu_indices(n, k=1)
    vals = gamma[iu, ju]
    order = np.lexsort((ju, iu, -vals))
    ptr = 0
    while (~assigned).sum() >= 2:
        while assigned[iu[order[ptr]]] or assigned[ju[order[ptr]]]:
            ptr += 1
        a, b = int(iu[order[ptr]]), int(ju[order[ptr]])
        group = [a, b]
        assigned[a] = assigned[b] = True
        total = gamma[a].copy() + gamma[b]
        while len(group) < q and not assigned.all():
            score = np.where(assigned, -np.inf, total)
            c = int(np.argmax(score))
            group.append(c)
            assigned[c] = True
            total += gamma[c]
        groups.append(sorted(group))
    groups.extend([[int(i)] for i in np.flatnonzero(~assigned)])
    return groups


def greedy_groups(features: np.ndarray, q: int, floor: float = 0.0) -> list[np.ndarray]:
    """Greedy size-capped agglomeration on gamma; groups under ``floor`` become singletons."""
    if q < 1:
        raise ConfigurationError(f"group size must be >= 1, got {q}")
    features = np.asarray(features, float)
    if len(features) == 0:
        return []
    gamma = csi_similarity_matrix(features)
    out = []
    for g in _grow_groups(gamma, q):
        if len(g) > 1 and _min_pair(gamma, g) < floor:
            out.extend(np.array([i]) for i in g)
        else:
            out.append(np.array(g))
    return out


def _min_pair(gamma: np.ndarray, members) -> float:
    sub = gamma[np.ix_(members, members)]
    iu = np.triu_indices(len(members), k=1)
    return float(sub[iu].min()) if iu[0].size else float("inf")


def group_min_similarity(features: np.ndarray, members) -> float:
    return _min_pair(csi_similarity_matrix(np.asarray(features)[np.asarray(members)]), list(range(len(members))))


def cluster_training_data(features: np.ndarray, h: np.ndarray | None, q: int, floor: float = 0.0
                          ) -> list[ClusterGroup]:
    """Cluster (feature, label) pairs into groups of up to ``q`` similar features."""
    groups = greedy_groups(features, q, floor)
    out = []
    for g in groups:
        out.append(ClusterGroup(g, np.asarray(features)[g].T, None if h is None else np.asarray(h)[g].T))
    return out


def groups_of_size(groups: list[ClusterGroup], q: int) -> np.ndarray:
    sized = [g.members for g in groups if g.size == q]
    return np.array(sized, dtype=np.intp).reshape(-1, q)


# -- training --------------------------------------------------------------------

@dataclass
class DsnetResult:
    q: int
    arch: ConvNetArch
    params: ModelParams
    losses: list[float] = field(default_factory=list)


def train_dsnet(q: int, member_idx: np.ndarray, features: np.ndarray, y_real: np.ndarray, h: np.ndarray,
                config: SystemConfig, schedule: TrainSchedule, seed: int,
                params: ModelParams | None = None, prefix: str = "dsnet") -> DsnetResult:
    """Supervised MSE training of DSNet-q on precomputed (frozen CLNet) features.

    ``member_idx`` (T, q) indexes ``features``/``y_real``/``h``. Features are used as
    given (already standardized); labels are scaled by ``label_scale``.
    """
    member_idx = np.asarray(member_idx, dtype=np.intp).reshape(-1, q)
    if len(member_idx) == 0:
        raise TrainingError(f"no groups of size {q} to train DSNet-{q}")
    m = features.shape[1]
    arch = dsnet_arch(q, config, m, prefix)
    params = params if params is not None else init_params(arch, stream(seed, "init", arch.prefix))
    target = nu(h * label_scale(y_real, h.shape[1])[:, None])  # (N, 2M)
    state = AdamState.for_params(params, lr=schedule.lr, weight_decay=schedule.weight_decay)
    result = DsnetResult(q, arch, params)
    for epoch in range(schedule.epochs):
        order = stream(seed, arch.prefix, "epoch", epoch).permutation(len(member_idx))
        total = 0.0
        for start in range(0, len(order), schedule.batch_size):
            rows = member_idx[order[start : start + schedule.batch_size]]
            params.zero_grad()
            pred = dsnet_apply(arch, params, features[rows])
            loss = group_mse(pred, target[rows]).mean()
            loss.backward()
            adam_step(params, params.grads(), state)
            total += float(loss.data) * len(rows)
        epoch_loss = total / len(member_idx)
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"DSNet-{q} loss diverged at epoch {epoch}")
        result.losses.append(epoch_loss)
        log.debug("dsnet%d epoch %d loss %.6f", q, epoch, epoch_loss)
    return result


@dataclass
class JointResult:
    clnet: ModelParams
    dsnet: ModelParams
    losses: list[float] = field(default_factory=list)


def train_joint(cl_arch: ConvNetArch, clnet_params: ModelParams, ds_arch: ConvNetArch, dsnet_params: ModelParams,
                member_idx: np.ndarray, y_real: np.ndarray, h: np.ndarray, joint: JointConfig,
                schedule: TrainSchedule, seed: int, scaler: FeatureScaler | None = None) -> JointResult:
    """Adam on the joint loss, updating the CLNet and DSNet-Q together (inputs are copied)."""
    member_idx = np.asarray(member_idx, dtype=np.intp)
    if member_idx.ndim != 2 or len(member_idx) == 0:
        raise TrainingError("joint training needs at least one full-size group")
    cl = clnet_params.copy()
    ds = dsnet_params.copy()
    both = ModelParams()
    both.update(cl)
    both.update(ds)
    state = AdamState.for_params(both, lr=schedule.lr, weight_decay=schedule.weight_decay)
    result = JointResult(cl, ds)
    for epoch in range(schedule.epochs):
        order = stream(seed, "joint", "epoch", epoch).permutation(len(member_idx))
        total = 0.0
        for start in range(0, len(order), schedule.batch_size):
            rows = member_idx[order[start : start + schedule.batch_size]]
            both.zero_grad()
            loss = joint_loss(cl_arch, ds_arch, both, y_real[rows], h[rows], joint.alpha, joint.sim_tau,
                              scaler)
            loss.backward()
            adam_step(both, both.grads(), state)
            total += float(loss.data) * len(rows)
        epoch_loss = total / len(member_idx)
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"joint loss diverged at epoch {epoch}")
        result.losses.append(epoch_loss)
    return result
