"""Test-phase adaptive multi-user estimation: group users by feature similarity, dispatch to DSNets."""

from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .channel_sim import nu_inv
from .clnet import extract_features
from .dnet import DispatchError, FeatureScaler, dsnet_apply, greedy_groups, group_min_similarity, label_scale
from .numerics import ConvNetArch, ModelParams


@dataclass
class UserGrouping:
    groups: list[np.ndarray]
    min_similarity: list[float]

    def sizes(self) -> list[int]:
        return [len(g) for g in self.groups]

    def is_partition(self, k: int, q_max: int) -> bool:
        members = np.concatenate(self.groups) if self.groups else np.zeros(0, dtype=int)
        return (sorted(members.tolist()) == list(range(k))
                and all(1 <= len(g) <= q_max for g in self.groups))


@dataclass
class EstimationReport:
    estimates: np.ndarray  # (K, M) complex, input order
    grouping: UserGrouping | None = None
    nmse: np.ndarray | None = None  # per-user normalized squared error
    method: str = "proposed"
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "user", "group", "group_size", "nmse", "nmse_db"])
        group_of = {}
        if self.grouping is not None:
            for gi, g in enumerate(self.grouping.groups):
                for u in g:
                    group_of[int(u)] = (gi, len(g))
        for k in range(len(self.estimates)):
            gi, gs = group_of.get(k, (k, 1))
            e = "" if self.nmse is None else repr(float(self.nmse[k]))
            edb = "" if self.nmse is None else repr(float(10 * np.log10(self.nmse[k]))) if self.nmse[k] > 0 else "-inf"
            w.writerow([self.method, k, gi, gs, e, edb])
        return buf.getvalue()


def group_users(features: np.ndarray, q_max: int, floor: float = 0.0, largest_first: bool = True) -> UserGrouping:
    """Greedy label-free grouping into parts of size <= ``q_max``.

    ``largest_first`` builds size-``q_max`` groups first; otherwise pairs are formed
    first and only grown when that keeps every group at or above ``floor``.
    """
    features = np.atleast_2d(np.asarray(features, float))
    q = q_max if largest_first else min(2, q_max)
    groups = greedy_groups(features, q, floor)
    mins = [group_min_similarity(features, g) for g in groups]
    return UserGrouping(groups, mins)


@dataclass
class AdaptiveModel:
    """Trained CLNet, feature standardizer, one DSNet per group size and the grouping floor."""

    clnet_arch: ConvNetArch
    clnet: ModelParams
    dsnet_archs: dict[int, ConvNetArch]
    dsnets: dict[int, ModelParams]
    floor: float = 0.0
    scaler: FeatureScaler | None = None

    @property
    def q_max(self) -> int:
        return max(self.dsnets)


def estimate_multi_user(model: AdaptiveModel, y_real: np.ndarray, h_true: np.ndarray | None = None,
                        floor: float | None = None) -> EstimationReport:
    """Estimate the channels of K users from their real-vectorized measurements (K, 2M')."""
    t0 = time.perf_counter()
    y_real = np.atleast_2d(np.asarray(y_real, float))
    feats = extract_features(model.clnet_arch, model.clnet, y_real)
    grouping = group_users(feats, model.q_max, model.floor if floor is None else floor)
    inputs = feats if model.scaler is None else model.scaler(feats)
    M = model.dsnet_archs[model.q_max].dense[-1] // (2 * model.q_max)
    scale = label_scale(y_real, M)
    est = np.zeros((len(y_real), M), complex)
    for g in grouping.groups:
        q = len(g)
        if q not in model.dsnets:
            raise DispatchError(f"no DSNet for group size {q}")
        out = dsnet_apply(model.dsnet_archs[q], model.dsnets[q].frozen(), inputs[g][None, :, :]).data[0]
        for row, user in enumerate(g):
            est[user] = nu_inv(out[row]) / scale[user]
    report = EstimationReport(est, grouping, seconds=time.perf_counter() - t0)
    if h_true is not None:
        report.nmse = per_user_nmse(h_true, est)
    return report


def per_user_nmse(h_true, h_est) -> np.ndarray:
    h_true = np.atleast_2d(np.asarray(h_true))
    h_est = np.atleast_2d(np.asarray(h_est))
    if h_true.shape != h_est.shape:
        raise ValueError(f"shape mismatch {h_true.shape} vs {h_est.shape}")
    num = np.sum(np.abs(h_true - h_est) ** 2, axis=1)
    den = np.sum(np.abs(h_true) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def nmse(h_true, h_est) -> tuple[float, float]:
    """Mean of ||h - h_est||^2 / ||h||^2 over samples, linear and in dB.

    Samples whose true channel is zero are dropped with a warning.
    """
    per = per_user_nmse(h_true, h_est)
    bad = np.isnan(per)
    if bad.any():
        warnings.warn(f"nmse: {int(bad.sum())} zero-norm reference channels excluded", RuntimeWarning)
    per = per[~bad]
    if per.size == 0:
        raise ValueError("nmse: no sample with a nonzero reference channel")
    lin = float(per.mean())
    return lin, (10.0 * np.log10(lin) if lin > 0 else float("-inf"))
