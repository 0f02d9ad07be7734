"""Synthetic location-correlated massive-MIMO channels and pilot measurements.

A scene is a fixed set of point scatterers in a rectangular area. The channel
of a user at position p is the single-bounce sum over scatterers

    h(p) = sum_c g_c * exp(-j 2 pi (|s_c - bs| + |s_c - p|) / lam) * (d0 / |s_c - p|) * a(theta_c)

with a(theta)_n = exp(-j pi n sin(theta)) the half-wavelength ULA response at
the base station. theta_c is measured from the array broadside, which points
along +x. Users with several antennas get a receive ULA along x; extra
subcarriers get a delay phase exp(-j 2 pi f_n tau_c).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics.rng import complex_normal, stream
from .numerics.tensor import ConfigurationError, DimensionError
from .storage import load_arrays, save_arrays

SPEED_OF_LIGHT = 299_792_458.0
REFERENCE_DISTANCE = 1.0
# Path loss is clamped below this scatterer-user distance to keep h finite.
MIN_SCATTER_DISTANCE = 0.1


class DomainError(ValueError):
    """A position lies outside the scene area."""


@dataclass(frozen=True)
class SystemConfig:
    n_tx: int = 56
    n_rx: int = 1
    n_sc: int = 1
    pilot_len: int = 24
    wavelength: float = 0.12
    bs_position: tuple[float, float] = (-50.0, 50.0)
    subcarrier_spacing: float = 20e6 / 1024

    def __post_init__(self):
        for name in ("n_tx", "n_rx", "n_sc", "pilot_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"SystemConfig.{name} must be >= 1")
        if not self.wavelength > 0:
            raise ConfigurationError("SystemConfig.wavelength must be > 0")

    @property
    def channel_len(self) -> int:
        """Complex entries of vec(H): N_r * N_t * N_c."""
        return self.n_rx * self.n_tx * self.n_sc

    @property
    def measurement_len(self) -> int:
        """Complex entries of vec(Y): N_r * L * N_c."""
        return self.n_rx * self.pilot_len * self.n_sc

    @property
    def feature_dim(self) -> int:
        return 2 * self.channel_len


@dataclass(frozen=True)
class Scene:
    positions: np.ndarray  # (C, 2) meters
    gains: np.ndarray  # (C,) complex
    area: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    seed: int

    def __post_init__(self):
        if len(self.positions) < 1:
            raise ConfigurationError("a scene needs at least one scatterer")

    def contains(self, p) -> bool:
        x, y = float(p[0]), float(p[1])
        xmin, xmax, ymin, ymax = self.area
        return xmin <= x <= xmax and ymin <= y <= ymax


@dataclass
class ChannelSample:
    position: np.ndarray
    H: np.ndarray  # (N_r, N_t * N_c)


@dataclass
class MeasurementSample:
    position: np.ndarray
    Y: np.ndarray  # (N_r, L * N_c)
    snr_db: float
    y_real: np.ndarray = field(init=False)

    def __post_init__(self):
        self.y_real = nu(vec(self.Y))


@dataclass(frozen=True)
class PilotMatrix:
    S: np.ndarray  # (N_c, N_t, L)
    seed: int


def vec(M: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization of the last two axes."""
    M = np.asarray(M)
    return np.swapaxes(M, -1, -2).reshape(M.shape[:-2] + (-1,))


def unvec(v: np.ndarray, rows: int) -> np.ndarray:
    v = np.asarray(v)
    cols = v.shape[-1] // rows
    return np.swapaxes(v.reshape(v.shape[:-1] + (cols, rows)), -1, -2)


def nu(z) -> np.ndarray:
    """Complex (..., M) -> real (..., 2M): real parts first, then imaginary."""
    z = np.asarray(z, dtype=np.complex128)
    return np.concatenate([z.real, z.imag], axis=-1)


def nu_inv(z_real) -> np.ndarray:
    """Real (..., 2M) -> complex (..., M); inverse of :func:`nu`."""
    z_real = np.asarray(z_real, dtype=np.float64)
    if z_real.shape[-1] % 2:
        raise DimensionError(f"nu_inv needs an even length, got {z_real.shape[-1]}")
    half = z_real.shape[-1] // 2
    return z_real[..., :half] + 1j * z_real[..., half:]


def steering_vector(n: int, sin_theta) -> np.ndarray:
    """Half-wavelength ULA response exp(-j pi k sin(theta)), k = 0..n-1."""
    sin_theta = np.asarray(sin_theta, dtype=float)
    k = np.arange(n)
    return np.exp(-1j * np.pi * np.multiply.outer(sin_theta, k))


def generate_scene(config: SystemConfig, n_scatterers: int, seed: int,
                   area: tuple[float, float, float, float] = (0.0, 100.0, 0.0, 100.0)) -> Scene:
    if n_scatterers < 1:
        raise ConfigurationError(f"n_scatterers must be >= 1, got {n_scatterers}")
    xmin, xmax, ymin, ymax = map(float, area)
    if not (xmax > xmin and ymax > ymin):
        raise ConfigurationError(f"scene area {area} is empty")
    rng = stream(seed, "scene")
    xs = rng.uniform(xmin, xmax, n_scatterers)
    ys = rng.uniform(ymin, ymax, n_scatterers)
    gains = complex_normal(rng, n_scatterers)
    return Scene(np.column_stack([xs, ys]), gains, (xmin, xmax, ymin, ymax), int(seed))


def _departure_sines(scene: Scene, config: SystemConfig) -> np.ndarray:
    d = scene.positions - np.asarray(config.bs_position, dtype=float)
    return d[:, 1] / np.hypot(d[:, 0], d[:, 1])


def channels_at(scene: Scene, config: SystemConfig, positions: np.ndarray) -> np.ndarray:
    """Channel matrices for many positions: (P, N_r, N_t * N_c) complex."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    for p in positions:
        if not scene.contains(p):
            raise DomainError(f"position {tuple(p)} outside scene area {scene.area}")
    bs = np.asarray(config.bs_position, dtype=float)
    d_bs = np.hypot(*(scene.positions - bs).T)  # (C,)
    diff = scene.positions[None, :, :] - positions[:, None, :]  # (P, C, 2)
    d_user = np.hypot(diff[..., 0], diff[..., 1])  # (P, C)
    d_loss = np.maximum(d_user, MIN_SCATTER_DISTANCE)
    path = d_bs[None, :] + d_user
    beta = scene.gains[None, :] * np.exp(-2j * np.pi * path / config.wavelength) * (REFERENCE_DISTANCE / d_loss)
    a_tx = steering_vector(config.n_tx, _departure_sines(scene, config))  # (C, N_t)
    # receive ULA along x; arrival direction is from the scatterer toward the user
    cos_rx = np.where(d_user > 0, diff[..., 0] / np.where(d_user > 0, d_user, 1.0), 0.0)
    a_rx = steering_vector(config.n_rx, cos_rx)  # (P, C, N_r)
    blocks = []
    for n in range(config.n_sc):
        freq_phase = np.exp(-2j * np.pi * n * config.subcarrier_spacing * path / SPEED_OF_LIGHT)
        coef = beta * freq_phase  # (P, C)
        blocks.append(np.einsum("pc,pcr,ct->prt", coef, a_rx, a_tx))
    return np.concatenate(blocks, axis=2)


def channel_at(scene: Scene, config: SystemConfig, p) -> ChannelSample:
    p = np.asarray(p, dtype=float)
    return ChannelSample(p.copy(), channels_at(scene, config, p[None, :])[0])


def make_pilot(config: SystemConfig, seed: int) -> PilotMatrix:
    """i.i.d. real standard-normal pilot, one N_t x L block per subcarrier."""
    rng = stream(seed, "pilot")
    S = rng.standard_normal((config.n_sc, config.n_tx, config.pilot_len)).astype(np.complex128)
    return PilotMatrix(S, int(seed))


def apply_pilot(H: np.ndarray, pilot: PilotMatrix) -> np.ndarray:
    """Noise-free received signal H S for (..., N_r, N_t N_c) channels."""
    n_sc, n_tx, L = pilot.S.shape
    H = np.asarray(H)
    if H.shape[-1] != n_tx * n_sc:
        raise DimensionError(f"channel has {H.shape[-1]} columns, pilot expects {n_tx * n_sc}")
    blocks = [H[..., n * n_tx : (n + 1) * n_tx] @ pilot.S[n] for n in range(n_sc)]
    return np.concatenate(blocks, axis=-1)


def noise_variance(clean: np.ndarray, snr_db: float) -> float:
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    power = float(np.sum(np.abs(clean) ** 2))
    return power / (clean.size * 10.0 ** (snr_db / 10.0))


def measure(sample: ChannelSample, pilot: PilotMatrix, snr_db: float,
            rng: np.random.Generator | None = None) -> MeasurementSample:
    """Y = H S + N with per-sample SNR ``snr_db``; ``inf`` means noiseless."""
    clean = apply_pilot(sample.H, pilot)
    sigma2 = noise_variance(clean, snr_db)
    if sigma2 > 0:
        if rng is None:
            raise ValueError("a noisy measurement needs an rng")
        Y = clean + complex_normal(rng, clean.shape, sigma2)
    else:
        Y = clean.copy()
    return MeasurementSample(sample.position.copy(), Y, float(snr_db))


@dataclass
class Dataset:
    """Measurements (and optionally channels) for a set of user positions."""

    name: str
    positions: np.ndarray  # (n, 2)
    Y: np.ndarray  # (n, N_r, L N_c) complex
    H: np.ndarray | None  # (n, N_r, N_t N_c) complex
    snr_db: float
    config: SystemConfig
    scene_seed: int
    pilot_seed: int
    seed: int

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def y_real(self) -> np.ndarray:
        return nu(vec(self.Y))

    @property
    def h(self) -> np.ndarray:
        if self.H is None:
            raise ValueError(f"dataset {self.name!r} carries no channels")
        return vec(self.H)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.name, self.positions[idx], self.Y[idx], None if self.H is None else self.H[idx],
                       self.snr_db, self.config, self.scene_seed, self.pilot_seed, self.seed)

    def metadata(self) -> dict:
        cfg = asdict(self.config)
        cfg["bs_position"] = list(cfg["bs_position"])
        return {
            "kind": "dataset",
            "name": self.name,
            "count": len(self),
            "has_channels": self.H is not None,
            "snr_db": _encode_float(self.snr_db),
            "system": cfg,
            "scene_seed": self.scene_seed,
            "pilot_seed": self.pilot_seed,
            "seed": self.seed,
            "order": ["positions", "measurements", "channels"],
        }


def _encode_float(x: float):
    return "inf" if math.isinf(x) else x


def save_dataset(stem: str | Path, ds: Dataset):
    arrays = {"positions": ds.positions, "measurements": ds.Y}
    if ds.H is not None:
        arrays["channels"] = ds.H
    return save_arrays(stem, arrays, ds.metadata())


def load_dataset(stem: str | Path) -> Dataset:
    arrays, doc = load_arrays(stem)
    sys = dict(doc["system"])
    sys["bs_position"] = tuple(sys["bs_position"])
    snr = doc["snr_db"]
    return Dataset(
        name=doc["name"],
        positions=arrays["positions"],
        Y=arrays["measurements"],
        H=arrays.get("channels"),
        snr_db=float(snr),
        config=SystemConfig(**sys),
        scene_seed=int(doc["scene_seed"]),
        pilot_seed=int(doc["pilot_seed"]),
        seed=int(doc["seed"]),
    )


def simulate(scene: Scene, config: SystemConfig, pilot: PilotMatrix, positions: np.ndarray, snr_db: float,
             seed: int, label: str) -> tuple[np.ndarray, np.ndarray]:
    """Channels and noisy measurements; sample i draws noise from stream (seed, 'noise', label, i)."""
    H = channels_at(scene, config, positions)
    clean = apply_pilot(H, pilot)
    Y = clean.copy()
    for i in range(len(positions)):
        sigma2 = noise_variance(clean[i], snr_db)
        if sigma2 > 0:
            Y[i] += complex_normal(stream(seed, "noise", label, i), clean[i].shape, sigma2)
    return H, Y


def build_datasets(scene: Scene, config: SystemConfig, sizes: tuple[int, int, int], snr_db: float, seed: int,
                   pilot: PilotMatrix | None = None) -> dict[str, Dataset]:
    """Contrastive (unlabeled), downstream and test sets over disjoint position draws."""
    if any(int(s) < 1 for s in sizes):
        raise ConfigurationError(f"dataset sizes must be >= 1, got {sizes}")
    pilot = pilot or make_pilot(config, seed)
    names = ("contrastive", "downstream", "test")
    total = sum(sizes)
    rng = stream(seed, "positions")
    xmin, xmax, ymin, ymax = scene.area
    pts = np.column_stack([rng.uniform(xmin, xmax, total), rng.uniform(ymin, ymax, total)])
    out = {}
    start = 0
    for name, n in zip(names, sizes):
        pos = pts[start : start + n]
        start += n
        H, Y = simulate(scene, config, pilot, pos, snr_db, seed, name)
        out[name] = Dataset(name, pos, Y, None if name == "contrastive" else H, float(snr_db), config,
                            scene.seed, pilot.seed, int(seed))
    return out


def remeasure(ds: Dataset, scene: Scene, pilot: PilotMatrix, snr_db: float, seed: int) -> Dataset:
    """Same positions and channels observed at a different SNR."""
    H, Y = simulate(scene, ds.config, pilot, ds.positions, snr_db, seed, f"{ds.name}@{snr_db}")
    return Dataset(ds.name, ds.positions.copy(), Y, None if ds.H is None else H, float(snr_db), ds.config,
                   ds.scene_seed, pilot.seed, seed)


def channel_correlation(h1: np.ndarray, h2: np.ndarray) -> float:
    h1 = np.ravel(h1)
    h2 = np.ravel(h2)
    return float(abs(np.vdot(h1, h2)) / (np.linalg.norm(h1) * np.linalg.norm(h2)))
