"""Synthetic datasets, two-sample metrics, and the Gaussian trajectory oracle.

Datasets are standardized to zero mean and unit per-coordinate variance
using constants frozen from a reference draw of 1e5 points with a fixed
internal seed, so the transform is a deterministic property of the dataset
name and parameters. The 1-D Gaussian uses its analytic constants instead,
which keeps it exactly standard normal for the closed-form oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from trajflow.schedule import TimeSchedule, trajectory_covariance

__all__ = [
    "Dataset",
    "make_dataset",
    "energy_distance",
    "mmd_rbf",
    "GaussianTrajectoryOracle",
    "gaussian_trajectory_oracle",
]

REFERENCE_DRAW = 100_000
_REFERENCE_SEED = 7_340_032


@dataclass
class Dataset:
    """A seeded sampler plus standardization constants and optional labels."""

    name: str
    dim: int
    mean: np.ndarray
    std: np.ndarray
    n_classes: int = 0
    params: dict = field(default_factory=dict)

    def raw_sample(self, n: int, rng: np.random.Generator):
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator):
        """Returns (x standardized (n, dim), labels (n,) int or None)."""
        x, y = self.raw_sample(n, rng)
        return (x - self.mean) / self.std, y

    def density(self, x: np.ndarray) -> np.ndarray | None:
        """Density in standardized coordinates, when known in closed form."""
        raw = self._raw_density(np.asarray(x) * self.std + self.mean)
        if raw is None:
            return None
        return raw * np.prod(self.std)

    def _raw_density(self, x_raw: np.ndarray) -> np.ndarray | None:
        return None


class _Gauss1d(Dataset):
    def raw_sample(self, n, rng):
        mu, sigma = self.params["mu"], self.params["sigma"]
        return rng.normal(mu, sigma, size=(n, 1)), None

    def _raw_density(self, x_raw):
        mu, sigma = self.params["mu"], self.params["sigma"]
        z = (x_raw[:, 0] - mu) / sigma
        return np.exp(-0.5 * z * z) / (sigma * np.sqrt(2 * np.pi))


class _GaussMixture2d(Dataset):
    def _centers(self):
        k = self.params["components"]
        radius = self.params["radius"]
        ang = 2 * np.pi * np.arange(k) / k
        return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def raw_sample(self, n, rng):
        centers = self._centers()
        comp_sigma = self.params["comp_sigma"]
        labels = rng.integers(0, len(centers), size=n)
        x = centers[labels] + rng.normal(0.0, comp_sigma, size=(n, 2))
        return x, labels

    def _raw_density(self, x_raw):
        centers = self._centers()
        s2 = self.params["comp_sigma"] ** 2
        sq = np.sum((x_raw[:, None, :] - centers[None]) ** 2, axis=2)
        comp = np.exp(-0.5 * sq / s2) / (2 * np.pi * s2)
        return comp.mean(axis=1)


class _TwoMoons(Dataset):
    def raw_sample(self, n, rng):
        noise = self.params["noise"]
        labels = rng.integers(0, 2, size=n)
        theta = rng.uniform(0.0, np.pi, size=n)
        x = np.empty((n, 2))
        top = labels == 0
        x[top, 0] = np.cos(theta[top])
        x[top, 1] = np.sin(theta[top])
        x[~top, 0] = 1.0 - np.cos(theta[~top])
        x[~top, 1] = 0.5 - np.sin(theta[~top])
        return x + rng.normal(0.0, noise, size=(n, 2)), labels

    def arcs(self, points_per_arc: int = 512) -> np.ndarray:
        """Noise-free arcs in standardized coordinates, (2, P, 2)."""
        theta = np.linspace(0.0, np.pi, points_per_arc)
        top = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        bottom = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
        arcs = np.stack([top, bottom], axis=0)
        return (arcs - self.mean) / self.std


class _Checkerboard(Dataset):
    def _black_cells(self):
        cells = [(i, j) for i in range(-2, 2) for j in range(-2, 2)
                 if (i + j) % 2 == 0]
        return np.asarray(cells, dtype=np.float64)

    def raw_sample(self, n, rng):
        cells = self._black_cells()
        pick = rng.integers(0, len(cells), size=n)
        return cells[pick] + rng.uniform(0.0, 1.0, size=(n, 2)), None

    def _raw_density(self, x_raw):
        xi = np.floor(x_raw[:, 0]).astype(np.int64)
        yi = np.floor(x_raw[:, 1]).astype(np.int64)
        inside = (
            (x_raw[:, 0] >= -2) & (x_raw[:, 0] < 2)
            & (x_raw[:, 1] >= -2) & (x_raw[:, 1] < 2)
        )
        black = (xi + yi) % 2 == 0
        return np.where(inside & black, 1.0 / 8.0, 0.0)


class _Rings(Dataset):
    def raw_sample(self, n, rng):
        k = self.params["rings"]
        noise = self.params["noise"]
        labels = rng.integers(0, k, size=n)
        radius = 1.0 + labels.astype(np.float64)
        theta = rng.uniform(0.0, 2 * np.pi, size=n)
        r = radius + rng.normal(0.0, noise, size=n)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1), labels


_BUILDERS = {
    "gauss1d": (_Gauss1d, {"mu": 0.0, "sigma": 1.0}, 0),
    "gauss_mixture_2d": (_GaussMixture2d,
                         {"components": 8, "radius": 2.0, "comp_sigma": 0.3}, 8),
    "two_moons": (_TwoMoons, {"noise": 0.03}, 2),
    "checkerboard": (_Checkerboard, {}, 0),
    "rings": (_Rings, {"rings": 2, "noise": 0.05}, 2),
}


def make_dataset(name: str, params: dict | None = None) -> Dataset:
    """Builds a standardized dataset; unknown names raise ValueError."""
    if name not in _BUILDERS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(_BUILDERS)}")
    cls, defaults, n_classes = _BUILDERS[name]
    merged = dict(defaults)
    for key, value in (params or {}).items():
        if key not in defaults:
            raise ValueError(f"unknown parameter {key!r} for dataset {name!r}")
        merged[key] = type(defaults[key])(value)
    if name == "gauss_mixture_2d":
        n_classes = int(merged["components"])
    if name == "rings":
        n_classes = int(merged["rings"])
    dim = 1 if name == "gauss1d" else 2
    ds = cls(name=name, dim=dim, mean=np.zeros(dim), std=np.ones(dim),
             n_classes=n_classes, params=merged)
    if name == "gauss1d":
        ds.mean = np.array([merged["mu"]])
        ds.std = np.array([merged["sigma"]])
    else:
        ref_rng = np.random.default_rng(_REFERENCE_SEED)
        ref, _ = ds.raw_sample(REFERENCE_DRAW, ref_rng)
        ds.mean = ref.mean(axis=0)
        ds.std = ref.std(axis=0)
    return ds


# -- two-sample metrics ----------------------------------------------------------


def _pairwise_mean_norm(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> float:
    """Mean Euclidean distance over all pairs, chunked along the first set."""
    total = 0.0
    for lo in range(0, len(a), chunk):
        seg = a[lo:lo + chunk]
        d = np.sqrt(np.maximum(
            np.sum(seg**2, axis=1)[:, None]
            + np.sum(b**2, axis=1)[None, :]
            - 2.0 * seg @ b.T,
            0.0,
        ))
        total += float(d.sum())
    return total / (len(a) * len(b))


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Energy statistic 2 E|A-B| - E|A-A'| - E|B-B'| over all pairs.

    All three terms average over every pair including the zero diagonal, so
    two identical arrays give exactly zero.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"incompatible sample shapes {a.shape} and {b.shape}")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("energy distance needs nonempty sample sets")
    cross = _pairwise_mean_norm(a, b)
    within_a = _pairwise_mean_norm(a, a)
    within_b = _pairwise_mean_norm(b, b)
    return 2.0 * cross - within_a - within_b


def mmd_rbf(a: np.ndarray, b: np.ndarray, bandwidth: float | None = None) -> float:
    """Squared-MMD with an RBF kernel; bandwidth defaults to the median heuristic."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("mmd needs nonempty sample sets")

    def sq_dists(u, v):
        return (np.sum(u**2, axis=1)[:, None] + np.sum(v**2, axis=1)[None, :]
                - 2.0 * u @ v.T)

    if bandwidth is None:
        joint = np.concatenate([a, b], axis=0)
        if len(joint) > 2000:
            joint = joint[:: len(joint) // 2000 + 1]
        d2 = sq_dists(joint, joint)
        med = np.median(d2[np.triu_indices_from(d2, k=1)])
        bandwidth = float(np.sqrt(max(med, 1e-12) / 2.0))
    gamma = 1.0 / (2.0 * bandwidth**2)
    k_aa = np.exp(-gamma * np.maximum(sq_dists(a, a), 0.0)).mean()
    k_bb = np.exp(-gamma * np.maximum(sq_dists(b, b), 0.0)).mean()
    k_ab = np.exp(-gamma * np.maximum(sq_dists(a, b), 0.0)).mean()
    return float(k_aa + k_bb - 2.0 * k_ab)


# -- Gaussian trajectory oracle ---------------------------------------------------


class GaussianTrajectoryOracle:
    """Closed-form joint over (x_0, trajectory levels) for 1-D Gaussian data.

    Per coordinate: Cov(x_ti, x_tj) = (1-t_i)(1-t_j) v0 + S_ij with S the
    noise covariance, Cov(x_0, x_t) = (1-t) v0. Everything downstream
    (trajectory NLL, posterior mean of x_0, exact reverse conditionals)
    falls out of standard Gaussian conditioning.
    """

    def __init__(self, schedule: TimeSchedule, mean: float = 0.0, var: float = 1.0):
        self.schedule = schedule
        self.m0 = float(mean)
        self.v0 = float(var)
        if self.v0 <= 0.0:
            raise ValueError("data variance must be positive")
        times = schedule.as_array()
        self.times = times
        one_m = 1.0 - times
        self.level_mean = one_m * self.m0
        self.level_cov = np.outer(one_m, one_m) * self.v0 + trajectory_covariance(times)
        self.x0_level_cov = one_m * self.v0
        # joint over (x_0, levels)
        self.joint_mean = np.concatenate([[self.m0], self.level_mean])
        self.joint_cov = np.block([
            [np.array([[self.v0]]), self.x0_level_cov[None, :]],
            [self.x0_level_cov[:, None], self.level_cov],
        ])
        self._prec = np.linalg.inv(self.level_cov)
        sign, logdet = np.linalg.slogdet(self.level_cov)
        if sign <= 0:
            raise ValueError("level covariance must be positive definite")
        self._level_logdet = logdet

    def nll(self, states: np.ndarray) -> np.ndarray:
        """Exact joint NLL of level states (levels, B) or (levels, B, 1)."""
        x = np.asarray(states, dtype=np.float64)
        if x.ndim == 3:
            if x.shape[2] != 1:
                raise ValueError("oracle is one-dimensional")
            x = x[:, :, 0]
        delta = x - self.level_mean[:, None]
        quad = np.einsum("kb,kj,jb->b", delta, self._prec, delta)
        k = len(self.times)
        return 0.5 * (quad + self._level_logdet + k * np.log(2 * np.pi))

    def conditional_mean(self, states: np.ndarray) -> np.ndarray:
        """E[x_0 | trajectory] per batch element."""
        x = np.asarray(states, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, :, 0]
        delta = x - self.level_mean[:, None]
        return self.m0 + self.x0_level_cov @ self._prec @ delta

    def reverse_conditional(self, k: int) -> tuple[float, float, float]:
        """(slope, intercept, sigma) of the exact p(x_{k-1} | x_k)."""
        if not (1 <= k < len(self.times)):
            raise ValueError(f"step index {k} out of range")
        cov = self.level_cov
        slope = cov[k - 1, k] / cov[k, k]
        intercept = self.level_mean[k - 1] - slope * self.level_mean[k]
        var = cov[k - 1, k - 1] - cov[k - 1, k] ** 2 / cov[k, k]
        return float(slope), float(intercept), float(np.sqrt(var))


def gaussian_trajectory_oracle(dataset, schedule: TimeSchedule) -> GaussianTrajectoryOracle:
    """Oracle for a gauss1d dataset; anything else is rejected.

    Standardized gauss1d data is exactly N(0, 1), so the oracle always uses
    mean 0 and variance 1 in standardized coordinates.
    """
    if isinstance(dataset, Dataset):
        if dataset.name != "gauss1d":
            raise ValueError("closed-form trajectory oracle needs gauss1d data")
        return GaussianTrajectoryOracle(schedule, mean=0.0, var=1.0)
    mean, var = dataset
    return GaussianTrajectoryOracle(schedule, mean=float(mean), var=float(var))
