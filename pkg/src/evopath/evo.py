"""Arithmetic on the evolution-parameter cube [0, 1]^D."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def as_alpha(values, dim: int | None = None) -> np.ndarray:
    """Validate and copy an evolution parameter."""
    alpha = np.array(values, dtype=np.float64).reshape(-1)
    if alpha.size < 1:
        raise ValueError("evolution parameter must have at least one component")
    if dim is not None and alpha.size != dim:
        raise ValueError(f"expected {dim} components, got {alpha.size}")
    if not np.all(np.isfinite(alpha)) or np.any(alpha < 0.0) or np.any(alpha > 1.0):
        raise ValueError(f"evolution parameter outside [0,1]: {alpha}")
    return alpha


@dataclass(frozen=True)
class ParamSpace:
    theta_source: np.ndarray
    theta_target: np.ndarray
    dim_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        src = np.asarray(self.theta_source, dtype=np.float64).reshape(-1)
        tgt = np.asarray(self.theta_target, dtype=np.float64).reshape(-1)
        if src.shape != tgt.shape:
            raise ValueError(f"source/target length mismatch: {src.size} vs {tgt.size}")
        names = tuple(self.dim_names) or tuple(f"dim{i}" for i in range(src.size))
        if len(names) != src.size:
            raise ValueError("dim_names length must equal D")
        if len(set(names)) != len(names):
            raise ValueError("dim_names must be unique")
        object.__setattr__(self, "theta_source", src)
        object.__setattr__(self, "theta_target", tgt)
        object.__setattr__(self, "dim_names", names)

    @property
    def dim(self) -> int:
        return self.theta_source.size


def interpolate(space: ParamSpace, alpha) -> np.ndarray:
    """theta = (1 - alpha) * theta_S + alpha * theta_T, componentwise.

    Accepts a single alpha (D,) or a batch (N, D).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape[-1] != space.dim:
        raise ValueError(f"alpha has {alpha.shape[-1]} components, space has {space.dim}")
    return (1.0 - alpha) * space.theta_source + alpha * space.theta_target


@dataclass(frozen=True)
class SphereSample:
    deltas: np.ndarray  # (n, D)
    radius: float

    def __len__(self):
        return self.deltas.shape[0]


def sample_sphere(rng: np.random.Generator, dim: int, xi: float, n: int) -> SphereSample:
    """n vectors drawn uniformly from the sphere of radius xi in R^dim.

    Normalized standard Gaussian draws, so the law is exactly uniform.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if n < 1:
        raise ValueError("need at least one sample")
    if not xi > 0:
        raise ValueError("radius must be positive")
    g = rng.standard_normal((n, dim))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # a zero Gaussian draw has probability 0; redraw defensively anyway
    while np.any(norms == 0.0):
        bad = norms[:, 0] == 0.0
        g[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
    return SphereSample(g / norms * xi, float(xi))


def clamp_box(alpha_raw) -> np.ndarray:
    return np.minimum(np.maximum(np.asarray(alpha_raw, dtype=np.float64), 0.0), 1.0)


def distance_to_target(alpha) -> float:
    alpha = np.asarray(alpha, dtype=np.float64)
    return float(np.linalg.norm(1.0 - alpha))


def at_target(alpha) -> bool:
    return bool(np.all(np.asarray(alpha) == 1.0))
