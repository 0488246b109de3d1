"""Zeroth-order gradient estimation from two function values."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .errors import InputError, NumericError


class DirectionDistribution(str, Enum):
    UNIT_SPHERE = "unit_sphere"
    STANDARD_GAUSSIAN = "standard_gaussian"


UNIT_SPHERE = DirectionDistribution.UNIT_SPHERE
STANDARD_GAUSSIAN = DirectionDistribution.STANDARD_GAUSSIAN


def sample_direction(d: int, dist: DirectionDistribution | str, rng: np.random.Generator) -> np.ndarray:
    """Draw one random direction in R^d.

    Both distributions consume exactly ``d`` standard-normal draws from
    ``rng``; the sphere variant normalizes them.
    """
    if d < 1:
        raise InputError(f"direction dimension must be >= 1, got {d}")
    dist = DirectionDistribution(dist)
    u = rng.standard_normal(d)
    if dist is UNIT_SPHERE:
        norm = np.linalg.norm(u)
        # a zero draw has probability zero; redraw keeps the contract anyway
        while norm == 0.0:
            u = rng.standard_normal(d)
            norm = np.linalg.norm(u)
        u /= norm
    return u


def sample_directions(count: int, d: int, dist: DirectionDistribution | str, rng: np.random.Generator) -> np.ndarray:
    """``count`` directions as rows; same generator draws as ``count`` single calls."""
    if d < 1:
        raise InputError(f"direction dimension must be >= 1, got {d}")
    u = rng.standard_normal((count, d))
    if DirectionDistribution(dist) is UNIT_SPHERE:
        u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u


def phi(d: int, dist: DirectionDistribution | str) -> float:
    """Dimension factor of the two-point estimator."""
    return float(d) if DirectionDistribution(dist) is UNIT_SPHERE else 1.0


@dataclass
class Perturbation:
    """A direction held privately by the party that drew it."""

    u: np.ndarray = field(repr=False)
    mu: float
    sample_id: object = None
    client_id: int | None = None

    def __post_init__(self):
        if not self.mu >= 0:
            raise InputError(f"smoothing radius mu must be non-negative, got {self.mu}")

    def __reduce__(self):
        # directions stay with their owner; refuse pickling so they cannot be shipped by accident
        raise TypeError("Perturbation objects are party-private and cannot be serialized")


def two_point_estimate(
    h_hat: float,
    h: float,
    pert: Perturbation,
    dist: DirectionDistribution | str = UNIT_SPHERE,
) -> np.ndarray:
    """``phi(d) / mu * (h_hat - h) * u``."""
    if not pert.mu > 0:
        raise InputError(f"estimator needs mu > 0, got {pert.mu}")
    if not (np.isfinite(h_hat) and np.isfinite(h)):
        raise NumericError(
            f"non-finite loss pair (h={h}, h_hat={h_hat}) for sample {pert.sample_id}",
            client_id=pert.client_id,
        )
    scale = phi(pert.u.size, dist) / pert.mu * (h_hat - h)
    return scale * pert.u


def two_point_estimates(
    h_hat: np.ndarray,
    h: np.ndarray,
    directions: np.ndarray,
    mu: float,
    dist: DirectionDistribution | str = UNIT_SPHERE,
) -> np.ndarray:
    """Row-wise :func:`two_point_estimate` for many directions at once."""
    if not mu > 0:
        raise InputError(f"estimator needs mu > 0, got {mu}")
    h_hat = np.asarray(h_hat, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    bad = ~(np.isfinite(h_hat) & np.isfinite(h))
    if bad.any():
        raise NumericError(f"non-finite loss pair at row {int(np.argmax(bad))}")
    scale = phi(directions.shape[1], dist) / mu * (h_hat - h)
    return scale[:, None] * directions


def estimate_gradient_direct(
    loss_fn: Callable[[np.ndarray], float],
    w: np.ndarray,
    pert: Perturbation,
    dist: DirectionDistribution | str = UNIT_SPHERE,
) -> np.ndarray:
    """Two-point estimate of ``grad loss_fn(w)`` along ``pert.u``."""
    w = np.asarray(w, dtype=np.float64)
    base = loss_fn(w)
    shifted = loss_fn(w + pert.mu * pert.u)
    return two_point_estimate(shifted, base, pert, dist)
