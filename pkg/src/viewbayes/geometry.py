"""Generative world: point models, Haar rotations, orthographic views, noise.

Views are flat float arrays of length ``2k`` laid out as
``(x_0, y_0, x_1, y_1, ...)`` in model point order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import EmptyInput, LengthMismatch

ORTHO_TOL = 1e-12


@dataclass(frozen=True)
class PointSet3D:
    """An object model: ``k`` labeled 3D feature points."""

    points: np.ndarray
    label: Hashable = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must have shape (k, 3) with k >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("model coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def k(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class NoiseModel:
    sigma: float

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")


@dataclass(frozen=True)
class Priors:
    """Class prior, model prior scale and imaging noise.

    Rotations are always Haar distributed.  ``class_prior`` maps labels to
    probabilities; its iteration order defines the tie-break order used by
    every decision rule.
    """

    class_prior: Mapping[Hashable, float]
    model_tau: float = 1.0
    noise: NoiseModel = field(default_factory=lambda: NoiseModel(0.05))

    def __post_init__(self):
        probs = np.array(list(self.class_prior.values()), dtype=float)
        if probs.size == 0 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("class_prior must be non-negative and sum to 1")
        if not self.model_tau >= 0:
            raise ValueError("model_tau must be >= 0")
        object.__setattr__(self, "class_prior", dict(self.class_prior))

    @classmethod
    def uniform(cls, labels, model_tau=1.0, sigma=0.05):
        labels = list(labels)
        p = 1.0 / len(labels)
        # Equal entries keep ties exact; the sum check tolerates the rounding.
        return cls({label: p for label in labels}, model_tau, NoiseModel(sigma))

    @property
    def labels(self):
        return list(self.class_prior)

    @property
    def sigma(self) -> float:
        return self.noise.sigma


@dataclass(frozen=True)
class IsometryN:
    """``x -> ortho @ x + translation`` on R^n."""

    ortho: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.ortho, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or t.shape != (q.shape[0],):
            raise ValueError("ortho must be n x n and translation length n")
        if np.max(np.abs(q.T @ q - np.eye(q.shape[0]))) > 1e-10:
            raise ValueError("ortho is not orthogonal")
        object.__setattr__(self, "ortho", q)
        object.__setattr__(self, "translation", t)

    @property
    def dim(self) -> int:
        return self.ortho.shape[0]

    @property
    def reflection_flag(self) -> bool:
        return bool(np.linalg.det(self.ortho) < 0)

    def apply(self, points):
        """Map a single point or an ``(m, n)`` array of points."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.ortho.T + self.translation

    def inverse(self) -> "IsometryN":
        return IsometryN(self.ortho.T, -self.ortho.T @ self.translation)

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n), np.zeros(n))


def is_rotation(matrix, tol=ORTHO_TOL) -> bool:
    m = np.asarray(matrix, dtype=float)
    if m.shape != (3, 3):
        return False
    return (np.max(np.abs(m.T @ m - np.eye(3))) <= tol
            and abs(np.linalg.det(m) - 1.0) <= tol)


def sample_rotation(rng: np.random.Generator) -> np.ndarray:
    """Draw one Haar-uniform 3x3 rotation matrix."""
    return sample_rotations(rng, 1)[0]


def sample_rotations(rng: np.random.Generator, count: int) -> np.ndarray:
    """Draw ``count`` i.i.d. Haar rotations, shape ``(count, 3, 3)``.

    Uses normalized Gaussian quaternions; orthogonality error is ~1e-15.
    """
    return Rotation.random(count, random_state=rng).as_matrix()


def rotations_with_axes(axes, angles) -> np.ndarray:
    """Rotations whose third row is ``axes[q]``, spun by ``angles[q]`` about it.

    With axes uniform on the sphere and angles uniform on [0, 2 pi) the
    result is Haar distributed.
    """
    axes = np.asarray(axes, dtype=float)
    axes = axes / np.linalg.norm(axes, axis=1, keepdims=True)
    # Any unit vector orthogonal to the axis, then rotate it in-plane.
    helper = np.where(np.abs(axes[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    u = np.cross(axes, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    w = np.cross(axes, u)
    c, s = np.cos(angles)[:, None], np.sin(angles)[:, None]
    e1 = c * u + s * w
    e2 = np.cross(axes, e1)
    return np.stack([e1, e2, axes], axis=1)


def sample_vmf(rng: np.random.Generator, mean, kappa: float, count: int) -> np.ndarray:
    """Von Mises-Fisher draws on the unit sphere in R^3."""
    mean = np.asarray(mean, dtype=float)
    mean = mean / np.linalg.norm(mean)
    u = rng.random(count)
    cos_t = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    cos_t = np.clip(cos_t, -1.0, 1.0)
    phi = rng.uniform(0.0, 2.0 * np.pi, count)
    frame = rotations_with_axes(mean[None], np.zeros(1))[0]
    sin_t = np.sqrt(1.0 - cos_t * cos_t)
    return (cos_t[:, None] * mean + sin_t[:, None] * np.cos(phi)[:, None] * frame[0]
            + sin_t[:, None] * np.sin(phi)[:, None] * frame[1])


def axis_rotation(axis: str, angle: float) -> np.ndarray:
    return Rotation.from_euler(axis, angle).as_matrix()


def project(model: PointSet3D | np.ndarray, rot: np.ndarray) -> np.ndarray:
    """Orthographic view of ``rot @ model``: x, y of each point, flattened."""
    pts = model.points if isinstance(model, PointSet3D) else np.asarray(model, dtype=float)
    return (pts @ np.asarray(rot)[:2].T).ravel()


def add_noise(view, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    view = np.asarray(view, dtype=float)
    if noise.sigma == 0:
        return view.copy()
    return view + rng.normal(0.0, noise.sigma, size=view.shape)


def sample_model(priors: Priors, k: int, label, rng: np.random.Generator) -> PointSet3D:
    if k < 1:
        raise ValueError("k must be >= 1")
    return PointSet3D(rng.normal(0.0, 1.0, size=(k, 3)) * priors.model_tau, label)


def views_to_points(view) -> np.ndarray:
    """``(2k,)`` view -> ``(k, 2)`` array of image points."""
    view = np.asarray(view, dtype=float)
    if view.ndim != 1 or view.size % 2:
        raise LengthMismatch(f"a view must be a flat array of even length, got {view.shape}")
    return view.reshape(-1, 2)


def procrustes_align(source, target, allow_reflection: bool = True):
    """Best isometry mapping ``source`` points onto ``target`` points.

    Parameters
    ----------
    source, target : (m, n) array_like
        Matched point lists.
    allow_reflection : bool
        If False the orthogonal part is restricted to det = +1.

    Returns
    -------
    iso : IsometryN
        Minimizer of the RMS distance between ``iso.apply(source)`` and
        ``target``.
    residual : float
        That minimal RMS distance.
    """
    a = np.asarray(source, dtype=float)
    b = np.asarray(target, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape != b.shape:
        raise LengthMismatch(f"source {a.shape} and target {b.shape} differ")
    if a.shape[0] == 0:
        raise EmptyInput("procrustes_align needs at least one point")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    a0, b0 = a - ca, b - cb
    u, _, vt = np.linalg.svd(b0.T @ a0)
    if not allow_reflection and np.linalg.det(u @ vt) < 0:
        u[:, -1] = -u[:, -1]
    q = u @ vt
    t = cb - q @ ca
    diff = a @ q.T + t - b
    residual = float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
    return IsometryN(q, t), residual
