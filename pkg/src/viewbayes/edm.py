"""Euclidean distance matrices: similarity measurements and reconstruction.

Two independent embedding routes are provided.  ``reconstruct_incremental``
builds coordinates point by point from sphere intersections (multilateration
against an affinely independent frame).  ``reconstruct_spectral`` is classical
double-centering MDS and serves as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateInput, InconsistentDistances, LengthMismatch

RANK_TOL = 1e-9
DIST_TOL = 1e-8
SYMMETRY_TOL = 1e-12


def view_distance(a, b) -> float:
    """Euclidean distance between two views of equal length."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"views have shapes {a.shape} and {b.shape}")
    return float(np.linalg.norm(a - b))


def distance_matrix(points) -> np.ndarray:
    """Pairwise Euclidean distances of the rows of ``points``."""
    p = np.asarray(points, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def check_distance_matrix(d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise LengthMismatch(f"distance matrix must be square, got {d.shape}")
    if not np.all(np.isfinite(d)):
        raise InconsistentDistances("distance matrix has non-finite entries")
    scale = 1.0 + (np.max(d) if d.size else 0.0)
    if np.max(np.abs(d - d.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise InconsistentDistances("distance matrix is not symmetric")
    if np.any(np.diag(d) != 0) or np.any(d < 0):
        raise InconsistentDistances("distance matrix needs a zero diagonal and non-negative entries")
    return d


@dataclass(frozen=True)
class SimilaritySet:
    """Everything a strongly two-dimensional observer may read.

    ``labels[i]`` is the ``(object_label, view_index)`` pair of training view i.
    """

    base_distances: np.ndarray
    target_distances: np.ndarray
    labels: tuple

    def __post_init__(self):
        base = check_distance_matrix(self.base_distances)
        tgt = np.asarray(self.target_distances, dtype=float)
        labels = tuple(tuple(lab) for lab in self.labels)
        if tgt.shape != (base.shape[0],):
            raise LengthMismatch("target_distances length must equal the base size")
        if len(labels) != base.shape[0] or len(set(labels)) != len(labels):
            raise ValueError("labels must name every base row exactly once")
        if np.any(tgt < 0):
            raise ValueError("target distances must be non-negative")
        object.__setattr__(self, "base_distances", base)
        object.__setattr__(self, "target_distances", tgt)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def object_labels(self) -> list:
        return [lab[0] for lab in self.labels]


def similarity_set(target, base: Sequence[tuple[Hashable, int, np.ndarray]]) -> SimilaritySet:
    """Measure a target view against a labeled model base.

    ``base`` is a sequence of ``(object_label, view_index, view)`` triples.
    """
    if len(base) < 1:
        raise ValueError("the model base must contain at least one view")
    target = np.asarray(target, dtype=float)
    views = np.array([np.asarray(v, dtype=float) for _, _, v in base])
    if views.ndim != 2 or views.shape[1] != target.size or target.ndim != 1:
        raise LengthMismatch("all views must have the same length as the target")
    n = len(base)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = view_distance(views[i], views[j])
    tgt = np.array([view_distance(target, v) for v in views])
    return SimilaritySet(d, tgt, tuple((lab, idx) for lab, idx, _ in base))


class SphereIntersection(NamedTuple):
    """Result of intersecting two spheres, the first centered at the origin.

    ``kind`` is one of ``"circle"``, ``"tangent"``, ``"empty"``, ``"coincident"``.
    For ``circle`` and ``tangent`` every intersection point is
    ``lam * b + q`` with ``q`` orthogonal to ``b`` and ``|q| = q_norm``.
    """

    kind: str
    lam: float = float("nan")
    q_norm: float = float("nan")


def sphere_intersect(center_b, r_a: float, r_b: float, tol: float = 1e-12) -> SphereIntersection:
    b = np.atleast_1d(np.asarray(center_b, dtype=float))
    if r_a < 0 or r_b < 0:
        raise ValueError("radii must be non-negative")
    bb = float(b @ b)
    scale = max(r_a * r_a, r_b * r_b, bb, 1.0)
    if bb == 0.0:
        if abs(r_a - r_b) <= tol * np.sqrt(scale):
            return SphereIntersection("coincident")
        return SphereIntersection("empty")
    lam = (r_a * r_a - r_b * r_b + bb) / (2.0 * bb)
    q2 = r_a * r_a - lam * lam * bb
    if q2 < -tol * scale:
        return SphereIntersection("empty")
    if q2 <= tol * scale:
        return SphereIntersection("tangent", lam, 0.0)
    return SphereIntersection("circle", lam, float(np.sqrt(q2)))


@dataclass(frozen=True)
class Embedding:
    """Reconstructed coordinates with an honestly recomputed quality figure."""

    points: np.ndarray
    quality: float
    pivots: tuple = ()
    flags: tuple = field(default=())

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _quality(points, d) -> float:
    if len(points) < 2:
        return 0.0
    return float(np.max(np.abs(distance_matrix(points) - d)))


def _has_duplicates(d) -> bool:
    off = ~np.eye(d.shape[0], dtype=bool)
    return bool(np.any(d[off] == 0))


def _solve_in_frame(frame, frame_sq, d0_sq, dj_sq):
    """Coordinates of a point from its squared distances to a frame.

    ``frame`` is an ``(m, m)`` lower-triangular array of frame points
    ``p_1..p_m`` (with ``p_0`` at the origin).  Subtracting the sphere
    equation around ``p_0`` from the one around ``p_j`` gives the linear
    system ``2 p_j . x = d_0^2 - d_j^2 + |p_j|^2``.
    """
    rhs = d0_sq - dj_sq + frame_sq
    x, *_ = np.linalg.lstsq(2.0 * frame, rhs, rcond=None)
    return x


def reconstruct_incremental(d, n: int | None = None, *, rank_tol=RANK_TOL,
                            dist_tol=DIST_TOL, strict=False) -> Embedding:
    """Embed an EDM in R^n by sphere intersection, one point at a time.

    The first point sits at the origin.  Each further frame point is the
    remaining point farthest from the affine hull of the frame so far; its
    out-of-hull component opens a new axis with positive sign.  Points that
    do not open an axis are located by multilateration against the frame.

    Parameters
    ----------
    d : (N, N) array_like
        Distance matrix.
    n : int or None
        Target dimension.  ``None`` embeds in the affine dimension of the
        data (as found under ``rank_tol``).
    strict : bool
        Reject duplicate points instead of placing them coincident.

    Raises
    ------
    DegenerateInput
        Fewer than ``n + 1`` affinely independent points.
    InconsistentDistances
        ``d`` is not the distance matrix of any point set in R^n.
    """
    d = check_distance_matrix(d)
    npts = d.shape[0]
    if npts == 0:
        raise DegenerateInput("empty distance matrix")
    if strict and _has_duplicates(d):
        raise DegenerateInput("duplicate points rejected in strict mode")
    if n is not None and npts < n + 1:
        raise DegenerateInput(f"{npts} points cannot span R^{n}; need at least {n + 1}")
    dmax = float(np.max(d))
    scale = 1.0 + dmax
    dsq = d * d
    max_dim = npts - 1 if n is None else n

    pivots = [0]
    # Coordinates of every point in the current frame, refreshed as axes open.
    frame = np.zeros((0, 0))
    frame_sq = np.zeros(0)
    heights = dsq[0].copy()
    partial = np.zeros((npts, 0))
    while len(pivots) - 1 < max_dim:
        cand = heights.copy()
        cand[pivots] = -np.inf
        nxt = int(np.argmax(cand))
        h2 = cand[nxt]
        # Heights come from differences of squared distances, so the rank
        # test is made on the squared scale, like an eigenvalue ratio.
        if h2 <= rank_tol * dmax * dmax or dmax == 0.0:
            break
        m = len(pivots) - 1
        h = np.sqrt(h2)
        new_pt = np.append(partial[nxt], h)
        frame = np.pad(frame, ((0, 1), (0, 1)))
        frame[m] = new_pt
        frame_sq = np.append(frame_sq, new_pt @ new_pt)
        pivots.append(nxt)
        # Each point's coordinate on the new axis follows from the new pivot's sphere.
        new_axis = (dsq[0] - dsq[nxt] + frame_sq[m] - 2.0 * partial @ new_pt[:m]) / (2.0 * h)
        partial = np.column_stack([partial, new_axis])
        partial[nxt] = new_pt
        partial[0] = 0.0
        heights = dsq[0] - np.sum(partial * partial, axis=1)

    dim_found = len(pivots) - 1
    if n is not None and dim_found < n:
        # A negative squared height means no Euclidean point fits at all.
        if np.min(heights) < -dist_tol * scale * scale:
            raise InconsistentDistances("distances violate the Euclidean embedding conditions")
        raise DegenerateInput(
            f"no affinely independent subset of {n + 1} points (affine rank {dim_found})")
    out_dim = dim_found if n is None else n
    coords = np.zeros((npts, out_dim))
    for idx in range(npts):
        if idx in pivots:
            coords[idx, :dim_found] = partial[idx, :dim_found]
        elif dim_found:
            coords[idx, :dim_found] = _solve_in_frame(frame, frame_sq, dsq[0, idx],
                                                      dsq[pivots[1:], idx])
    quality = _quality(coords, d)
    if quality > dist_tol * scale:
        raise InconsistentDistances(f"distance residual {quality:.3g} exceeds tolerance")
    flags = ()
    if _has_duplicates(d):
        flags = ("duplicates",)
    return Embedding(coords, quality, tuple(pivots), flags)


def reconstruct_spectral(d, n: int, *, rank_tol=RANK_TOL, dist_tol=DIST_TOL) -> Embedding:
    """Classical MDS: top ``n`` eigenpairs of the double-centered Gram matrix."""
    d = check_distance_matrix(d)
    npts = d.shape[0]
    if npts < n + 1:
        raise DegenerateInput(f"{npts} points cannot span R^{n}")
    j = np.eye(npts) - np.full((npts, npts), 1.0 / npts)
    gram = -0.5 * j @ (d * d) @ j
    gram = 0.5 * (gram + gram.T)
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = evals[0] if evals[0] > 0 else 0.0
    if evals[-1] < -rank_tol * max(top, np.max(d) ** 2):
        raise InconsistentDistances("Gram matrix has a negative eigenvalue")
    if top == 0.0 or evals[n - 1] <= rank_tol * top:
        raise DegenerateInput("configuration spans fewer than n dimensions")
    if npts > n + 1 and evals[n] > rank_tol * top:
        raise InconsistentDistances("Gram matrix has rank above n")
    coords = evecs[:, :n] * np.sqrt(evals[:n])
    quality = _quality(coords, d)
    if quality > dist_tol * (1.0 + np.max(d)):
        raise InconsistentDistances(f"distance residual {quality:.3g} exceeds tolerance")
    return Embedding(coords, quality)


def gram_spectrum(d) -> np.ndarray:
    """Eigenvalues of the double-centered Gram matrix, descending."""
    d = check_distance_matrix(d)
    npts = d.shape[0]
    j = np.eye(npts) - np.full((npts, npts), 1.0 / npts)
    gram = -0.5 * j @ (d * d) @ j
    return np.sort(np.linalg.eigvalsh(0.5 * (gram + gram.T)))[::-1]


def embed_target(base: Embedding | np.ndarray, target_distances, *, rank_tol=RANK_TOL,
                 dist_tol=DIST_TOL) -> np.ndarray:
    """Locate one more point from its distances to already embedded points.

    Subtracting the mean sphere equation from each ``|x - p_j|^2 = d_j^2``
    leaves the linear system ``2 (p_j - pbar) . x = c_j``, which has a unique
    solution when the base affinely spans R^n.
    """
    pts = base.points if isinstance(base, Embedding) else np.asarray(base, dtype=float)
    dist = np.asarray(target_distances, dtype=float)
    if dist.shape != (pts.shape[0],):
        raise LengthMismatch("one target distance per base point is required")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if pts.shape[0] < pts.shape[1] + 1 or sv[-1] <= rank_tol * max(sv[0], 1e-300):
        raise DegenerateInput("base points do not affinely span the embedding space")
    sq = np.sum(pts * pts, axis=1)
    dsq = dist * dist
    rhs = (sq - sq.mean()) - (dsq - dsq.mean())
    x, *_ = np.linalg.lstsq(2.0 * centered, rhs, rcond=None)
    resid = np.max(np.abs(np.linalg.norm(pts - x, axis=1) - dist))
    if resid > dist_tol * (1.0 + np.max(dist, initial=0.0)):
        raise InconsistentDistances(f"target distance residual {resid:.3g} exceeds tolerance")
    return x
