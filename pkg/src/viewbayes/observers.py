"""Recognition observers.

``observer_3d`` reads view coordinates directly.  ``observer_strongly_2d``,
``observer_nn`` and ``score_kernel`` only read a :class:`SimilaritySet`
(plus, for the strongly 2D observer, a few anchor views used to pin down
the global isometry).  ``observer_mu`` reads interleaved similarity codes.

Bayesian observers share one path: for each class, a weighted model
posterior is drawn from that class's training views with the substream
``(seed, stream_label, "acquire", label)`` and the target is scored with
``(seed, stream_label, "predict", trial, label)``.  Equal inputs therefore
give equal random draws in every observer.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np
from scipy import linalg

from . import bayes, edm
from .codec import FixedPointCodec, mu_split
from .errors import AnchorMismatch, DegenerateInput, LengthMismatch, SingularSystem
from .geometry import PointSet3D, Priors, procrustes_align
from .streams import derive_stream, stream_fingerprint

ANCHOR_TOL = 1e-6


# Shared Bayesian path -----------------------------------------------------

class PosteriorCache:
    """Thread-safe memo of acquired model posteriors.

    Keys include the exact bytes of the training views, so observers whose
    restored views differ in the last bit get their own entries.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._locks: dict = {}
        self._store: dict = {}

    def get(self, key, compute):
        with self._lock:
            if key in self._store:
                return self._store[key]
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            with self._lock:
                if key in self._store:
                    return self._store[key]
            value = compute()
            with self._lock:
                self._store[key] = value
            return value

    def __len__(self):
        return len(self._store)


def _group(base) -> "OrderedDict[Hashable, np.ndarray]":
    """``[(label, index, view), ...]`` -> label -> stacked views in index order."""
    groups: OrderedDict = OrderedDict()
    for label, idx, view in base:
        groups.setdefault(label, []).append((idx, np.asarray(view, dtype=float)))
    return OrderedDict((lab, np.array([v for _, v in sorted(items, key=lambda p: p[0])]))
                       for lab, items in groups.items())


def _posterior(training, label, k, priors, mc, seed, cache):
    def compute():
        rng = derive_stream(seed, mc.stream_label, "acquire", label)
        return bayes.acquire_posterior(training, priors, mc, rng, k=k)
    if cache is None:
        return compute()
    key = ("posterior", seed, mc, priors.model_tau, priors.sigma, label,
           training.shape, training.tobytes())
    return cache.get(key, compute)


def _bayes_decision(v, training_by_label, priors: Priors, mc, seed, trial, cache, flags=()):
    v = np.asarray(v, dtype=float)
    k = v.size // 2
    per_class = {}
    audit = {}
    for label in priors.labels:
        training = training_by_label.get(label, np.empty((0, v.size)))
        post = _posterior(training, label, k, priors, mc, seed, cache)
        rng = derive_stream(seed, mc.stream_label, "predict", trial, label)
        per_class[label] = bayes.predictive_likelihood(v, post, priors, mc, rng)
        audit[label] = stream_fingerprint(rng)
    dec = bayes.decide(per_class, priors)
    extra = sorted({f for est in per_class.values() for f in est.flags})
    return bayes.Decision(dec.chosen, dec.log_posteriors, dec.margin,
                          tuple(dict.fromkeys(dec.flags + tuple(flags) + tuple(extra))),
                          {"bayes_optimal": "degraded" not in flags, "streams": audit})


def observer_3d(v, base, priors: Priors, mc: bayes.MonteCarloParams, seed: int, trial=0,
                cache: PosteriorCache | None = None) -> bayes.Decision:
    """Bayes decision from the target and training view coordinates.

    ``base`` is a list of ``(label, view_index, view)`` triples.
    """
    return _bayes_decision(v, _group(base), priors, mc, seed, trial, cache)


def observer_map(v, base, priors: Priors, mc: bayes.MonteCarloParams, seed: int, trial=0,
                 cache: PosteriorCache | None = None) -> bayes.Decision:
    """Plug-in decision: each class is represented by its MAP model only."""
    v = np.asarray(v, dtype=float)
    groups = _group(base)
    per_class = {}
    for label in priors.labels:
        training = groups.get(label, np.empty((0, v.size)))

        # The MAP model is a by-product of posterior acquisition; sharing
        # the cache entry keeps this observer on the 3D observer's draws.
        post = _posterior(training, label, v.size // 2, priors, mc, seed, cache)
        model = post.map_model
        if model is None:
            if training.shape[0] >= 2:
                rng = derive_stream(seed, mc.stream_label, "map", label)
                model = bayes.map_model_estimate(training, priors, mc.map_iters, rng,
                                                 restarts=mc.map_restarts).model
            else:
                # At most one view: its ridge-shrunk image points at zero depth.
                pts = np.zeros((v.size // 2, 3))
                if training.shape[0] == 1 and priors.model_tau > 0:
                    shrink = 1.0 + priors.sigma ** 2 / priors.model_tau ** 2
                    pts[:, :2] = training[0].reshape(-1, 2) / shrink
                model = PointSet3D(pts, label)
        rng = derive_stream(seed, mc.stream_label, "predict", trial, label)
        per_class[label] = bayes.likelihood_known_model(v, model, priors, mc, rng)
    return bayes.decide(per_class, priors)


# Strongly two-dimensional observer ----------------------------------------

@dataclass(frozen=True)
class AnchorInfo:
    """Known coordinates of a few base views, used only to fix the isometry."""

    anchor_indices: tuple
    anchor_coords: np.ndarray
    degraded: bool = False

    def __post_init__(self):
        coords = np.array(self.anchor_coords, dtype=float)
        idx = tuple(int(i) for i in self.anchor_indices)
        if coords.ndim != 2 or coords.shape[0] != len(idx) or coords.shape[1] % 2:
            raise LengthMismatch("anchor_coords must be (len(anchor_indices), 2k)")
        if len(set(idx)) != len(idx):
            raise ValueError("anchor indices must be distinct")
        coords.setflags(write=False)
        object.__setattr__(self, "anchor_indices", idx)
        object.__setattr__(self, "anchor_coords", coords)

    @property
    def dim(self) -> int:
        return self.anchor_coords.shape[1]


def make_anchors(base, k: int) -> AnchorInfo:
    """Anchors from the first ``2k + 1`` base views (all of them if fewer)."""
    n = min(2 * k + 1, len(base))
    coords = np.array([np.asarray(view, dtype=float) for _, _, view in base[:n]])
    degraded = len(base) < 2 * k + 1
    if not degraded:
        centred = coords - coords.mean(axis=0)
        sv = np.linalg.svd(centred, compute_uv=False)
        if sv[-1] <= edm.RANK_TOL * max(sv[0], 1.0):
            raise DegenerateInput("anchor views do not affinely span the view space")
    return AnchorInfo(tuple(range(n)), coords, degraded)


def restore_views(s: edm.SimilaritySet, anchors: AnchorInfo):
    """Rebuild base and target views from similarities and anchors.

    Returns ``(base_views, target_view, flags, residual)`` where base_views
    is ``(N, 2k)`` in the row order of ``s``.
    """
    dim = anchors.dim
    n_base = s.size
    if max(anchors.anchor_indices, default=-1) >= n_base:
        raise LengthMismatch("anchor index beyond the similarity set")
    flags = ()
    if n_base >= dim + 1 and not anchors.degraded:
        emb = edm.reconstruct_incremental(s.base_distances, dim)
        points = emb.points
        target = edm.embed_target(emb, s.target_distances)
    else:
        # Too few views to span the view space: embed base and target
        # together in whatever dimension they span.  The target's offset
        # from that span is then only known up to its length.
        full = np.zeros((n_base + 1, n_base + 1))
        full[:n_base, :n_base] = s.base_distances
        full[n_base, :n_base] = full[:n_base, n_base] = s.target_distances
        emb = edm.reconstruct_incremental(full, None)
        if emb.dim > dim:
            raise DegenerateInput(f"distances need {emb.dim} dimensions, views have {dim}")
        padded = np.zeros((n_base + 1, dim))
        padded[:, :emb.dim] = emb.points
        points, target = padded[:n_base], padded[n_base]
        flags = ("degraded",)
    anchor_pts = points[list(anchors.anchor_indices)]
    iso, residual = procrustes_align(anchor_pts, anchors.anchor_coords, allow_reflection=True)
    scale = float(np.max(np.abs(anchors.anchor_coords), initial=0.0))
    if residual > ANCHOR_TOL * (1.0 + scale):
        raise AnchorMismatch(f"anchor alignment residual {residual:.3g} exceeds tolerance")
    return iso.apply(points), iso.apply(target), flags, residual


def observer_strongly_2d(s: edm.SimilaritySet, anchors: AnchorInfo, priors: Priors,
                         mc: bayes.MonteCarloParams, seed: int, trial=0,
                         cache: PosteriorCache | None = None) -> bayes.Decision:
    """Bayes decision computed from similarities alone.

    The base and target are reconstructed up to an isometry of view space,
    the isometry is fixed by the anchor views, and the restored views go
    through the same likelihood path as :func:`observer_3d`.
    """
    views, target, flags, residual = restore_views(s, anchors)
    base = [(lab, idx, views[row]) for row, (lab, idx) in enumerate(s.labels)]
    dec = _bayes_decision(target, _group(base), priors, mc, seed, trial, cache, flags)
    dec.meta["anchor_residual"] = residual
    return dec


# Baselines ----------------------------------------------------------------

def _ordered_labels(labels):
    return list(dict.fromkeys(labels))


def _decision_from_scores(scores: dict) -> bayes.Decision:
    order = list(scores)
    chosen = order[0]
    for lab in order[1:]:
        if scores[lab] > scores[chosen]:
            chosen = lab
    others = [scores[lab] for lab in order if lab != chosen]
    margin = scores[chosen] - max(others) if others else math.inf
    return bayes.Decision(chosen, dict(scores), float(margin))


def observer_nn(s: edm.SimilaritySet) -> bayes.Decision:
    """Label of the nearest training view; scores are negated distances."""
    if s.size == 0:
        raise ValueError("observer_nn needs at least one training view")
    best = int(np.argmin(s.target_distances))
    labels = s.object_labels
    scores = {}
    for lab, dist in zip(labels, s.target_distances):
        scores[lab] = max(scores.get(lab, -math.inf), -float(dist))
    dec = _decision_from_scores(scores)
    chosen = labels[best]
    if chosen != dec.chosen:
        # Equal distances in two classes: the lowest row index wins.
        dec = bayes.Decision(chosen, dec.log_posteriors, 0.0)
    return dec


@dataclass(frozen=True)
class KernelWeights:
    """Weights ``alpha[i, c]`` of base view i in the score of class c."""

    alpha: np.ndarray
    bandwidth: float
    classes: tuple
    rows: tuple = field(default=())


def _as_similarities(base) -> edm.SimilaritySet:
    if isinstance(base, edm.SimilaritySet):
        return base
    views = [np.asarray(v, dtype=float) for _, _, v in base]
    d = edm.distance_matrix(np.array(views))
    return edm.SimilaritySet(d, np.zeros(len(views)), [(lab, idx) for lab, idx, _ in base])


def _gaussian(d, bandwidth):
    return np.exp(-np.square(d) / (2.0 * bandwidth * bandwidth))


def train_kernel(base, bandwidth: float | None = None, ridge: float = 1e-6) -> KernelWeights:
    """Ridge least squares of one-hot labels on Gaussian similarity features.

    ``base`` is a :class:`SimilaritySet` (only its base part is read) or a
    list of ``(label, index, view)`` triples.  The default bandwidth is the
    median pairwise base distance.
    """
    s = _as_similarities(base)
    if s.size == 0:
        raise ValueError("cannot train on an empty base")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    d = s.base_distances
    if bandwidth is None:
        off = d[np.triu_indices(s.size, 1)]
        bandwidth = float(np.median(off)) if off.size and np.median(off) > 0 else 1.0
    if not bandwidth > 0:
        raise ValueError("bandwidth must be > 0")
    classes = tuple(_ordered_labels(s.object_labels))
    y = np.array([[lab == c for c in classes] for lab in s.object_labels], dtype=float)
    g = _gaussian(d, bandwidth)
    if ridge == 0:
        if np.linalg.matrix_rank(g) < s.size:
            raise SingularSystem("kernel Gram matrix is rank deficient and ridge is 0")
        alpha = np.linalg.solve(g, y)
    else:
        alpha = linalg.solve(g.T @ g + ridge * np.eye(s.size), g.T @ y, assume_a="pos")
    return KernelWeights(alpha, float(bandwidth), classes, s.labels)


def kernel_scores(s: edm.SimilaritySet, w: KernelWeights) -> np.ndarray:
    if w.rows and tuple(s.labels) != tuple(w.rows):
        raise LengthMismatch("similarity rows do not match the trained base")
    if s.size != w.alpha.shape[0]:
        raise LengthMismatch("similarity set size does not match the kernel weights")
    return _gaussian(s.target_distances, w.bandwidth) @ w.alpha


def score_kernel(s: edm.SimilaritySet, w: KernelWeights) -> bayes.Decision:
    """Class with the largest discriminant score; ties to the first class."""
    phi = kernel_scores(s, w)
    return _decision_from_scores({c: float(x) for c, x in zip(w.classes, phi)})


# Interleaved-similarity observer ------------------------------------------

def observer_mu(mus, dim: int, codec: FixedPointCodec, priors: Priors,
                mc: bayes.MonteCarloParams, seed: int, trial=0,
                cache: PosteriorCache | None = None) -> bayes.Decision:
    """Bayes decision from interleaved codes ``[(label, index, mu), ...]``.

    Each code holds the target and one training view; decoding them and
    running the 3D path gives the 3D observer's decision on grid inputs.
    """
    target = None
    base = []
    for label, idx, mu in mus:
        v, t = mu_split(mu, dim, codec)
        if target is None:
            target = v
        elif not np.array_equal(target, v):
            raise ValueError("similarity codes disagree about the target view")
        base.append((label, idx, t))
    if target is None:
        raise ValueError("no similarity codes given")
    return _bayes_decision(target, _group(base), priors, mc, seed, trial, cache)
