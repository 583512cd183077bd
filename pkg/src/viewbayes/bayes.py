"""Class-conditional view likelihoods and the arg-max posterior decision.

Three likelihoods are estimated by Monte Carlo:

* ``likelihood_known_model`` integrates the Gaussian imaging density over
  Haar rotations for one fixed 3D model.
* ``likelihood_from_training`` additionally integrates over the unknown
  model, weighting model draws by how well they explain the training views
  (self-normalized importance sampling).
* ``likelihood_map_model`` plugs a single MAP model into the first one.

All estimates are carried in log space.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Hashable, Mapping

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation
from scipy.special import i0e, logsumexp

from . import _kernels
from .errors import EffectiveSampleCollapse, LengthMismatch
from .geometry import PointSet3D, Priors, rotations_with_axes, sample_rotations, sample_vmf

# Relative objective gap below which two MAP restarts count as tied.
SELECT_TOL = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MonteCarloParams:
    """Sample budgets and estimator options.

    ``inplane="analytic"`` integrates the image-plane rotation angle of each
    Haar sample in closed form (a Bessel factor); ``"sampled"`` uses the raw
    Gaussian density at the sampled rotation.  Both are unbiased for the same
    integral.  ``proposal`` selects where model draws come from: ``"prior"``
    or ``"map"`` (a defensive mixture of the prior and a Gaussian around the
    MAP model).  Under ``"map"`` the training-view rotation averages also
    draw viewing directions from a defensive mixture of uniform and a
    von Mises-Fisher lobe around each MAP pose, reweighted to Haar.
    """

    rotation_samples: int = 4096
    model_samples: int = 512
    stream_label: str = "mc"
    inplane: str = "analytic"
    proposal: str = "map"
    proposal_scales: tuple = (1.0, 2.0)
    pose_scale: float = 2.0
    defensive: float = 0.1
    map_iters: int = 100
    map_restarts: int = 8

    def __post_init__(self):
        if self.rotation_samples < 1 or self.model_samples < 1:
            raise ValueError("sample counts must be >= 1")
        if not self.stream_label:
            raise ValueError("stream_label must be non-empty")
        if self.inplane not in ("analytic", "sampled"):
            raise ValueError(f"unknown inplane mode {self.inplane!r}")
        if self.proposal not in ("prior", "map"):
            raise ValueError(f"unknown proposal {self.proposal!r}")
        if not self.proposal_scales or min(self.proposal_scales) <= 0:
            raise ValueError("proposal_scales must be a non-empty tuple of positive numbers")
        object.__setattr__(self, "proposal_scales", tuple(float(x) for x in self.proposal_scales))
        if not 0.0 < self.defensive <= 1.0:
            raise ValueError("defensive mixture weight must be in (0, 1]")


@dataclass(frozen=True)
class LikelihoodEstimate:
    log_value: float
    std_error: float
    samples_used: tuple
    flags: tuple = ()

    @property
    def underflow(self) -> bool:
        return "underflow" in self.flags


@dataclass(frozen=True)
class Decision:
    chosen: Hashable
    log_posteriors: dict
    margin: float
    flags: tuple = ()
    meta: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class ModelPosterior:
    """Weighted model draws standing in for the posterior over 3D models."""

    models: np.ndarray
    log_weights: np.ndarray
    proposal: str
    map_model: PointSet3D | None = None
    flags: tuple = ()

    @property
    def ess(self) -> float:
        """Effective sample size ``sum(w) / max(w)``."""
        lw = self.log_weights
        if not np.any(np.isfinite(lw)):
            return 0.0
        return float(np.exp(logsumexp(lw) - np.max(lw)))


@dataclass(frozen=True)
class MapEstimate:
    model: PointSet3D
    rotations: np.ndarray
    objective_history: tuple
    converged: bool

    @property
    def objective(self) -> float:
        return self.objective_history[-1]


def _as_views(views, k=None) -> np.ndarray:
    arr = np.asarray(views, dtype=float)
    if arr.size == 0:
        return np.empty((0, 2 * k if k else 0))
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or (arr.size and arr.shape[1] % 2):
        raise LengthMismatch(f"views must be flat arrays of even length, got {arr.shape}")
    if k is not None and arr.shape[0] and arr.shape[1] != 2 * k:
        raise LengthMismatch(f"views of length {arr.shape[1]} do not match k={k}")
    return arr


class _RotationBank:
    """Per-model quantities for a fixed batch of rotations, shared by all views.

    ``log_iw`` are optional importance log-weights of the rotations relative
    to Haar measure (zero for Haar draws).
    """

    def __init__(self, models, rots, log_iw=None):
        self.models = np.asarray(models, dtype=float)
        self.rots = rots
        self.log_iw = np.zeros(len(rots)) if log_iw is None else np.asarray(log_iw, dtype=float)
        s, k, _ = self.models.shape
        self.k = k
        self.flat = self.models.reshape(s, 3 * k)
        # |projected model|^2 = |model|^2 - r2' (M'M) r2, with r2 the viewing axis.
        self.scatter = np.einsum("skc,ske->sce", self.models, self.models).reshape(s, 9)
        axis = rots[:, 2, :]
        self.axis_outer = np.ascontiguousarray(
            (axis[:, :, None] * axis[:, None, :]).reshape(len(rots), 9))
        self.model_sq = np.sum(self.models ** 2, axis=(1, 2))

    @property
    def proj_sq(self):
        return self.model_sq[:, None] - self.scatter @ self.axis_outer.T

    def _correlations(self, view):
        # Real and imaginary parts of sum_i conj(v_i) x_i, with image points
        # as complex numbers and x_i the projected model points.
        pts = view.reshape(-1, 2)
        r0, r1 = self.rots[:, 0, :], self.rots[:, 1, :]
        a = pts[None, :, 0, None] * r0[:, None, :] + pts[None, :, 1, None] * r1[:, None, :]
        b = pts[None, :, 0, None] * r1[:, None, :] - pts[None, :, 1, None] * r0[:, None, :]
        q = len(self.rots)
        return self.flat @ a.reshape(q, -1).T, self.flat @ b.reshape(q, -1).T

    def _const(self, view, var):
        return -self.k * (LOG_2PI + math.log(var)) - (view @ view) / (2.0 * var)

    def log_integrands(self, view, sigma, inplane):
        """``(S, Q)`` log integrands, evaluated with plain NumPy and SciPy."""
        re, im = self._correlations(view)
        var = sigma * sigma
        base = self._const(view, var) - self.proj_sq / (2.0 * var) + self.log_iw
        if inplane == "sampled":
            return base + re / var
        z = np.hypot(re, im) / var
        return base + np.log(i0e(z)) + z

    def log_mean(self, view, sigma, inplane):
        """Per-model log of the rotation average and its standard error."""
        re, im = self._correlations(view)
        var = sigma * sigma
        return _kernels.row_log_mean_exp(re, im, self.model_sq, self.scatter, self.axis_outer,
                                         self.log_iw, self._const(view, var), var, inplane == "analytic")


def _log_mean_exp(logs, axis=-1):
    """Log of the sample mean and delta-method standard error of that log."""
    n = logs.shape[axis]
    top = np.max(logs, axis=axis, keepdims=True)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    w = np.exp(logs - safe_top)
    mean = np.mean(w, axis=axis)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_mean = np.log(mean) + np.squeeze(safe_top, axis=axis)
        var = np.var(w, axis=axis, ddof=1) if n > 1 else np.zeros_like(mean)
        se = np.sqrt(var / n) / mean
    se = np.where(np.isfinite(se), se, np.inf)
    return log_mean, se


def _check_sigma(priors: Priors):
    if not priors.sigma > 0:
        raise ValueError("likelihood evaluation needs sigma > 0")


def likelihood_known_model(v, m: PointSet3D, priors: Priors, mc: MonteCarloParams,
                           rng: np.random.Generator) -> LikelihoodEstimate:
    """Monte-Carlo estimate of the density of view ``v`` given model ``m``.

    Averages the isotropic Gaussian imaging density over
    ``mc.rotation_samples`` Haar rotations.
    """
    _check_sigma(priors)
    view = _as_views(v, m.k)[0]
    rots = sample_rotations(rng, mc.rotation_samples)
    log_values, ses = _RotationBank(m.points[None], rots).log_mean(view, priors.sigma, mc.inplane)
    log_value, se = log_values[0], ses[0]
    flags = ("underflow",) if not np.isfinite(log_value) else ()
    return LikelihoodEstimate(float(log_value), float(se), (mc.rotation_samples,), flags)


def _log_prior_models(models, tau):
    k3 = models.shape[1] * 3
    sq = np.sum(models ** 2, axis=(1, 2))
    return -0.5 * k3 * (LOG_2PI + 2.0 * math.log(tau)) - sq / (2.0 * tau * tau)


def _log_view_likelihoods(views, models, priors, mc, rng):
    """``(J, S)`` rotation-MC log likelihoods of each view under each model.

    One batch of Haar rotations is shared by every model and view.
    """
    rots = sample_rotations(rng, mc.rotation_samples)
    bank = _RotationBank(models, rots)
    out = np.empty((len(views), len(models)))
    for j, view in enumerate(views):
        out[j], _ = bank.log_mean(view, priors.sigma, mc.inplane)
    return out


def _pose_proposal(rng, count, axis, kappa, defensive):
    """Rotations with viewing axes from ``defensive * uniform + (1 - defensive) * vMF``.

    Returns the rotations and their log importance weights against Haar.
    """
    uniform = rng.random(count) < defensive
    iso = rng.normal(size=(count, 3))
    axes = np.where(uniform[:, None], iso / np.linalg.norm(iso, axis=1, keepdims=True),
                    sample_vmf(rng, axis, kappa, count))
    rots = rotations_with_axes(axes, rng.uniform(0.0, 2.0 * math.pi, count))
    cos_t = rots[:, 2, :] @ (axis / np.linalg.norm(axis))
    log_uniform = -math.log(4.0 * math.pi)
    # vMF log density on S^2, written to stay finite for large kappa.
    log_vmf = (math.log(kappa) - math.log(2.0 * math.pi) - math.log1p(-math.exp(-2.0 * kappa))
               + kappa * (cos_t - 1.0))
    log_q = np.logaddexp(math.log(defensive) + log_uniform, math.log1p(-defensive) + log_vmf)
    return rots, log_uniform - log_q


def _gauge_vectors(pts):
    """Tangents of the rotation orbit at ``pts``: shape ``(..., 3k, 3)``."""
    cols = [np.cross(np.eye(3)[a], pts).reshape(pts.shape[:-2] + (-1,)) for a in range(3)]
    return np.stack(cols, axis=-1)


def _align_to(models, ref):
    """Rotate each model (no reflection, no translation) onto ``ref``."""
    h = np.einsum("kc,skd->scd", ref, models)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    u[:, :, -1] *= d[:, None]
    q = u @ vt
    return np.einsum("scd,skd->skc", q, models)


# Haar measure of SO(3) in rotation-vector coordinates (unit density at I).
LOG_SO3_VOLUME = math.log(8.0 * math.pi ** 2)


class _SliceLaplace:
    """Gaussian proposal for models, laid across the rotation orbits.

    Likelihood and prior are unchanged when the model is rotated, so
    models are only drawn on the slice through the MAP model orthogonal to
    its rotation orbit.  A draw stands for the whole orbit of ``Q @ x``
    with ``Q`` Haar; the density of that orbit mixture at ``x`` is the slice
    Gaussian divided by the orbit volume factor ``|det[T(x), B]|``.  The
    slice covariance is the Gauss-Newton (Laplace) covariance of the model
    with the view rotations marginalized.  Orbits cutting the slice more
    than once are counted at the aligned crossing only.
    """

    def __init__(self, centre, basis, chol, log_det_cov):
        self.centre = centre
        self.basis = basis
        self.chol = chol
        self.log_det_cov = log_det_cov

    @classmethod
    def fit(cls, views, est, sigma, tau):
        pts = np.array(est.model.points)
        k = pts.shape[0]
        gauge = _gauge_vectors(pts)
        u, sv, _ = np.linalg.svd(gauge, full_matrices=True)
        if sv[-1] <= 1e-8 * max(sv[0], 1e-300):
            return None
        basis = u[:, 3:]
        jac = _joint_jacobian(pts, est.rotations, sigma, 1.0 / tau)
        h = jac.T @ jac
        n = 3 * k
        schur = h[:n, :n] - h[:n, n:] @ np.linalg.solve(h[n:, n:] + 1e-12 * np.eye(h.shape[0] - n),
                                                        h[n:, :n])
        prec = basis.T @ schur @ basis
        prec = 0.5 * (prec + prec.T)
        try:
            chol_prec = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            return None
        # Covariance factor L with L L^T = prec^-1.
        chol = np.linalg.inv(chol_prec).T
        log_det_cov = -2.0 * np.sum(np.log(np.diag(chol_prec)))
        return cls(pts, basis, chol, log_det_cov)

    def log_density(self, models, scales):
        flat = models.reshape(models.shape[0], -1)
        z = (flat - self.centre.ravel()) @ self.basis
        white = np.linalg.solve(self.chol, z.T).T
        quad = np.sum(white * white, axis=1)
        dim = z.shape[1]
        comps = [-0.5 * dim * LOG_2PI - dim * math.log(c) - 0.5 * self.log_det_cov
                 - quad / (2.0 * c * c) for c in scales]
        log_slice = logsumexp(comps, axis=0) - math.log(len(scales))
        frame = np.concatenate([_gauge_vectors(models),
                                np.broadcast_to(self.basis, flat.shape[:1] + self.basis.shape)],
                               axis=2)
        _, log_vol = np.linalg.slogdet(frame)
        return log_slice - LOG_SO3_VOLUME - log_vol

    def draw(self, rng, count, tau, scales, defensive):
        """Slice-aligned draws from ``defensive * prior + (1 - defensive) * local``.

        Returns the aligned models and the log proposal density of each.
        """
        k = self.centre.shape[0]
        scales = np.asarray(scales, dtype=float)
        from_prior = rng.random(count) < defensive
        pick = scales[rng.integers(scales.size, size=count)]
        z = (rng.standard_normal((count, self.chol.shape[0])) @ self.chol.T) * pick[:, None]
        local = self.centre[None] + (z @ self.basis.T).reshape(count, k, 3)
        wide = rng.normal(0.0, tau, size=(count, k, 3))
        models = np.where(from_prior[:, None, None], wide, local)
        models = _align_to(models, self.centre)
        log_prior = _log_prior_models(models, tau)
        log_local = self.log_density(models, scales)
        log_q = np.logaddexp(math.log(defensive) + log_prior,
                             math.log1p(-defensive) + log_local if defensive < 1 else -np.inf)
        return models, log_q


def acquire_posterior(training, priors: Priors, mc: MonteCarloParams,
                      rng: np.random.Generator, k: int | None = None) -> ModelPosterior:
    """Draw weighted models representing P(M | training views).

    Weights are ``prior(M) * prod_j Lhat(T_j | M) / proposal(M)``; no
    explicit posterior density is formed.  With fewer than two training
    views, or ``mc.proposal == "prior"``, models come from the prior and the
    weights reduce to the training likelihood product.
    """
    _check_sigma(priors)
    views = _as_views(training, k)
    if k is None:
        if views.shape[0] == 0:
            raise ValueError("k is required when there are no training views")
        k = views.shape[1] // 2
    tau = priors.model_tau
    s = mc.model_samples
    map_model = None
    poses = None
    if mc.proposal == "map" and views.shape[0] >= 2 and tau > 0:
        est = map_model_estimate(views, priors, mc.map_iters, rng, restarts=mc.map_restarts)
        local = _SliceLaplace.fit(views, est, priors.sigma, tau)
    else:
        local = None
    if local is not None:
        map_model = est.model
        radius = math.sqrt(np.mean(np.sum(map_model.points ** 2, axis=1)))
        spread = mc.pose_scale * priors.sigma / max(radius * math.sqrt(k), 1e-12)
        poses = (est.rotations[:, 2, :], min(1.0 / spread ** 2, 1e8))
        models, log_q = local.draw(rng, s, tau, mc.proposal_scales, mc.defensive)
        log_w = _log_prior_models(models, tau) - log_q
        proposal = "map"
    else:
        models = rng.normal(0.0, tau, size=(s, k, 3))
        log_w = np.zeros(s)
        proposal = "prior"
    if poses is not None:
        axes, kappa = poses
        for view, axis in zip(views, axes):
            rots, log_iw = _pose_proposal(rng, mc.rotation_samples, axis, kappa, mc.defensive)
            bank = _RotationBank(models, rots, log_iw)
            log_w = log_w + bank.log_mean(view, priors.sigma, mc.inplane)[0]
    elif views.shape[0]:
        log_w = log_w + _log_view_likelihoods(views, models, priors, mc, rng).sum(axis=0)
    posterior = ModelPosterior(models, log_w, proposal, map_model)
    if posterior.ess < 2.0:
        warnings.warn(f"effective sample size {posterior.ess:.3g} < 2", EffectiveSampleCollapse,
                      stacklevel=2)
        posterior = ModelPosterior(models, log_w, proposal, map_model, ("ess_collapse",))
    return posterior


def predictive_likelihood(v, posterior: ModelPosterior, priors: Priors, mc: MonteCarloParams,
                          rng: np.random.Generator) -> LikelihoodEstimate:
    """Weighted average of ``Lhat(v | M_s)`` over the posterior draws."""
    _check_sigma(priors)
    k = posterior.models.shape[1]
    view = _as_views(v, k)[0]
    log_f = _log_view_likelihoods(view[None], posterior.models, priors, mc, rng)[0]
    lw = posterior.log_weights
    lse_w = logsumexp(lw)
    log_num = logsumexp(lw + log_f)
    log_value = log_num - lse_w
    flags = list(posterior.flags)
    if not np.isfinite(log_value):
        flags.append("underflow")
        se = math.inf
    else:
        log_wn = lw - lse_w
        # Normalized weight times (f / estimate - 1), kept finite in log space.
        dev = np.exp(log_wn + log_f - log_value) - np.exp(log_wn)
        se = float(np.sqrt(np.sum(dev * dev)))
    return LikelihoodEstimate(float(log_value), se,
                              (mc.rotation_samples, len(lw)), tuple(flags))


def likelihood_from_training(v, training, priors: Priors, mc: MonteCarloParams,
                             rng: np.random.Generator) -> LikelihoodEstimate:
    """Density of ``v`` given an object's training views, model integrated out."""
    view = _as_views(v)[0]
    posterior = acquire_posterior(training, priors, mc, rng, k=view.size // 2)
    return predictive_likelihood(view, posterior, priors, mc, rng)


# MAP structure estimation -------------------------------------------------

def _map_objective(views, models_pts, rots, sigma, tau):
    proj = np.einsum("kc,jdc->jkd", models_pts, rots[:, :2, :]).reshape(len(rots), -1)
    fit = np.sum((views - proj) ** 2) / (2.0 * sigma * sigma)
    reg = np.sum(models_pts ** 2) / (2.0 * tau * tau) if np.isfinite(tau) else 0.0
    return -(fit + reg)


def _structure_step(views, rots, sigma, tau):
    """Exact maximizer of the objective over the model, rotations fixed."""
    k = views.shape[1] // 2
    pis = rots[:, :2, :]
    lam = (sigma * sigma) / (tau * tau) if np.isfinite(tau) else 0.0
    a = np.einsum("jdc,jde->ce", pis, pis) + lam * np.eye(3)
    pts = views.reshape(len(rots), k, 2)
    rhs = np.einsum("jdc,jkd->kc", pis, pts)
    return np.linalg.lstsq(a, rhs.T, rcond=None)[0].T


def _rotation_step(view, model_pts, rot):
    """Local least-squares refinement of one view's rotation."""
    def resid(delta):
        r = Rotation.from_rotvec(delta).as_matrix() @ rot
        return (model_pts @ r[:2].T).ravel() - view

    method = "lm" if view.size >= 3 else "trf"
    sol = least_squares(resid, np.zeros(3), method=method, xtol=1e-14, ftol=1e-14, gtol=1e-14)
    return Rotation.from_rotvec(sol.x).as_matrix() @ rot


def _joint_jacobian(pts, rots, sigma, prior_w):
    """Jacobian of the scaled MAP residuals in (model, rotation increments).

    Rows are the ``2k`` image coordinates of each view divided by sigma,
    then the ``3k`` prior rows; columns are the model coordinates followed
    by one rotation vector per view acting as ``exp(delta) @ R``.
    """
    k, r = pts.shape[0], len(rots)
    jac = np.zeros((r * 2 * k + 3 * k, 3 * k + 3 * r))
    for j in range(r):
        x = pts @ rots[j].T
        for i in range(k):
            row = (j * k + i) * 2
            jac[row:row + 2, 3 * i:3 * i + 3] = rots[j][:2] / sigma
            # d(exp(delta) x)/d delta = -[x]_x, first two rows.
            cross = np.array([[0.0, x[i, 2], -x[i, 1]], [-x[i, 2], 0.0, x[i, 0]]])
            jac[row:row + 2, 3 * k + 3 * j:3 * k + 3 * j + 3] = cross / sigma
    jac[r * 2 * k:, :3 * k] = np.eye(3 * k) * prior_w
    return jac


def _joint_polish(views, pts, rots, sigma, tau, iters=50):
    """Damped Gauss-Newton on model and rotations together.

    Rotations are updated as ``exp(delta) @ R``, relinearized at each step.
    Minimum-norm steps leave the global-rotation gauge untouched.
    """
    k = pts.shape[0]
    r = len(rots)
    prior_w = 1.0 / tau if np.isfinite(tau) else 0.0

    def residuals(p, rs):
        proj = np.einsum("kc,jdc->jkd", p, rs[:, :2, :]).reshape(r, -1)
        return np.concatenate([((proj - views) / sigma).ravel(), (p * prior_w).ravel()])

    res = residuals(pts, rots)
    cost = res @ res
    mu = 1e-6
    for _ in range(iters):
        jac = _joint_jacobian(pts, rots, sigma, prior_w)
        aug = np.vstack([jac, math.sqrt(mu) * np.eye(jac.shape[1])])
        step = -np.linalg.lstsq(aug, np.concatenate([res, np.zeros(jac.shape[1])]),
                                rcond=None)[0]
        new_pts = pts + step[:3 * k].reshape(k, 3)
        new_rots = Rotation.from_rotvec(step[3 * k:].reshape(r, 3)).as_matrix() @ rots
        new_res = residuals(new_pts, new_rots)
        new_cost = new_res @ new_res
        # Near the optimum the cost stalls at rounding level long before
        # the parameters settle, so convergence is judged on the step.
        if new_cost <= cost * (1.0 + 1e-13):
            done = np.max(np.abs(step)) < 1e-13
            pts, rots, res, cost = new_pts, new_rots, new_res, new_cost
            mu = max(mu * 0.1, 1e-12)
            if done:
                break
        else:
            mu *= 10.0
            if mu > 1e6:
                break
    return _newton_refine(residuals, pts, rots, sigma, prior_w, cost)


def _retract(pts, rots, step):
    k = pts.shape[0]
    new_rots = Rotation.from_rotvec(step[3 * k:].reshape(-1, 3)).as_matrix() @ rots
    return pts + step[:3 * k].reshape(k, 3), new_rots


def _newton_refine(residuals, pts, rots, sigma, prior_w, cost, iters=20):
    """Newton steps on the MAP cost after Gauss-Newton has stalled.

    With few views and moderate noise the residuals at the optimum are not
    small, Gauss-Newton then converges slowly or cycles a little above
    rounding level.  The Hessian here is a central difference of the exact
    gradient; the pseudo-inverse drops the global-rotation gauge.
    """
    def grad(p, rs):
        return _joint_jacobian(p, rs, sigma, prior_w).T @ residuals(p, rs)

    n = 3 * pts.shape[0] + 3 * len(rots)
    h = 1e-6
    for _ in range(iters):
        g = grad(pts, rots)
        hess = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            hess[:, i] = (grad(*_retract(pts, rots, e)) - grad(*_retract(pts, rots, -e))) / (2 * h)
        hess = 0.5 * (hess + hess.T)
        evals, evecs = np.linalg.eigh(hess)
        keep = evals > 1e-9 * evals[-1]
        if np.any(evals < -1e-6 * evals[-1]):
            break  # not in a convex basin; leave the Gauss-Newton answer
        step = -evecs[:, keep] @ ((evecs[:, keep].T @ g) / evals[keep])
        new_pts, new_rots = _retract(pts, rots, step)
        res = residuals(new_pts, new_rots)
        new_cost = res @ res
        if new_cost > cost * (1.0 + 1e-13):
            break
        pts, rots, cost = new_pts, new_rots, new_cost
        if np.max(np.abs(step)) < 1e-13:
            break
    return pts, rots


def _canonical_pose(pts, rots):
    """Rotate the model onto its principal axes; rotations compensate.

    Axis signs are fixed by the third moment along each axis, so the result
    depends smoothly on the model and not on where the optimizer stopped.
    """
    _, vecs = np.linalg.eigh(pts.T @ pts)
    axes = vecs[:, ::-1].copy()
    for a in range(2):
        if np.sum((pts @ axes[:, a]) ** 3) < 0:
            axes[:, a] = -axes[:, a]
    axes[:, 2] = np.cross(axes[:, 0], axes[:, 1])
    return pts @ axes, rots @ axes


def _factorization_init(views):
    """Rank-3 factorization of the measurement matrix with a metric upgrade."""
    r = views.shape[0]
    w = views.reshape(r, -1, 2).transpose(0, 2, 1).reshape(2 * r, -1)
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    if s.size < 3 or s[2] <= 1e-12 * max(s[0], 1e-300):
        return None
    cams = u[:, :3] * np.sqrt(s[:3])
    rows = []
    rhs = []
    for j in range(r):
        a, b = cams[2 * j], cams[2 * j + 1]
        for x, y, val in ((a, a, 1.0), (b, b, 1.0), (a, b, 0.0)):
            rows.append([x[0] * y[0], x[0] * y[1] + x[1] * y[0], x[0] * y[2] + x[2] * y[0],
                         x[1] * y[1], x[1] * y[2] + x[2] * y[1], x[2] * y[2]])
            rhs.append(val)
    l6 = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    lmat = np.array([[l6[0], l6[1], l6[2]], [l6[1], l6[3], l6[4]], [l6[2], l6[4], l6[5]]])
    evals, evecs = np.linalg.eigh(lmat)
    evals = np.clip(evals, 1e-6 * max(evals.max(), 1e-12), None)
    upgrade = evecs * np.sqrt(evals)
    cams = cams @ upgrade
    rots = np.empty((r, 3, 3))
    for j in range(r):
        uu, _, vv = np.linalg.svd(cams[2 * j:2 * j + 2], full_matrices=False)
        top = uu @ vv
        rots[j] = np.vstack([top, np.cross(top[0], top[1])])
    return rots


def map_model_estimate(training, priors: Priors, iters: int, rng: np.random.Generator,
                       restarts: int = 8, init_rotations=None, tol: float = 1e-12) -> MapEstimate:
    """MAP 3D model from training views by alternating maximization.

    Given the per-view rotations the model is a ridge least-squares solution;
    given the model each rotation is refined locally and only accepted if it
    improves the fit, so the objective never decreases.  Restart 0 starts
    from a rank-3 factorization of the stacked views, the others from Haar
    random rotations.  The depth reflection of orthographic projection is
    left as found; both mirror models explain the views equally well.
    """
    views = _as_views(training)
    if views.shape[0] < 2:
        raise ValueError("MAP reconstruction needs at least two training views")
    sigma = priors.sigma if priors.sigma > 0 else 1.0
    tau = priors.model_tau if priors.model_tau > 0 else np.inf
    starts = []
    if init_rotations is not None:
        starts.append(np.asarray(init_rotations, dtype=float))
    else:
        fact = _factorization_init(views)
        n_random = restarts - (fact is not None)
        if fact is not None:
            starts.append(fact)
        for _ in range(max(n_random, 0)):
            starts.append(sample_rotations(rng, views.shape[0]))
    best = None
    for rots in starts:
        rots = rots.copy()
        pts = _structure_step(views, rots, sigma, tau)
        history = [_map_objective(views, pts, rots, sigma, tau)]
        converged = False
        for _ in range(iters):
            for j in range(len(rots)):
                cand = _rotation_step(views[j], pts, rots[j])
                old = np.sum(((pts @ rots[j][:2].T).ravel() - views[j]) ** 2)
                new = np.sum(((pts @ cand[:2].T).ravel() - views[j]) ** 2)
                if new < old:
                    rots[j] = cand
            new_pts = _structure_step(views, rots, sigma, tau)
            obj = _map_objective(views, new_pts, rots, sigma, tau)
            if obj >= history[-1]:
                pts = new_pts
            else:
                obj = _map_objective(views, pts, rots, sigma, tau)
            gain = obj - history[-1]
            history.append(max(obj, history[-1]))
            if gain <= tol * (1.0 + abs(obj)):
                converged = True
                break
        est = MapEstimate(PointSet3D(pts), rots, tuple(history), converged)
        # Restarts often land on the same optimum or its mirror image; only
        # a clear improvement replaces the earlier one, so rounding-level
        # changes in the views cannot switch the selected restart.
        if best is None or est.objective > best.objective + SELECT_TOL * (1.0 + abs(best.objective)):
            best = est
    pts, rots = _joint_polish(views, np.array(best.model.points), best.rotations.copy(),
                              sigma, tau)
    obj = _map_objective(views, pts, rots, sigma, tau)
    if obj < best.objective:
        pts, rots = np.array(best.model.points), best.rotations
        obj = best.objective
    pts, rots = _canonical_pose(pts, rots)
    return MapEstimate(PointSet3D(pts), rots, best.objective_history + (obj,), best.converged)


def likelihood_map_model(v, training, priors: Priors, mc: MonteCarloParams,
                         rng: np.random.Generator) -> LikelihoodEstimate:
    """Known-model likelihood evaluated at the MAP model of the training views."""
    est = map_model_estimate(training, priors, mc.map_iters, rng, restarts=mc.map_restarts)
    return likelihood_known_model(v, est.model, priors, mc, rng)


def decide(per_class: Mapping[Hashable, LikelihoodEstimate], priors: Priors) -> Decision:
    """Arg max of log likelihood plus log class prior.

    Ties go to the label listed first in ``priors.class_prior``.  If every
    likelihood underflowed the prior alone decides and the decision is
    flagged ``all_underflow``.
    """
    if not per_class:
        raise ValueError("decide needs at least one class")
    order = [lab for lab in priors.class_prior if lab in per_class]
    missing = set(per_class) - set(order)
    if missing:
        raise KeyError(f"no class prior for labels {sorted(map(str, missing))}")
    with np.errstate(divide="ignore"):
        log_prior = {lab: math.log(priors.class_prior[lab]) if priors.class_prior[lab] > 0
                     else -math.inf for lab in order}
    flags = ()
    if all(not np.isfinite(per_class[lab].log_value) for lab in order):
        scores = dict(log_prior)
        flags = ("all_underflow",)
    else:
        scores = {lab: per_class[lab].log_value + log_prior[lab] for lab in order}
    chosen = order[0]
    for lab in order[1:]:
        if scores[lab] > scores[chosen]:
            chosen = lab
    others = [scores[lab] for lab in order if lab != chosen]
    margin = scores[chosen] - max(others) if others else math.inf
    return Decision(chosen, scores, float(margin), flags)
