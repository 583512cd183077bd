import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viewbayes import edm
from viewbayes.codec import FixedPointCodec, mu_similarity
from viewbayes.errors import AnchorMismatch, DegenerateInput, SingularSystem
from viewbayes.geometry import add_noise, project, sample_rotation
from viewbayes.observers import (AnchorInfo, PosteriorCache, kernel_scores, make_anchors,
                                 observer_3d, observer_map, observer_mu, observer_nn,
                                 observer_strongly_2d, restore_views, score_kernel, train_kernel)

from conftest import FAST_MC, make_world


def _target(priors, models, label, seed):
    g = np.random.default_rng(seed)
    return add_noise(project(models[label], sample_rotation(g)), priors.noise, g)


def _paired(seed, **world):
    priors, models, base = make_world(seed, **world)
    v = _target(priors, models, seed % len(models), seed + 1000)
    k = v.size // 2
    d3 = observer_3d(v, base, priors, FAST_MC, seed=seed, trial=2)
    d2 = observer_strongly_2d(edm.similarity_set(v, base), make_anchors(base, k), priors,
                              FAST_MC, seed=seed, trial=2)
    return d3, d2


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_strongly_2d_matches_3d(seed):
    d3, d2 = _paired(seed)
    assert d3.chosen == d2.chosen
    for label, lp in d3.log_posteriors.items():
        assert abs(lp - d2.log_posteriors[label]) <= 1e-6 * max(1.0, abs(lp))
    assert d3.meta["streams"] == d2.meta["streams"]
    assert d2.meta["bayes_optimal"] and d2.meta["anchor_residual"] < 1e-9


def test_paired_decision_with_duplicate_target():
    priors, models, base = make_world(5)
    v = base[3][2].copy()
    s = edm.similarity_set(v, base)
    assert s.target_distances[3] == 0.0
    d3 = observer_3d(v, base, priors, FAST_MC, seed=5)
    d2 = observer_strongly_2d(s, make_anchors(base, 4), priors, FAST_MC, seed=5)
    assert d3.chosen == d2.chosen
    np.testing.assert_allclose(list(d3.log_posteriors.values()),
                               list(d2.log_posteriors.values()), rtol=1e-6)


def test_restored_views_match_up_to_rounding():
    priors, models, base = make_world(8)
    v = _target(priors, models, 0, 9)
    views, target, flags, residual = restore_views(edm.similarity_set(v, base), make_anchors(base, 4))
    np.testing.assert_allclose(views, np.array([b[2] for b in base]), atol=1e-9)
    np.testing.assert_allclose(target, v, atol=1e-9)
    assert flags == ()


def test_degraded_mode_below_anchor_count():
    priors, models, base = make_world(3, k=2, n_objects=2, r=2)
    anchors = make_anchors(base, 2)
    assert anchors.degraded and len(anchors.anchor_indices) == 4
    v = _target(priors, models, 1, 4)
    dec = observer_strongly_2d(edm.similarity_set(v, base), anchors, priors, FAST_MC, seed=0)
    assert "degraded" in dec.flags and dec.meta["bayes_optimal"] is False


def test_anchor_spanning_check():
    base = [(0, i, np.array([float(i), 0.0, 0.0, 0.0])) for i in range(5)]
    with pytest.raises(DegenerateInput):
        make_anchors(base, 2)


def test_wrong_anchor_coordinates_rejected():
    priors, models, base = make_world(4, k=2, n_objects=2, r=4)
    anchors = make_anchors(base, 2)
    bent = anchors.anchor_coords.copy()
    bent[0] += 0.5
    v = _target(priors, models, 0, 1)
    with pytest.raises(AnchorMismatch):
        restore_views(edm.similarity_set(v, base), AnchorInfo(anchors.anchor_indices, bent))


def test_observers_are_isometry_invariant_through_similarities(rng):
    priors, models, base = make_world(6, k=3)
    v = _target(priors, models, 1, 2)
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    shift = rng.normal(size=6)
    moved = [(lab, i, q @ x + shift) for lab, i, x in base]
    a, b = edm.similarity_set(v, base), edm.similarity_set(q @ v + shift, moved)
    np.testing.assert_allclose(a.base_distances, b.base_distances, atol=1e-12)
    np.testing.assert_allclose(a.target_distances, b.target_distances, atol=1e-12)
    assert observer_nn(a).chosen == observer_nn(b).chosen
    w = train_kernel(a)
    np.testing.assert_allclose(kernel_scores(b, train_kernel(b)), kernel_scores(a, w), atol=1e-8)


def test_single_class_always_chosen():
    priors, models, base = make_world(2, n_objects=1, r=4)
    v = _target(priors, models, 0, 3)
    for dec in (observer_3d(v, base, priors, FAST_MC, seed=0),
                observer_nn(edm.similarity_set(v, base)),
                observer_map(v, base, priors, FAST_MC, seed=0)):
        assert dec.chosen == 0 and dec.margin == math.inf


def test_zero_noise_identical_view_is_recognised():
    g = np.random.default_rng(1)
    priors, models, _ = make_world(1, sigma=0.05)
    base = [(w, 0, project(models[w], sample_rotation(g))) for w in range(3)]
    dec = observer_nn(edm.similarity_set(base[2][2], base))
    assert dec.chosen == 2 and dec.log_posteriors[2] == 0.0


def test_nn_examples_and_ties():
    base = [("a", 0, np.array([0.0, 0.0])), ("b", 0, np.array([2.0, 0.0])),
            ("b", 1, np.array([0.0, 1.0]))]
    dec = observer_nn(edm.similarity_set(np.array([1.6, 0.0]), base))
    assert dec.chosen == "b" and dec.log_posteriors["b"] == pytest.approx(-0.4)
    tie = observer_nn(edm.similarity_set(np.array([1.0, 0.0]), base[:2]))
    assert tie.chosen == "a" and tie.margin == 0.0
    swapped = observer_nn(edm.similarity_set(np.array([1.0, 0.0]), base[1::-1]))
    assert swapped.chosen == "b"


def test_kernel_separates_clusters():
    g = np.random.default_rng(0)
    base = [(lab, i, centre + 0.1 * g.normal(size=2))
            for lab, centre in (("x", np.zeros(2)), ("y", np.array([5.0, 5.0])))
            for i in range(6)]
    w = train_kernel(base, bandwidth=1.0)
    for lab, centre in (("x", [0.1, -0.1]), ("y", [4.9, 5.2])):
        assert score_kernel(edm.similarity_set(np.array(centre), base), w).chosen == lab


def test_kernel_matches_normal_equations():
    priors, models, base = make_world(3, k=2, n_objects=2, r=4)
    s = edm.similarity_set(base[0][2], base)
    w = train_kernel(s, bandwidth=0.7, ridge=0.3)
    g = np.exp(-s.base_distances ** 2 / (2 * 0.49))
    y = np.array([[lab == c for c in (0, 1)] for lab in s.object_labels], dtype=float)
    np.testing.assert_allclose((g.T @ g + 0.3 * np.eye(8)) @ w.alpha, g.T @ y, atol=1e-10)


def test_kernel_ridge_shrinks_weights():
    priors, models, base = make_world(3, k=2, n_objects=2, r=4)
    norms = [np.linalg.norm(train_kernel(base, 1.0, ridge).alpha) for ridge in (1e-4, 1e-2, 1, 100)]
    assert np.all(np.diff(norms) < 0)


def test_kernel_singular_without_ridge():
    base = [("a", 0, np.zeros(2)), ("a", 1, np.zeros(2)), ("b", 0, np.ones(2))]
    with pytest.raises(SingularSystem):
        train_kernel(base, 1.0, ridge=0.0)
    train_kernel(base, 1.0)


def test_observer_mu_equals_3d_on_grid():
    codec = FixedPointCodec(2, 3, offset=50.0)
    priors, models, base = make_world(7, k=3, n_objects=2, r=5)
    base = [(lab, i, codec.quantize(v)) for lab, i, v in base]
    v = codec.quantize(_target(priors, models, 1, 3))
    mus = [(lab, i, mu_similarity(v, x, codec)) for lab, i, x in base]
    a = observer_mu(mus, v.size, codec, priors, FAST_MC, seed=3, trial=1)
    b = observer_3d(v, base, priors, FAST_MC, seed=3, trial=1)
    assert a.chosen == b.chosen and a.log_posteriors == b.log_posteriors


def test_map_observer_and_cache_sharing():
    priors, models, base = make_world(9, k=3, r=5)
    v = _target(priors, models, 2, 3)
    cache = PosteriorCache()
    a = observer_3d(v, base, priors, FAST_MC, seed=1, cache=cache)
    assert len(cache) == 3
    m = observer_map(v, base, priors, FAST_MC, seed=1, cache=cache)
    assert len(cache) == 3
    assert a == observer_3d(v, base, priors, FAST_MC, seed=1)
    assert m == observer_map(v, base, priors, FAST_MC, seed=1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_nn_matches_brute_force(seed):
    g = np.random.default_rng(seed)
    base = [(int(g.integers(3)), i, g.normal(size=4)) for i in range(7)]
    v = g.normal(size=4)
    d = [np.linalg.norm(v - x) for _, _, x in base]
    assert observer_nn(edm.similarity_set(v, base)).chosen == base[int(np.argmin(d))][0]
