import numpy as np
import pytest

from viewbayes.bayes import MonteCarloParams
from viewbayes.geometry import Priors, add_noise, project, sample_model, sample_rotation


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def make_world(seed, k=4, n_objects=3, r=8, sigma=0.05, tau=1.0):
    """Small labeled base: (priors, models, [(label, index, view), ...])."""
    g = np.random.default_rng(seed)
    priors = Priors.uniform(range(n_objects), tau, sigma)
    models = [sample_model(priors, k, w, g) for w in range(n_objects)]
    base = [(w, i, add_noise(project(models[w], sample_rotation(g)), priors.noise, g))
            for w in range(n_objects) for i in range(r)]
    return priors, models, base


FAST_MC = MonteCarloParams(rotation_samples=512, model_samples=128, map_restarts=3, map_iters=40)
