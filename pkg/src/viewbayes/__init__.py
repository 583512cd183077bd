"""Bayesian 3D object recognition from 2D views and view similarities."""

from .bayes import (Decision, LikelihoodEstimate, MonteCarloParams, ModelPosterior, decide,
                    likelihood_from_training, likelihood_known_model, likelihood_map_model)
from .codec import FixedPointCodec, interleave_decode, interleave_encode, mu_similarity
from .edm import (SimilaritySet, embed_target, reconstruct_incremental, reconstruct_spectral,
                  similarity_set, sphere_intersect, view_distance)
from .geometry import (IsometryN, NoiseModel, PointSet3D, Priors, procrustes_align,
                       sample_rotation)
from .harness import ExperimentConfig, run_experiment, write_report
from .observers import (AnchorInfo, observer_3d, observer_nn, observer_strongly_2d,
                        score_kernel, train_kernel)
from .streams import derive_stream

__version__ = "0.1.0"
