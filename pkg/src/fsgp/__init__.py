"""Sparse variational Gaussian processes with subspace inducing inputs,
applied to multi-label classification with a GP factor model."""

from .basis import Basis, build_basis, init_subspace_coeffs, load_basis, save_basis, truncated_svd
from .bound import (FiniteDiffReport, GradientBundle, ModelState, finite_diff_check,
                    full_bound, gradient, stochastic_bound)
from .data import (Dataset, Minibatch, epoch_batches, full_batch, load_dataset,
                   make_minibatch, parse_xc_dataset, sample_minibatch, save_dataset)
from .errors import CheckpointError, FSGPError, NumericError, ParseError
from .kernels import InducingRepresentation, KernelSpec, cross_gram, gram_inducing
from .likelihood import QuadratureRule, expected_log_logistic, gauss_hermite
from .variational import (LatentMarginals, UtilityMarginal, VariationalFactors, kl_term,
                          latent_marginals, stable_factorize, utility_marginal)
from .trainer import (Checkpoint, OptimizerMoments, TrainConfig, TrainingAborted, adam_step,
                      init_state, load_checkpoint, save_checkpoint, train)
from .predict import (EvaluationReport, evaluate, evaluate_scores, precision_at_k,
                      predict_utilities, top_k_labels)
from .synth import SynthSpec, generate

__version__ = "0.1.0"
