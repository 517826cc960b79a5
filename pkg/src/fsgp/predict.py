"""Test-time utility scores and precision@k."""

import json
from dataclasses import dataclass, field

import numpy as np

from .kernels import as_inputs, cross_gram, gram_inducing, kernel_diag
from .variational import _latent, stable_factorize

__all__ = ["predict_utilities", "precision_at_k", "evaluate", "evaluate_scores",
           "top_k_labels", "EvaluationReport"]

_ROW_CHUNK = 4096


def predict_utilities(state, x_star, return_variance=False):
    """Mean utilities ``f̄_k = Σ_p φ_kp k(x, Z) μ_p + b_k`` for every row of ``x_star``.

    Ranking uses the means only. ``return_variance=True`` additionally returns
    ``Σ_p φ_kp² s_p(x)`` for inspection.
    """
    rep = state.rep
    d = rep.basis.dim if rep.is_subspace else rep.free_z.shape[1]
    if x_star.shape[1] != d:
        raise ValueError(f"x_star has {x_star.shape[1]} columns, model expects D={d}")
    inputs = as_inputs(x_star, rep.basis if rep.is_subspace else None)
    kxz = cross_gram(inputs, rep, state.kernel)
    scores = kxz @ state.factors.mu.T @ state.phi.T + state.bias
    if not return_variance:
        return scores
    kz = gram_inducing(rep, state.kernel)
    chols = [stable_factorize(kz, sig) for sig in state.factors.sigma]
    _, s, _ = _latent(kxz, kernel_diag(inputs, state.kernel), state.factors.mu, chols)
    return scores, s @ (state.phi ** 2).T


def _ranked(scores, k):
    # stable sort on -score: ties go to the lower label index
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def precision_at_k(positives, scores, k):
    """Fraction of the ``k`` highest-scored labels that are positive."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= scores.shape[-1]:
        raise ValueError(f"k must be in [1, {scores.shape[-1]}], got {k}")
    top = _ranked(scores, k)
    return float(np.isin(top, np.asarray(list(positives), dtype=np.int64)).sum()) / k


def top_k_labels(scores, k):
    return _ranked(np.asarray(scores), k)


@dataclass
class EvaluationReport:
    precision: dict
    n_test: int
    config: dict = field(default_factory=dict)

    def to_text(self):
        lines = [f"n_test={self.n_test}"]
        lines += [f"P@{k}={v:.6f}" for k, v in sorted(self.precision.items())]
        lines += [f"{k}={v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines)

    def to_json(self):
        return json.dumps({"n_test": self.n_test,
                           "precision": {f"P@{k}": v for k, v in sorted(self.precision.items())},
                           "config": self.config}, sort_keys=True)


def evaluate_scores(scores, test, ks=(1, 3, 5)):
    """Mean P@k of a score matrix against the positives of ``test``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (test.n, test.n_labels):
        raise ValueError(f"scores shape {scores.shape} != ({test.n}, {test.n_labels})")
    kmax = max(ks)
    if not 1 <= kmax <= test.n_labels:
        raise ValueError(f"k must be in [1, {test.n_labels}]")
    y = test.label_matrix()
    hits = {k: 0.0 for k in ks}
    for lo in range(0, test.n, _ROW_CHUNK):
        top = _ranked(scores[lo:lo + _ROW_CHUNK], kmax)
        rel = np.asarray(y[lo:lo + _ROW_CHUNK].toarray()[np.arange(top.shape[0])[:, None], top])
        cum = np.cumsum(rel, axis=1)
        for k in ks:
            hits[k] += float(cum[:, k - 1].sum()) / k
    return {k: hits[k] / test.n if test.n else 0.0 for k in ks}


def evaluate(state, test, ks=(1, 3, 5), config=None):
    """Mean precision@k of the model's mean utilities on a labelled test set."""
    k_model = state.phi.shape[0]
    if test.n_labels != k_model:
        raise ValueError(f"test set has K={test.n_labels} labels, model has K={k_model}")
    scores = np.vstack([predict_utilities(state, test.features[lo:lo + _ROW_CHUNK])
                        for lo in range(0, test.n, _ROW_CHUNK)]) if test.n else np.zeros((0, k_model))
    return EvaluationReport(evaluate_scores(scores, test, ks), test.n, dict(config or {}))
