"""Timing helpers: subspace vs free-Z evaluation cost and D-independence of a step."""

import time

import numpy as np
import scipy.sparse as sp

from .basis import build_basis
from .bound import gradient
from .data import Dataset, make_minibatch
from .kernels import as_inputs, cross_gram, gram_inducing
from .likelihood import gauss_hermite
from .trainer import OptimizerMoments, TrainConfig, adam_step, init_state
from .variational import kl_term, stable_factorize

__all__ = ["zero_pad", "median_time", "interleaved_medians", "StepTimer",
           "time_evaluations", "run_bench"]


def zero_pad(data, d_total):
    """Same dataset with ``d_total - D`` all-zero feature columns appended."""
    if d_total < data.d:
        raise ValueError("d_total must be >= D")
    x = data.features
    x = sp.csr_matrix((x.data, x.indices, x.indptr), shape=(data.n, d_total))
    return Dataset(x, data.label_offsets, data.label_indices, data.n_labels)


def median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def interleaved_medians(fns, repeats, warmup=1):
    """Median wall time of each callable, run round-robin to share drift."""
    for _ in range(warmup):
        for fn in fns:
            fn()
    times = [[] for _ in fns]
    for _ in range(repeats):
        for j, fn in enumerate(fns):
            t0 = time.perf_counter()
            fn()
            times[j].append(time.perf_counter() - t0)
    return [float(np.median(t)) for t in times]


class StepTimer:
    """Callable performing one minibatch gradient + Adam step in a fixed state.

    The minibatch sequence is drawn up front so that only the step itself is
    timed; the state advances with every call.
    """

    def __init__(self, config, data, basis=None, n_batches=8):
        rng = np.random.default_rng(config.seed)
        if basis is None:
            basis = build_basis(data.features, config.rank, config.precompute_cross, config.seed)
        self.config = config
        self.state = init_state(config, data, basis, rng)
        self.moments = OptimizerMoments.zeros_like(self.state.params())
        self.rule = gauss_hermite(config.quadrature_order)
        self.n = data.n
        bsz = min(config.batch_size, data.n)
        proj_basis = basis if self.state.rep.is_subspace else None
        self.batches = [make_minibatch(data, np.sort(rng.choice(data.n, bsz, replace=False)),
                                       basis=proj_basis) for _ in range(n_batches)]
        self._i = 0

    def __call__(self):
        batch = self.batches[self._i % len(self.batches)]
        self._i += 1
        _, grads = gradient(self.state, batch, self.n, self.rule)
        self.state, self.moments = adam_step(self.state, grads, self.moments, self.config)


def time_evaluations(data, latents=1, inducing=200, rank=50, batch_size=200, kernel="linear",
                     repeats=5, seed=0, basis=None):
    """Median times of gram, KL, cross-gram and a full bound gradient in both modes.

    The free-Z state is the subspace state with ``Z = A X̃`` materialized, so
    both modes evaluate the same bound.
    """
    config = TrainConfig(latents=latents, inducing=inducing, rank=rank, batch_size=batch_size,
                         kernel=kernel, seed=seed, precompute_cross=True)
    rng = np.random.default_rng(seed)
    if basis is None:
        basis = build_basis(data.features, rank, True, seed)
    sub = init_state(config, data, basis, rng)
    free = sub.to_free()
    rows = np.sort(rng.choice(data.n, min(batch_size, data.n), replace=False))
    batches = {"subspace": make_minibatch(data, rows, basis=basis),
               "free_z": make_minibatch(data, rows)}
    rule = gauss_hermite(config.quadrature_order)
    report = {}
    for mode, state in (("subspace", sub), ("free_z", free)):
        batch = batches[mode]
        kz = gram_inducing(state.rep, state.kernel)
        sig = state.factors.sigma

        def gram_kl(state=state, sig=sig):
            k = gram_inducing(state.rep, state.kernel)
            return sum(kl_term(k, mu, s, stable_factorize(k, s))
                       for mu, s in zip(state.factors.mu, sig))

        inputs = as_inputs(batch)
        report[mode] = {
            "gram": median_time(lambda: gram_inducing(state.rep, state.kernel), repeats),
            "kl": median_time(lambda: [kl_term(kz, mu, s, stable_factorize(kz, s))
                                       for mu, s in zip(state.factors.mu, sig)], repeats),
            "gram_kl": median_time(gram_kl, repeats),
            "cross": median_time(lambda: cross_gram(inputs, state.rep, state.kernel), repeats),
            "bound": median_time(lambda: gradient(state, batch, data.n, rule), repeats),
        }
    report["ratio"] = {k: report["free_z"][k] / max(report["subspace"][k], 1e-12)
                       for k in report["subspace"]}
    report["dims"] = {"N": data.n, "D": data.d, "M": inducing, "R": basis.rank, "P": latents}
    return report


def run_bench(n=1000, d=1000, pad_to=None, k=20, latents=1, inducing=200, rank=50,
              batch_size=200, kernel="linear", repeats=5, seed=0, density=0.01):
    """Synthetic sparse problem (optionally zero-padded) fed to :func:`time_evaluations`."""
    rng = np.random.default_rng(seed)
    x = sp.random(n, d, density=density, format="csr", random_state=rng)
    labels = [np.flatnonzero(rng.random(k) < 0.1) for _ in range(n)]
    data = Dataset.from_label_lists(x, labels, k)
    if pad_to:
        data = zero_pad(data, pad_to)
    return time_evaluations(data, latents, inducing, rank, batch_size, kernel, repeats, seed)
