"""Initialization, Adam ascent on the stochastic bound, and checkpoints."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._io import atomic_savez
from .basis import Basis, build_basis, init_subspace_coeffs
from .bound import ModelState, gradient
from .data import epoch_batches
from .errors import CheckpointError, NumericError
from .kernels import InducingRepresentation, KernelSpec
from .likelihood import gauss_hermite
from .variational import VariationalFactors

__all__ = [
    "TrainConfig",
    "OptimizerMoments",
    "TrainingAborted",
    "Checkpoint",
    "init_state",
    "adam_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    latents: int = 30
    inducing: int = 500
    rank: int = 100
    batch_size: int = 500
    neg_size: int = None  # None -> min(K - 1, 2000)
    epochs: int = 10
    learning_rate: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    kernel: str = "linear"
    mode: str = "subspace"
    seed: int = 0
    quadrature_order: int = 20
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint
    kmeans_iters: int = 10
    precompute_cross: bool = True
    iid_batches: bool = False
    max_failures: int = 5

    def __post_init__(self):
        for name in ("latents", "inducing", "rank", "batch_size", "quadrature_order"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.neg_size is not None and self.neg_size < 1:
            raise ValueError("neg_size must be >= 1")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ValueError("epochs and checkpoint_every must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        mode = self.mode.replace("-", "_")
        if mode not in ("subspace", "free_z"):
            raise ValueError(f"mode must be 'subspace' or 'free_z', got {self.mode!r}")
        self.mode = mode
        self.kernel = KernelSpec(self.kernel).kind

    def resolved_neg_size(self, n_labels):
        if self.neg_size is not None:
            return self.neg_size
        return max(1, min(n_labels - 1, 2000))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerMoments:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()},
                   {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}, 0)


class TrainingAborted(NumericError):
    """Repeated numeric failures; ``checkpoint`` names the last good archive."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message, "train")
        self.checkpoint = checkpoint


def _label_bias(data):
    counts = np.bincount(data.label_indices, minlength=data.n_labels).astype(np.float64)
    lo = 1.0 / (data.n + 2)
    pi = np.clip(counts / data.n, lo, 1.0 - lo)
    return np.clip(np.log(pi / (1.0 - pi)), -6.0, 6.0)


def _median_distance(points, rng, n_sample=1000):
    if points.shape[0] > n_sample:
        points = points[rng.choice(points.shape[0], n_sample, replace=False)]
    sq = np.sum(points ** 2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * points @ points.T, 0.0)
    iu = np.triu_indices(points.shape[0], k=1)
    med = float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 1.0
    return med if med > 0 else 1.0


def init_state(config, data, basis, rng):
    """Initial model state.

    ``A`` comes from k-means on ``U S``; free mode materializes ``Z = A X̃``.
    ``μ = 0``, raw ``Σ = 0``, ``Φ ~ N(0, 1/P)``, ``b`` the clipped empirical
    log-odds, and for the squared exponential ``σ² = 1`` with ``ℓ`` the median
    pairwise distance of up to 1000 sampled rows of ``U S``.
    """
    if config.inducing > data.n:
        raise ValueError(f"inducing={config.inducing} exceeds N={data.n}")
    a = init_subspace_coeffs(basis, config.inducing, config.kmeans_iters, rng)
    if config.mode == "subspace":
        rep = InducingRepresentation(a=a, basis=basis)
    else:
        rep = InducingRepresentation(free_z=a @ basis.x_tilde)
    p, m = config.latents, config.inducing
    phi = rng.normal(0.0, 1.0 / np.sqrt(p), size=(data.n_labels, p))
    kernel = KernelSpec(config.kernel)
    if kernel.kind != "linear":
        ell = _median_distance(basis.scores(), rng)
        kernel = KernelSpec(kernel.kind, 0.0, float(np.log(ell)))
    factors = VariationalFactors(np.zeros((p, m)), np.zeros((p, m)))
    return ModelState(rep, factors, phi, _label_bias(data), kernel, data.n)


def adam_step(state, grads, moments, config):
    """One Adam ascent step with bias correction. Inputs are left untouched;
    a non-finite update raises :class:`NumericError` naming the block."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = moments.step + 1
    params = state.params()
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * moments.m[name] + (1.0 - b1) * g
        v = b2 * moments.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        upd = value + config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        if not np.all(np.isfinite(upd)):
            raise NumericError("non-finite parameter update", name)
        new_params[name], new_m[name], new_v[name] = upd, m, v
    return state.with_params(new_params), OptimizerMoments(new_m, new_v, t)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    state: ModelState
    moments: OptimizerMoments
    epoch: int = 0
    history: list = field(default_factory=list)
    rng_state: dict = None
    config: dict = None


def save_checkpoint(path, state, moments=None, epoch=0, history=(), rng_state=None,
                    config=None):
    """Write a versioned, self-describing ``.npz`` archive atomically."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "mode": state.mode,
        "kernel": state.kernel.kind,
        "n_train": int(state.n_train),
        "epoch": int(epoch),
        "history": [float(h) for h in history],
        "rng_state": rng_state,
        "config": config,
        "adam_step": int(moments.step) if moments is not None else 0,
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    for name, value in state.params().items():
        arrays[f"param/{name}"] = np.asarray(value)
    if moments is not None:
        for name in moments.m:
            arrays[f"adam_m/{name}"] = moments.m[name]
            arrays[f"adam_v/{name}"] = moments.v[name]
    if state.rep.is_subspace:
        b = state.rep.basis
        arrays["basis/x_tilde"] = b.x_tilde
        arrays["basis/gram_tilde"] = b.gram_tilde
        arrays["basis/singular_values"] = b.singular_values
    atomic_savez(path, arrays)


def load_checkpoint(path, basis=None):
    """Read an archive written by :func:`save_checkpoint`.

    ``basis`` replaces the stored basis (e.g. one carrying ``cross_gram``);
    it must have the same ``x_tilde``.
    """
    try:
        with np.load(path, allow_pickle=False) as f:
            files = {k: f[k] for k in f.files}
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        meta = json.loads(str(files["meta"]))
        version = meta["format_version"]
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} has no readable metadata") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {CHECKPOINT_VERSION}")
    try:
        params = {k[6:]: v for k, v in files.items() if k.startswith("param/")}
        if meta["mode"] == "subspace":
            if basis is None:
                basis = Basis(files["basis/x_tilde"], files["basis/gram_tilde"],
                              files["basis/singular_values"])
            elif not np.array_equal(basis.x_tilde, files["basis/x_tilde"]):
                raise CheckpointError("supplied basis does not match the checkpoint")
            rep = InducingRepresentation(a=params["inducing"], basis=basis)
        else:
            rep = InducingRepresentation(free_z=params["inducing"])
        kernel = KernelSpec(meta["kernel"],
                            float(params.get("log_variance", 0.0)),
                            float(params.get("log_lengthscale", 0.0)))
        state = ModelState(rep, VariationalFactors(params["mu"], params["log_sigma"]),
                           params["phi"], params["bias"], kernel, meta["n_train"])
        m = {k[7:]: v for k, v in files.items() if k.startswith("adam_m/")}
        v = {k[7:]: v for k, v in files.items() if k.startswith("adam_v/")}
        moments = OptimizerMoments(m, v, meta["adam_step"]) if m else None
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is incomplete: {exc}") from exc
    return Checkpoint(state, moments, meta["epoch"], meta["history"], meta["rng_state"],
                      meta["config"])


# ---------------------------------------------------------------------------
# training loop


def _basis_for(config, data, x_tilde=None):
    if x_tilde is None:
        return build_basis(data.features, config.rank, config.precompute_cross, config.seed)
    cross = np.asarray(data.features @ x_tilde.T) if config.precompute_cross else None
    return Basis(x_tilde, x_tilde @ x_tilde.T, np.ones(x_tilde.shape[0]), None, cross)


def train(config, data, rng=None, basis=None, checkpoint_path=None, log_path=None,
          resume=None):
    """Run ``config.epochs`` epochs of Adam ascent on the stochastic bound.

    Parameters
    ----------
    config : TrainConfig
    data : Dataset
    rng : numpy Generator, optional
        Defaults to ``default_rng(config.seed)``.
    basis : Basis, optional
        Built from ``data`` when omitted.
    checkpoint_path : path, optional
        Written every ``config.checkpoint_every`` epochs and at the end.
    log_path : path, optional
        One JSON record per step (epoch, step, bound, wall_time).
    resume : Checkpoint or path, optional
        Continue from a checkpoint written at an epoch boundary.

    Returns
    -------
    state : ModelState
    history : list of float
        Mean stochastic bound of each epoch.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if isinstance(resume, (str, bytes)) or hasattr(resume, "__fspath__"):
        resume = load_checkpoint(resume, basis)

    if resume is not None:
        state, moments = resume.state, resume.moments
        if state.rep.is_subspace and basis is None:
            basis = _basis_for(config, data, state.rep.basis.x_tilde)
            state = ModelState(InducingRepresentation(a=state.rep.a, basis=basis),
                               state.factors, state.phi, state.bias, state.kernel, state.n_train)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start, history = resume.epoch, list(resume.history)
    else:
        if basis is None:
            basis = _basis_for(config, data)
        state = init_state(config, data, basis, rng)
        moments = None
        start, history = 0, []
    if moments is None:
        moments = OptimizerMoments.zeros_like(state.params())

    rule = gauss_hermite(config.quadrature_order)
    neg = config.resolved_neg_size(data.n_labels)
    batch_size = min(config.batch_size, data.n)
    batch_basis = basis if state.rep.is_subspace else None
    good = (state, moments)
    failures = 0
    log = open(log_path, "a", encoding="utf-8") if log_path else None

    def _checkpoint(epoch):
        if checkpoint_path:
            save_checkpoint(checkpoint_path, good[0], good[1], epoch, history,
                            rng.bit_generator.state, config.to_dict())

    try:
        for epoch in range(start, config.epochs):
            values = []
            for batch in epoch_batches(data, batch_size, neg, rng, batch_basis,
                                       config.iid_batches):
                t0 = time.perf_counter()
                try:
                    value, grads = gradient(state, batch, data.n, rule)
                    state, moments = adam_step(state, grads, moments, config)
                except NumericError as exc:
                    failures += 1
                    logger.warning("step %d failed (%s)", moments.step + 1, exc)
                    state, moments = good
                    if failures >= config.max_failures:
                        _checkpoint(epoch)
                        raise TrainingAborted(
                            f"{failures} consecutive numeric failures; last error: {exc}",
                            checkpoint_path) from exc
                    continue
                failures = 0
                good = (state, moments)
                values.append(value)
                if log is not None:
                    log.write(json.dumps({"epoch": epoch, "step": moments.step, "bound": value,
                                          "wall_time": time.perf_counter() - t0}) + "\n")
            history.append(float(np.mean(values)) if values else float("nan"))
            logger.info("epoch %d: mean bound %.6g", epoch, history[-1])
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                _checkpoint(epoch + 1)
        _checkpoint(max(config.epochs, start))
    finally:
        if log is not None:
            log.close()
    return state, history
