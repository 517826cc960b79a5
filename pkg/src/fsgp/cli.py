"""``fsgp`` command line: basis, train, eval, predict, grad-check, synth, bench.

Exit status: 0 success, 1 usage, 2 I/O, 3 numeric failure. ``FSGP_NUM_THREADS``
caps the BLAS thread pool. Every command writes a JSON run manifest holding
the effective configuration, paths, artifact hashes and headline metrics;
passing that manifest back as ``--config`` reruns with the same settings.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from .basis import build_basis, load_basis, save_basis
from .bench import run_bench
from .bound import finite_diff_check
from .data import load_dataset, make_minibatch, save_dataset
from .errors import NumericError, ParseError
from .kernels import KernelSpec
from .predict import evaluate, predict_utilities, top_k_labels
from .synth import SynthSpec, generate
from .trainer import TrainConfig, init_state, load_checkpoint, train

__all__ = ["main", "run", "EXIT_OK", "EXIT_USAGE", "EXIT_IO", "EXIT_NUMERIC"]

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "FSGP_NUM_THREADS"
MANIFEST_VERSION = 1

logger = logging.getLogger("fsgp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag name -> TrainConfig field
_TRAIN_FLAGS = {
    "latents": "latents", "inducing": "inducing", "rank": "rank", "batch": "batch_size",
    "neg": "neg_size", "epochs": "epochs", "lr": "learning_rate", "kernel": "kernel",
    "mode": "mode", "seed": "seed", "quadrature": "quadrature_order",
    "checkpoint_every": "checkpoint_every", "precompute_cross": "precompute_cross",
    "iid_batches": "iid_batches",
}


def _parser():
    p = _Parser(prog="fsgp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fsgp {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp_, out_help):
        sp_.add_argument("--out", help=out_help)
        sp_.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
        sp_.add_argument("--config", help="JSON config file or a previous run manifest")

    b = sub.add_parser("basis", help="truncated SVD basis of a dataset")
    b.add_argument("--data", required=True)
    b.add_argument("--rank", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--precompute-cross", action=argparse.BooleanOptionalAction, default=None)
    b.add_argument("--method", choices=("auto", "dense", "lanczos", "randomized"))
    common(b, "basis archive (.npz)")

    t = sub.add_parser("train", help="fit the model with Adam")
    t.add_argument("--data", required=True)
    t.add_argument("--basis", help="precomputed basis archive")
    t.add_argument("--latents", type=int)
    t.add_argument("--inducing", type=int)
    t.add_argument("--rank", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--neg", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--kernel", choices=("linear", "se"))
    t.add_argument("--mode", choices=("subspace", "free-z"))
    t.add_argument("--seed", type=int)
    t.add_argument("--quadrature", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--precompute-cross", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--iid-batches", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--log", help="JSON-lines step log")
    t.add_argument("--resume", help="checkpoint to continue from")
    common(t, "checkpoint archive (.npz)")

    e = sub.add_parser("eval", help="precision@k of a checkpoint on a test file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--ks", help="comma-separated cutoffs (default: those of 1,3,5 not above K)")
    e.add_argument("--json", action="store_true", help="print JSON instead of key=value")
    common(e, "report file")

    pr = sub.add_parser("predict", help="top-k labels per instance")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--k", type=int, default=5)
    pr.add_argument("--scores", action="store_true", help="append label:score pairs")
    common(pr, "prediction file (default: stdout)")

    g = sub.add_parser("grad-check", help="finite-difference check of the bound gradient")
    g.add_argument("--data", help="dataset (default: tiny synthetic instance)")
    g.add_argument("--latents", type=int, default=2)
    g.add_argument("--inducing", type=int, default=4)
    g.add_argument("--rank", type=int, default=3)
    g.add_argument("--batch", type=int, default=None)
    g.add_argument("--kernel", choices=("linear", "se"), default="linear")
    g.add_argument("--mode", choices=("subspace", "free-z"), default="subspace")
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    common(g, "report file")

    s = sub.add_parser("synth", help="sample a dataset from the generative model")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--d", type=int, default=20)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--p-true", type=int, default=3)
    s.add_argument("--kernel", choices=("linear", "se"), default="linear")
    s.add_argument("--phi-scale", type=float, default=1.0)
    s.add_argument("--bias-low", type=float, default=-2.0)
    s.add_argument("--bias-high", type=float, default=0.0)
    s.add_argument("--density", type=float, default=0.3)
    s.add_argument("--feature-decay", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--truth", help="also write F, phi, bias to this .npz")
    common(s, "dataset text file (default: stdout)")

    bn = sub.add_parser("bench", help="subspace vs free-Z timings")
    bn.add_argument("--data", help="dataset (default: random sparse problem)")
    bn.add_argument("--n", type=int, default=1000)
    bn.add_argument("--d", type=int, default=1000)
    bn.add_argument("--pad-to", type=int, help="zero-pad D to this width")
    bn.add_argument("--k", type=int, default=20)
    bn.add_argument("--latents", type=int, default=1)
    bn.add_argument("--inducing", type=int, default=200)
    bn.add_argument("--rank", type=int, default=50)
    bn.add_argument("--batch", type=int, default=200)
    bn.add_argument("--kernel", choices=("linear", "se"), default="linear")
    bn.add_argument("--repeats", type=int, default=5)
    bn.add_argument("--seed", type=int, default=0)
    common(bn, "JSON report file")
    return p


# ---------------------------------------------------------------------------
# helpers


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_config(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        cfg = json.load(f)
    if isinstance(cfg, dict) and "manifest_version" in cfg:
        cfg = cfg.get("config", {})
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def _resolve(args, defaults, flag_map, file_cfg):
    """Effective settings: flags > config file > defaults."""
    cfg = dict(defaults)
    for key, value in file_cfg.items():
        if key not in cfg:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = value
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _train_config(args):
    defaults = {f.name: f.default for f in fields(TrainConfig)}
    cfg = _resolve(args, defaults, _TRAIN_FLAGS, _read_config(args.config))
    try:
        return TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


class _Manifest(dict):
    def __init__(self, command, argv):
        super().__init__(manifest_version=MANIFEST_VERSION, fsgp_version=__version__,
                         command=command, argv=list(argv), config={}, paths={}, hashes={},
                         metrics={})

    def path(self, role, path):
        if path:
            self["paths"][role] = os.path.abspath(path)

    def write(self, args):
        target = args.manifest
        if not target:
            target = f"{args.out}.manifest.json" if args.out else f"fsgp-{self['command']}.manifest.json"
        for role, path in self["paths"].items():
            if os.path.isfile(path):
                self["hashes"][role] = _sha256(path)
        tmp = f"{target}.tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(self, f, indent=2, sort_keys=True, default=_json_default)
        os.replace(tmp, target)
        return target


def _emit(text, out):
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text if text.endswith("\n") else text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# commands


def _cmd_basis(args, man):
    cfg = _resolve(args, {"rank": 100, "seed": 0, "precompute_cross": False, "method": "auto"},
                   {"rank": "rank", "seed": "seed", "precompute_cross": "precompute_cross",
                    "method": "method"}, _read_config(args.config))
    if not args.out:
        raise UsageError("basis: --out is required")
    data = load_dataset(args.data)
    basis = build_basis(data.features, cfg["rank"], cfg["precompute_cross"], cfg["seed"],
                        cfg["method"])
    save_basis(basis, args.out)
    man["config"] = cfg
    man.path("data", args.data)
    man.path("basis", args.out)
    man["metrics"] = {"rank": basis.rank, "rank_deficient": bool(basis.rank_deficient),
                      "top_singular_value": float(basis.singular_values[0])}
    print(f"rank={basis.rank} dim={basis.dim} rank_deficient={basis.rank_deficient}")


def _cmd_train(args, man):
    config = _train_config(args)
    if not args.out:
        raise UsageError("train: --out is required")
    data = load_dataset(args.data)
    basis = load_basis(args.basis) if args.basis else None
    if basis is not None and basis.dim != data.d:
        raise UsageError(f"basis dimension {basis.dim} != data D={data.d}")
    if basis is not None and basis.cross_gram is not None and basis.cross_gram.shape[0] != data.n:
        raise UsageError(f"basis cross_gram has {basis.cross_gram.shape[0]} rows, data N={data.n}")
    state, history = train(config, data, basis=basis, checkpoint_path=args.out,
                           log_path=args.log, resume=args.resume)
    man["config"] = config.to_dict()
    for role in ("data", "basis", "resume", "log"):
        man.path(role, getattr(args, role))
    man.path("checkpoint", args.out)
    man["metrics"] = {"history": history, "final_bound": history[-1] if history else None}
    for i, h in enumerate(history):
        print(f"epoch={i} bound={h:.10g}")
    print(f"checkpoint={args.out}")


def _cmd_eval(args, man):
    try:
        ks = sorted({int(k) for k in args.ks.split(",") if k.strip()}) if args.ks else None
    except ValueError as exc:
        raise UsageError(f"--ks must be comma-separated integers: {args.ks}") from exc
    ck = load_checkpoint(args.checkpoint)
    test = load_dataset(args.test)
    if ks is None:
        ks = [k for k in (1, 3, 5) if k <= test.n_labels]
    try:
        report = evaluate(ck.state, test, ks, {"checkpoint": os.path.basename(args.checkpoint)})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    man["config"] = {"ks": ks}
    man.path("checkpoint", args.checkpoint)
    man.path("test", args.test)
    man["metrics"] = {f"P@{k}": v for k, v in report.precision.items()}
    _emit(report.to_json() if args.json else report.to_text(), args.out)
    man.path("report", args.out)


def _cmd_predict(args, man):
    ck = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    if not 1 <= args.k <= ck.state.phi.shape[0]:
        raise UsageError(f"--k must lie in [1, {ck.state.phi.shape[0]}]")
    try:
        scores = predict_utilities(ck.state, data.features)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    top = top_k_labels(scores, args.k)
    lines = []
    for i, row in enumerate(top):
        if args.scores:
            lines.append(" ".join(f"{j}:{scores[i, j]!r}" for j in row))
        else:
            lines.append(" ".join(str(j) for j in row))
    _emit("\n".join(lines), args.out)
    man["config"] = {"k": args.k, "scores": args.scores}
    man.path("checkpoint", args.checkpoint)
    man.path("data", args.data)
    man.path("predictions", args.out)


def tiny_instance(seed=0, kernel="linear"):
    """Default grad-check problem: N=12, D=6, K=3."""
    data, *_ = generate(SynthSpec(n=12, d=6, k=3, p_true=2, kernel=KernelSpec(kernel),
                                  density=0.6, seed=seed))
    return data


def _cmd_grad_check(args, man):
    data = load_dataset(args.data) if args.data else tiny_instance(args.seed, args.kernel)
    config = TrainConfig(latents=args.latents, inducing=args.inducing, rank=args.rank,
                         kernel=args.kernel, mode=args.mode, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    basis = build_basis(data.features, config.rank, True, config.seed)
    state = init_state(config, data, basis, rng)
    # move off the symmetric init so every block has a generic gradient
    params = state.params()
    state = state.with_params({
        "mu": rng.normal(0, 0.5, params["mu"].shape),
        "log_sigma": rng.normal(-0.5, 0.3, params["log_sigma"].shape),
    })
    bsz = min(args.batch or data.n, data.n)
    rows = np.sort(rng.choice(data.n, bsz, replace=False))
    batch = make_minibatch(data, rows, basis=basis if state.rep.is_subspace else None)
    report = finite_diff_check(state, batch, step=args.step, n_total=data.n)
    man["config"] = {k: getattr(args, k) for k in
                     ("latents", "inducing", "rank", "batch", "kernel", "mode", "step", "tol", "seed")}
    man.path("data", args.data)
    man["metrics"] = {"errors": report.errors, "passed": report.passed(args.tol)}
    lines = report.lines() + [f"max_error={report.max_error:.3e}",
                              f"passed={report.passed(args.tol)}"]
    _emit("\n".join(lines), args.out)
    man.path("report", args.out)
    if not report.passed(args.tol):
        raise NumericError(f"gradient check failed for {report.flagged(args.tol)}", "grad-check")


def _cmd_synth(args, man):
    spec = SynthSpec(n=args.n, d=args.d, k=args.k, p_true=args.p_true,
                     kernel=KernelSpec(args.kernel), phi_scale=args.phi_scale,
                     bias_range=(args.bias_low, args.bias_high), density=args.density,
                     feature_decay=args.feature_decay, seed=args.seed)
    data, f, phi, bias = generate(spec)
    if args.out:
        save_dataset(data, args.out)
    else:
        from .data import dump_xc_dataset
        dump_xc_dataset(data, sys.stdout)
    if args.truth:
        from ._io import atomic_savez
        atomic_savez(args.truth, {"utilities": f, "phi": phi, "bias": bias})
    cfg = asdict(spec)
    cfg["kernel"] = asdict(spec.kernel)
    man["config"] = cfg
    man.path("dataset", args.out)
    man.path("truth", args.truth)
    man["metrics"] = {"n_positives": int(data.label_indices.size)}


def _cmd_bench(args, man):
    kw = dict(k=args.k, latents=args.latents, inducing=args.inducing, rank=args.rank,
              batch_size=args.batch, kernel=args.kernel, repeats=args.repeats, seed=args.seed)
    if args.data:
        from .bench import time_evaluations, zero_pad
        data = load_dataset(args.data)
        if args.pad_to:
            data = zero_pad(data, args.pad_to)
        kw.pop("k")
        report = time_evaluations(data, **kw)
    else:
        report = run_bench(n=args.n, d=args.d, pad_to=args.pad_to, **kw)
    man["config"] = {**kw, "n": args.n, "d": args.d, "pad_to": args.pad_to}
    man.path("data", args.data)
    man["metrics"] = report
    lines = [f"{mode}.{k}={v:.6g}" for mode in ("subspace", "free_z", "ratio")
             for k, v in report[mode].items()]
    _emit("\n".join(lines), None)
    if args.out:
        _emit(json.dumps(report, indent=2, sort_keys=True), args.out)
        man.path("report", args.out)


_COMMANDS = {"basis": _cmd_basis, "train": _cmd_train, "eval": _cmd_eval,
             "predict": _cmd_predict, "grad-check": _cmd_grad_check, "synth": _cmd_synth,
             "bench": _cmd_bench}


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError as exc:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {value!r}") from exc
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(argv=None):
    """Run one command; returns the exit status instead of exiting."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    man = _Manifest(args.command, argv)
    status = EXIT_OK
    try:
        with _thread_limit():
            _COMMANDS[args.command](args, man)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        man["metrics"]["error"] = str(exc)
        status = EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        # ParseError and CheckpointError land here
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, (OSError, ParseError)) else EXIT_USAGE
    try:
        man.write(args)
    except OSError as exc:
        print(f"error: cannot write manifest: {exc}", file=sys.stderr)
        return status or EXIT_IO
    return status


def main(argv=None):
    sys.exit(run(argv))
