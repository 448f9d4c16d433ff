"""Command-line front end: ``optmrf <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 numerical failure (including a
failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shlex
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import imaging
from .inner import InnerSolveConfig, denoise
from .linsolve import SingularSystemError
from .model import FoEModel, build_dct_basis, load_model, save_model
from .trainer import (TrainConfig, TrainHistory, TrainingError, TrainingSample, dataset_gradients,
                      evaluate_loss, finite_difference_gradients, relative_error, train)

log = logging.getLogger("optmrf")

EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# -- output helpers -----------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, invocation, header, rows):
    """CSV with a leading ``# invocation:`` comment and a header row."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# invocation: {invocation}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _clean_images(directory):
    paths = sorted(Path(directory).glob("*.pgm"))
    if not paths:
        raise UsageError(f"no .pgm images in {directory}")
    return paths


def _load_input(path):
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path, allow_pickle=False).astype(float)
    return imaging.load_pgm(path)


def _inner(eps, max_iters):
    return InnerSolveConfig(epsilon_l=eps, max_iters=max_iters)


def _train_config(args, eps_l=None):
    return TrainConfig(inner=_inner(args.eps_l if eps_l is None else eps_l, args.inner_max_iters),
                       outer_max_iters=args.outer_max, outer_rel_tol=args.outer_tol,
                       adjoint_tol=args.adjoint_tol, seed=args.seed,
                       warm_start=args.warm_start, workers=args.workers)


def _test_psnr(model, paths, sigma, seed, inner, clamp=False):
    """Per-image (noisy PSNR, denoised PSNR); image ``k`` uses noise stream ``k``."""
    out = []
    for k, path in enumerate(paths):
        g = imaging.load_pgm(path)
        f = imaging.add_gaussian_noise(g, sigma, seed, stream=k)
        x = denoise(model, f, sigma, inner)
        if clamp:
            x = np.clip(x, 0, 255)
        out.append((imaging.psnr(f, g), imaging.psnr(x, g)))
    return out


# -- commands -------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        imaging.save_pgm(out / f"{args.prefix}{k:02d}.pgm",
                         imaging.synthetic_image(args.size, args.seed + k))
    return 0


def cmd_make_dataset(args):
    sources = [Path(p) for p in args.sources]
    missing = [str(p) for p in sources if not p.is_file()]
    if missing:
        raise UsageError(f"missing source images: {', '.join(missing)}")
    images = [imaging.load_pgm(p) for p in sources]
    for p, img in zip(sources, images):
        if args.patch_size > min(img.shape):
            raise UsageError(f"patch size {args.patch_size} exceeds {p} ({img.shape[1]}x{img.shape[0]})")
    ds = imaging.make_dataset(images, args.patch_size, args.count, args.sigma, args.seed,
                              names=[str(p) for p in sources])
    path = imaging.write_dataset(ds, args.out)
    print(f"wrote {len(ds.clean)} pairs to {path}")
    return 0


def _run_training(args, eps_l, log_path=None, invocation=""):
    ds = imaging.read_dataset(args.data)
    init = FoEModel.initial(build_dct_basis(args.filter_size), args.filters, args.alpha0)
    cfg = _train_config(args, eps_l)
    model, history = train(init, ds.samples(), cfg,
                           on_iteration=lambda row: log.info("outer %d loss %.6g", row[0], row[1]))
    if log_path is not None:
        rows = [(*row[:4], row[4] if args.record_time else "") for row in history.rows]
        write_csv(log_path, invocation, TrainHistory.CSV_COLUMNS, rows)
    return ds, model, history


def cmd_train(args):
    log_path = args.log or str(Path(args.out).with_suffix(".csv"))
    _, model, history = _run_training(args, args.eps_l, log_path, args.invocation)
    save_model(args.out, model)
    print(f"termination: {history.reason} after {len(history.rows) - 1} outer iterations; "
          f"loss {history.losses[0]:.6g} -> {history.losses[-1]:.6g}")
    return 0


def cmd_sweep_tol(args):
    paths = _clean_images(args.test_dir)
    eval_inner = _inner(args.eval_eps_l, args.inner_max_iters)
    test_inner = _inner(args.test_eps_l, args.inner_max_iters)
    rows = []
    for eps in args.eps_list:
        ds, model, history = _run_training(args, eps)
        train_loss = evaluate_loss(model, ds.samples(), eval_inner)
        scores = _test_psnr(model, paths, args.sigma, args.seed, test_inner)
        rows.append((eps, train_loss, float(np.mean([s[1] for s in scores])),
                     history.losses[-1], len(history.rows) - 1, history.reason))
        log.info("eps_l %g: train loss %.6g, test psnr %.4f", eps, rows[-1][1], rows[-1][2])
        if args.models_dir:
            Path(args.models_dir).mkdir(parents=True, exist_ok=True)
            save_model(Path(args.models_dir) / f"model_eps{eps:g}.txt", model)
    write_csv(args.out, args.invocation,
              ("eps_l", "train_loss", "test_psnr", "train_loss_at_eps", "outer_iters", "reason"), rows)
    return 0


def cmd_sweep_size(args):
    paths = _clean_images(args.test_dir)
    eval_inner = _inner(args.eval_eps_l, args.inner_max_iters)
    test_inner = _inner(args.test_eps_l, args.inner_max_iters)
    rows = []
    for m in args.sizes:
        args.filter_size = m
        ds, model, history = _run_training(args, args.eps_l)
        train_loss = evaluate_loss(model, ds.samples(), eval_inner)
        scores = _test_psnr(model, paths, args.sigma, args.seed, test_inner)
        rows.append((m, train_loss, float(np.mean([s[1] for s in scores])),
                     len(history.rows) - 1, history.reason))
    write_csv(args.out, args.invocation,
              ("filter_size", "train_loss", "test_psnr", "outer_iters", "reason"), rows)
    return 0


def cmd_denoise(args):
    model = load_model(args.model)
    f = _load_input(args.input)
    if min(f.shape) < model.m:
        raise UsageError(f"image {f.shape[1]}x{f.shape[0]} is smaller than the {model.m}x{model.m} filters")
    x, report = denoise(model, f, args.sigma, _inner(args.eps_l, args.inner_max_iters),
                        return_report=True)
    if args.clamp:
        x = np.clip(x, 0, 255)
    out = Path(args.out)
    if out.suffix == ".npy":
        with open(out, "wb") as fh:
            np.save(fh, x, allow_pickle=False)
    else:
        imaging.save_pgm(out, x)
    if args.truth:
        g = imaging.load_pgm(args.truth)
        print(f"PSNR input {imaging.psnr(f, g):.4f} dB, output {imaging.psnr(x, g):.4f} dB")
    if not report.converged:
        print(f"warning: solver stopped at normalized gradient {report.final_normalized_grad:.3e} "
              f"({report.termination_reason.value})", file=sys.stderr)
    return 0


def gradcheck_instance(patch=8, filters=2, filter_size=3, sigma=25.0, seed=0, alpha=None,
                       beta_scale=None, identity=False):
    """Small training pair and model for gradient checks.

    The clean patch is cut from a toy image and noised with ``sigma``.
    The model has ``alpha_i = alpha`` (drawn from [5, 50] by default) and
    filter coefficients ``N(0, beta_scale^2)`` (``beta_scale`` defaults to
    0.3).  ``identity`` gives ``f = g`` and ``alpha = 0``.
    """
    g = imaging.synthetic_image(max(4 * patch, 32), seed)[:patch, :patch]
    basis = build_dct_basis(filter_size)
    if identity:
        return FoEModel(basis, np.eye(filters, basis.size), np.zeros(filters)), TrainingSample(g, g)
    f = imaging.add_gaussian_noise(g, sigma, seed)
    raw = imaging.standard_normal(filters * (basis.size + 1), seed, stream=7)
    u = 0.5 * (1 + np.tanh(raw[:filters]))
    a = 5 + 45 * u if alpha is None else np.full(filters, float(alpha))
    b = (0.3 if beta_scale is None else beta_scale) * raw[filters:].reshape(filters, basis.size)
    return FoEModel(basis, b, a), TrainingSample(f, g)


def cmd_gradcheck(args):
    model, sample = gradcheck_instance(args.patch, args.filters, args.filter_size, args.sigma,
                                       args.seed, args.alpha, args.beta_scale, args.identity)
    cfg = TrainConfig(inner=_inner(args.inner_tol, args.inner_max_iters), adjoint_tol=args.adjoint_tol)
    ref_cfg = TrainConfig(inner=_inner(args.fd_inner_tol, args.inner_max_iters),
                          adjoint_tol=args.adjoint_tol)
    pack = dataset_gradients(model, [sample], cfg)
    fd = finite_difference_gradients(model, [sample], ref_cfg, args.fd_eps, args.fd_order)
    err = relative_error(pack.flat, fd, atol=args.fd_atol)
    names = [f"alpha[{i}]" for i in range(model.n_filters)]
    names += [f"beta[{i},{j}]" for i in range(model.n_filters) for j in range(model.basis.size)]
    for name, a, r, e in zip(names, pack.flat, fd, err):
        print(f"{name:12s} analytic {a: .10e} fd {r: .10e} rel {e:.3e}")
    worst = int(np.argmax(err)) if err.size else 0
    max_err = float(err[worst]) if err.size else 0.0
    ok = max_err <= args.threshold
    print(f"max rel error {max_err:.3e} at {names[worst]} ({'pass' if ok else 'FAIL'})")
    return 0 if ok else EXIT_NUMERICAL


def cmd_eval(args):
    paths = _clean_images(args.images)
    model = load_model(args.model)
    scores = _test_psnr(model, paths, args.sigma, args.seed, _inner(args.eps_l, args.inner_max_iters),
                        args.clamp)
    rows = [(p.name, s[0], s[1]) for p, s in zip(paths, scores)]
    rows.append(("mean", float(np.mean([s[0] for s in scores])), float(np.mean([s[1] for s in scores]))))
    write_csv(args.out, args.invocation, ("image", "psnr_noisy", "psnr_denoised"), rows)
    print(f"mean PSNR {rows[-1][1]:.4f} dB -> {rows[-1][2]:.4f} dB")
    return 0


# -- parser -----------------------------------------------------------------------

def _add_training_flags(p):
    p.add_argument("--data", required=True, help="dataset manifest (or its directory)")
    p.add_argument("--filters", type=int, default=8)
    p.add_argument("--filter-size", type=int, default=3)
    p.add_argument("--eps-l", type=float, default=1e-5, help="lower-level tolerance")
    p.add_argument("--outer-max", type=int, default=500)
    p.add_argument("--outer-tol", type=float, default=1e-5)
    p.add_argument("--adjoint-tol", type=float, default=1e-10)
    p.add_argument("--inner-max-iters", type=int, default=5000)
    p.add_argument("--alpha0", type=float, default=0.01, help="initial filter weight")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--warm-start", action="store_true")
    p.add_argument("--record-time", action="store_true",
                   help="fill the wall_seconds log column (makes the log non-reproducible)")


def _add_test_flags(p):
    p.add_argument("--test-dir", required=True, help="directory of clean test PGMs")
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--eval-eps-l", type=float, default=1e-5,
                   help="tolerance used to measure the final training loss")
    p.add_argument("--test-eps-l", type=float, default=1e-3, help="inference tolerance")
    p.add_argument("--out", required=True)


def build_parser():
    parser = _Parser(prog="optmrf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON file of flag values (keys named like the flags)")
        p.add_argument("--preset", help="bundled config preset, e.g. full_scale_train")
        return p

    p = command("synth", cmd_synth, "write piecewise-smooth toy images")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="synth")
    p.add_argument("--out", required=True)

    p = command("make-dataset", cmd_make_dataset, "sample noisy/clean training patches")
    p.add_argument("sources", nargs="+")
    p.add_argument("--patch-size", type=int, default=24)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "train a model by bi-level optimization")
    _add_training_flags(p)
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--log", help="training CSV (default: model path with .csv)")

    p = command("sweep-tol", cmd_sweep_tol, "train once per lower-level tolerance")
    _add_training_flags(p)
    _add_test_flags(p)
    p.add_argument("--eps-list", type=_float_list, default=[1e-1, 1e-2, 1e-3, 1e-4, 1e-5])
    p.add_argument("--models-dir", help="also write each trained model here")

    p = command("sweep-size", cmd_sweep_size, "train once per filter size")
    _add_training_flags(p)
    _add_test_flags(p)
    p.add_argument("--sizes", type=_int_list, default=[3, 5, 7])

    p = command("denoise", cmd_denoise, "MAP-denoise one image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="noisy PGM or .npy")
    p.add_argument("--out", required=True, help="output PGM (or .npy for unclamped values)")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--eps-l", type=float, default=1e-3)
    p.add_argument("--inner-max-iters", type=int, default=5000)
    p.add_argument("--clamp", action="store_true", help="clamp the result to [0, 255]")
    p.add_argument("--truth", help="clean PGM; prints PSNR")

    p = command("gradcheck", cmd_gradcheck, "compare loss gradients with finite differences")
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--filters", type=int, default=2)
    p.add_argument("--filter-size", type=int, default=3)
    p.add_argument("--inner-tol", type=float, default=1e-10)
    p.add_argument("--fd-inner-tol", type=float, default=1e-10,
                   help="lower-level tolerance inside the finite-difference reference")
    p.add_argument("--adjoint-tol", type=float, default=1e-10)
    p.add_argument("--inner-max-iters", type=int, default=5000)
    p.add_argument("--fd-eps", type=float, default=1e-4)
    p.add_argument("--fd-order", type=int, choices=(2, 4), default=4)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--fd-atol", type=float, default=1e-9,
                   help="absolute differences at or below this count as exact agreement")
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta-scale", type=float)
    p.add_argument("--identity", action="store_true", help="f = g and alpha = 0")

    p = command("eval", cmd_eval, "denoise a directory of noised clean images, report PSNR")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True, help="directory of clean PGMs")
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--eps-l", type=float, default=1e-3)
    p.add_argument("--inner-max-iters", type=int, default=5000)
    p.add_argument("--clamp", action="store_true")
    p.add_argument("--out", required=True)
    return parser, sub


def preset_path(name) -> Path:
    path = resources.files("optmrf") / "presets" / f"{name}.json"
    if not path.is_file():
        raise UsageError(f"unknown preset {name!r}")
    return Path(str(path))


def _config_defaults(subparser, path):
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    known = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in data.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("config", "preset", "func"):
            raise UsageError(f"unknown config key {key!r} in {path}")
        action = known[dest]
        if action.type is not None and isinstance(value, str):
            value = action.type(value)
        defaults[dest] = value
        action.required = False
    return defaults


def parse_args(argv):
    parser, sub = build_parser()
    # precedence: flags > config file > defaults.  The config is read before
    # the full parse so it can supply flags that are otherwise required.
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("--preset")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in sub.choices), None)
    config = known.config or (preset_path(known.preset) if known.preset else None)
    if config and command:
        subparser = sub.choices[command]
        subparser.set_defaults(**_config_defaults(subparser, config))
    args = parser.parse_args(argv)
    args.invocation = "optmrf " + shlex.join(argv)
    return args


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"optmrf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, imaging.PGMError, FileNotFoundError) as exc:
        print(f"optmrf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, SingularSystemError, FloatingPointError) as exc:
        print(f"optmrf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
