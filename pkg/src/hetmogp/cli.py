"""Command-line interface: ``hetmogp {generate,fit,predict,evaluate,compare}``.

Exit codes are 0 on success, 1 on a runtime failure and 2 on a usage
error. Every command is reproducible bit for bit given its seed; wall-clock
times are kept out of the result records and written to ``timing.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from ._linalg import CholeskyError
from .data_io import (DataFormatError, GapConfig, ensure_dir, gap_experiment, load, load_model,
                      save, save_model, write_truth)
from .experiment import GapProtocol, evaluate_models, fit_independent, fit_joint, substream
from .prediction import predict
from .quadrature import MAX_ORDER, gh_rule
from .training import TrainConfig, TrainingError

RUNTIME_ERRORS = (DataFormatError, TrainingError, CholeskyError, ValueError, OSError, KeyError,
                  RuntimeError, MemoryError)


class UsageError(Exception):
    """Bad flag values that argparse cannot catch on its own."""


# -- argument parsing -------------------------------------------------------

def _interval(text):
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from None
    if not lo < hi:
        raise argparse.ArgumentTypeError(f"empty interval {text!r}")
    return lo, hi


def _grid(text):
    parts = text.split(":")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
        if len(parts) != 3:
            raise ValueError
    except (ValueError, IndexError):
        raise argparse.ArgumentTypeError(f"expected lo:hi:n, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("grid needs at least one point")
    return lo, hi, n


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _non_negative(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _add_common(p, out_required=True):
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file with option defaults; flags take precedence")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_training(p, default_m):
    p.add_argument("--q", type=_positive, default=3, help="number of latent processes")
    p.add_argument("--m", type=_positive, default=default_m, help="number of inducing inputs")
    p.add_argument("--optimizer", choices=("full_batch", "stochastic"), default="full_batch")
    p.add_argument("--batch-size", type=_positive, default=500)
    p.add_argument("--max-iters", type=_non_negative, default=None,
                   help="stochastic iterations, or the per-step cap of the full-batch optimiser")
    p.add_argument("--em-cycles", type=_non_negative, default=None)
    p.add_argument("--quad-order", type=_positive, default=20)
    p.add_argument("--fixed-z", action="store_true", help="do not optimise the inducing inputs")
    p.add_argument("--shared-lengthscale", action="store_true",
                   help="one lengthscale per kernel instead of one per input dimension")


def _add_gap(p):
    p.add_argument("--experiment", choices=("gap",), default="gap")
    p.add_argument("--n1", type=_positive, default=GapConfig.n1)
    p.add_argument("--n2", type=_positive, default=GapConfig.n2)
    p.add_argument("--gap", type=_interval, default=GapConfig.gap)
    p.add_argument("--n-test", type=_positive, default=GapConfig.n_test)


def build_parser():
    parser = argparse.ArgumentParser(prog="hetmogp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic missing-gap dataset")
    _add_common(g)
    _add_gap(g)

    f = sub.add_parser("fit", help="train a model on a dataset manifest")
    _add_common(f)
    f.add_argument("--manifest", required=True)
    f.add_argument("--independent", action="store_true", help="one single-output model per output")
    _add_training(f, default_m=100)

    pr = sub.add_parser("predict", help="write predictive means and variances")
    _add_common(pr)
    pr.add_argument("--model", required=True, nargs="+", help="model file(s) or a fit output directory")
    src = pr.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="test manifest; adds log densities")
    src.add_argument("--grid", type=_grid, help="lo:hi:n grid for one-dimensional inputs")
    pr.add_argument("--quad-order", type=_positive, default=20)

    e = sub.add_parser("evaluate", help="test NLPD of a fitted model")
    _add_common(e, out_required=False)
    e.add_argument("--model", required=True, nargs="+", help="model file(s) or a fit output directory")
    e.add_argument("--manifest", required=True)
    e.add_argument("--per-output", action="store_true")
    e.add_argument("--quad-order", type=_positive, default=20)

    c = sub.add_parser("compare", help="joint vs independent models on the gap experiment")
    _add_common(c)
    _add_gap(c)
    _add_training(c, default_m=GapProtocol.M)
    return parser, sub.choices


def parse_args(argv):
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            parser.error(f"cannot read --config {args.config}: {err}")
        if not isinstance(raw, dict):
            parser.error("--config must hold a JSON object")
        sub = commands[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(k.replace("-", "_") for k in raw) - known)
        if unknown:
            parser.error(f"unknown keys in --config: {', '.join(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in raw.items()})
        args = parser.parse_args(argv)
    return args


# -- helpers ---------------------------------------------------------------

def _json_value(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    if isinstance(v, (np.floating,)):
        return _json_value(float(v))
    if isinstance(v, np.ndarray):
        return [_json_value(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    if isinstance(v, dict):
        return {k: _json_value(x) for k, x in v.items()}
    return v


def _write_json(path, obj):
    Path(path).write_text(json.dumps(_json_value(obj), indent=2) + "\n")


def _train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    cfg = replace(base or TrainConfig(), optimizer=args.optimizer, batch_size=args.batch_size,
                  quad_order=args.quad_order, seed=args.seed, optimize_z=not args.fixed_z)
    if args.em_cycles is not None:
        cfg = replace(cfg, em_cycles=args.em_cycles)
    if args.max_iters is not None:
        if cfg.optimizer == "stochastic":
            cfg = replace(cfg, max_iters=args.max_iters)
        else:
            cfg = replace(cfg, e_steps=min(cfg.e_steps, args.max_iters),
                          m_steps=min(cfg.m_steps, args.max_iters))
    return cfg


def _gap_config(args) -> GapConfig:
    return GapConfig(n1=args.n1, n2=args.n2, gap=tuple(args.gap), n_test=args.n_test)


def _check_quad_order(order):
    if order > MAX_ORDER:
        raise UsageError(f"--quad-order must be at most {MAX_ORDER}")


def _resolve_models(paths):
    """Model files from explicit paths or a ``fit`` output directory."""
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            record = p / "fit.json"
            if not record.exists():
                raise DataFormatError(f"{p} is a directory without fit.json")
            files += [p / name for name in json.loads(record.read_text())["model_files"]]
        else:
            files.append(p)
    return [load_model(f) for f in files]


def _check_models_match(models, likelihoods):
    names = [lik.name for lik in likelihoods]
    if len(models) == 1 and [l.name for l in models[0].likelihoods] == names:
        return
    if len(models) == len(names) and all(
            [l.name for l in m.likelihoods] == [n] for m, n in zip(models, names)):
        return
    got = [[l.name for l in m.likelihoods] for m in models]
    raise DataFormatError(f"model likelihoods {got} do not match the manifest's {names}")


def _fmt_nlpd(v):
    return "nan" if not np.isfinite(v) else f"{100 * v:.4f}"


# -- commands --------------------------------------------------------------

def cmd_generate(args):
    out = ensure_dir(args.out)
    cfg = _gap_config(args)
    train, test, truth = gap_experiment(cfg, substream(args.seed, "data"))
    save(train, out / "train.json", prefix="train_")
    save(test, out / "test.json", prefix="test_")
    write_truth(truth, train, test, out)
    _write_json(out / "run.json", {"command": "generate", "experiment": args.experiment,
                                   "seed": args.seed, "config": cfg.to_dict()})
    print(f"wrote {sum(train.sizes)} training and {sum(test.sizes)} test points to {out}")
    return 0


def cmd_fit(args):
    _check_quad_order(args.quad_order)
    out = ensure_dir(args.out)
    _, data = load(args.manifest)
    cfg = _train_config(args)
    ard = not args.shared_lengthscale
    t0 = time.perf_counter()
    if args.independent:
        files = [f"model_{name}.json" for name in data.names]
        traces = [str(out / f"trace_{name}.jsonl") for name in data.names]
        result = fit_independent(data, args.q, args.m, cfg, args.seed, ard=ard, trace_paths=traces)
    else:
        files = ["model.json"]
        result = fit_joint(data, args.q, args.m, replace(cfg, trace_path=str(out / "trace.jsonl")),
                           args.seed, ard=ard)
    elapsed = 1000 * (time.perf_counter() - t0)
    for model, name in zip(result.models, files):
        save_model(model, out / name)
    _write_json(out / "fit.json", {
        "command": "fit", "seed": args.seed, "mode": "independent" if args.independent else "joint",
        "manifest": str(args.manifest), "Q": args.q, "M": args.m, "model_files": files,
        "elbo_initial": result.elbo_initial, "elbo_final": result.elbo_final,
        "train_config": cfg.to_dict() | {"trace_path": None}})
    _write_json(out / "timing.json", {"wall_time_ms": elapsed})
    print(f"ELBO {result.elbo_initial:.4f} -> {result.elbo_final:.4f}; models in {out}")
    return 0


def cmd_predict(args):
    _check_quad_order(args.quad_order)
    out = ensure_dir(args.out)
    models = _resolve_models(args.model)
    rule = gh_rule(args.quad_order)
    if args.manifest:
        _, data = load(args.manifest)
        _check_models_match(models, data.likelihoods)
        X, Y, names = data.X, data.Y, data.names
    else:
        lo, hi, n = args.grid
        p = models[0].input_dim
        if p != 1:
            raise UsageError(f"--grid needs one-dimensional inputs, model has {p}")
        grid = np.linspace(lo, hi, n)[:, None]
        D = len(models[0].likelihoods) if len(models) == 1 else len(models)
        X, Y, names = [grid] * D, None, [f"output{d + 1}" for d in range(D)]
    preds = []
    if len(models) == 1:
        preds = list(predict(models[0], X, rule, Y_star=Y))
    else:
        for d, model in enumerate(models):
            preds += list(predict(model, [X[d]], rule, Y_star=None if Y is None else [Y[d]]))
    for name, pred in zip(names, preds):
        cols = [pred.mean, pred.variance] + ([pred.log_density] if pred.log_density is not None else [])
        header = ["mean", "variance"] + (["log_density"] if pred.log_density is not None else [])
        _write_prediction(out / f"pred_{name}.csv", pred.X, cols, header)
    print(f"wrote predictions for {len(preds)} outputs to {out}")
    return 0


def _write_prediction(path, X, cols, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(X.shape[1])] + header)
        for r in range(X.shape[0]):
            w.writerow([repr(float(v)) for v in X[r]] + [repr(float(c[r])) for c in cols])


def cmd_evaluate(args):
    _check_quad_order(args.quad_order)
    models = _resolve_models(args.model)
    _, test = load(args.manifest)
    _check_models_match(models, test.likelihoods)
    t0 = time.perf_counter()
    pooled, per = evaluate_models(models, test, gh_rule(args.quad_order))
    elapsed = 1000 * (time.perf_counter() - t0)
    print("Test-NLPD (x10^-2)")
    if args.per_output:
        for name, v in zip(test.names, per):
            print(f"{name:<12s} {_fmt_nlpd(v)}")
    print(f"{'Global':<12s} {_fmt_nlpd(pooled)}")
    if args.out:
        out = ensure_dir(args.out)
        _write_json(out / "result.json", {
            "command": "evaluate", "seed": args.seed, "nlpd_global": pooled,
            "nlpd_per_output": per, "output_names": test.names, "elbo_final": None})
        _write_json(out / "timing.json", {"wall_time_ms": elapsed})
    return 0


def cmd_compare(args):
    _check_quad_order(args.quad_order)
    out = ensure_dir(args.out)
    t0 = time.perf_counter()
    gap_cfg = _gap_config(args)
    train, test, truth = gap_experiment(gap_cfg, substream(args.seed, "data"))
    save(train, out / "train.json", prefix="train_")
    save(test, out / "test.json", prefix="test_")
    write_truth(truth, train, test, out)
    cfg = _train_config(args, GapProtocol().train)
    ard = not args.shared_lengthscale
    rule = gh_rule(args.quad_order)
    joint = fit_joint(train, args.q, args.m, cfg, args.seed, ard=ard)
    indep = fit_independent(train, args.q, args.m, cfg, args.seed, ard=ard)
    save_model(joint.models[0], out / "model_joint.json")
    for name, model in zip(train.names, indep.models):
        save_model(model, out / f"model_independent_{name}.json")
    rows = {}
    for label, res in (("joint", joint), ("independent", indep)):
        pooled, per = evaluate_models(res.models, test, rule)
        rows[label] = {"nlpd_global": pooled, "nlpd_per_output": per, "elbo_final": res.elbo_final}
    _write_json(out / "result.json", {"command": "compare", "seed": args.seed,
                                      "output_names": train.names, "Q": args.q, "M": args.m,
                                      "gap": gap_cfg.to_dict(), "train_config": cfg.to_dict(),
                                      **rows})
    _write_json(out / "timing.json", {"wall_time_ms": 1000 * (time.perf_counter() - t0)})
    print("Test-NLPD (x10^-2)")
    print(f"{'model':<12s} " + " ".join(f"{n:>10s}" for n in train.names) + f" {'Global':>10s}")
    for label in ("joint", "independent"):
        r = rows[label]
        print(f"{label:<12s} " + " ".join(f"{_fmt_nlpd(v):>10s}" for v in r["nlpd_per_output"])
              + f" {_fmt_nlpd(r['nlpd_global']):>10s}")
    return 0


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "compare": cmd_compare}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"hetmogp {args.command}: error: {err}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as err:
        print(f"hetmogp {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
