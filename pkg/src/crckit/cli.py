"""Command-line entry point: ``crckit {synth,bench,classify,gridsearch,formats}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .classifiers import METHODS, PATCH_METHODS
from .datasets import SyntheticSpec, read_fmx, read_pgm, synth_dataset, write_manifest
from .harness import RunConfig, emit_report, grid_search, resolve_dataset, run_benchmark

FORMATS_TEXT = """\
FMX1 feature matrix (binary, little-endian)
  offset 0   4 bytes   magic "FMX1"
  offset 4   uint32    d  (rows, feature dimension, >= 1)
  offset 8   uint32    N  (columns, samples, >= 1)
  offset 12  d*N f64   values in column-major order (column s = sample s)

labels CSV
  header "index,label", then one "<sample index>,<class index>" row per sample,
  indices 0..N-1 in order, class indices 0..c-1

PGM images
  binary P5 only, maxval <= 65535 (16-bit samples big-endian); read as value/maxval

manifest (JSON)
  {
    "name": str,
    "classes": [str, ...],
    "source": "images" | "features",
    "labels_path": "labels.csv",
    "features_path": "features.fmx",        (source = features)
    "images": ["images/0000.pgm", ...],     (source = images, one per label row)
    "image_shape": [h, w],                  (optional)
    "patch": {"h": int, "w": int, "stride": int},   (optional)
    "sha256": {"<relative path>": "<hex digest>", ...}   (every referenced file)
  }

report (JSON): schema, version, dataset, config, classes, fold_accuracies, mean,
  std (sample, n-1), confusion, folds[{fold, accuracy, n_train, n_test,
  fit_seconds, predict_seconds, test_indices, predictions, config}], extra
report (CSV): method,fold,accuracy,mean,std,seconds
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_model_flags(p, method_required=True):
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--method", choices=METHODS, required=method_required, default="crc")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    p.add_argument("--gamma", type=float, default=1e-3)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--eta", type=float, default=1e-2)
    p.add_argument("--kernel", choices=("linear", "rbf"), default="linear")
    p.add_argument("--bandwidth", type=float, default=1.0)
    p.add_argument("--residual", choices=("normalized", "collaborative"), default="normalized")
    p.add_argument("--norm", dest="norm_mode", choices=("unit-l2", "none"), default="unit-l2")
    p.add_argument("--patch-h", type=int)
    p.add_argument("--patch-w", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--pca-rank", type=int)


def build_parser():
    parser = _Parser(prog="crckit", description="Collaborative representation classifiers")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic confounded image dataset")
    p.add_argument("--spec", required=True, help="SyntheticSpec JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the seed given in the --spec file")

    p = sub.add_parser("bench", help="k-fold benchmark of one method")
    _add_model_flags(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel folds (default: available cores; results do not depend on it)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", help="report path (stdout if omitted)")

    p = sub.add_parser("classify", help="fit on a manifest and classify one input")
    _add_model_flags(p)
    p.add_argument("--input", required=True, help="PGM image or FMX1 feature column")

    p = sub.add_parser("gridsearch", help="nested-CV grid search over lambda/gamma/tau")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--lambdas", type=_floats, required=True)
    p.add_argument("--gammas", type=_floats, default=[0.0])
    p.add_argument("--taus", type=_floats, default=[0.0])
    p.add_argument("--eta", type=float, default=1e-2)
    p.add_argument("--kernel", choices=("linear", "rbf"), default="linear")
    p.add_argument("--bandwidth", type=float, default=1.0)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel grid points (default: available cores)")
    p.add_argument("--out", help="JSON output path (stdout if omitted)")

    sub.add_parser("formats", help="print the file format definitions")
    return parser


def _patch(args):
    given = [args.patch_h, args.patch_w, args.stride]
    if all(v is None for v in given):
        return None
    if any(v is None for v in given):
        raise SystemExit("--patch-h, --patch-w and --stride must be given together")
    return {"h": args.patch_h, "w": args.patch_w, "stride": args.stride}


def _run_config(args, **extra):
    return RunConfig(method=args.method, lam=args.lam, gamma=args.gamma, tau=args.tau,
                     eta=args.eta, kernel=args.kernel, bandwidth=args.bandwidth,
                     residual=args.residual, norm_mode=args.norm_mode, patch=_patch(args),
                     pca_rank=args.pca_rank, **extra)


def _jobs(value):
    return value if value is not None else (os.cpu_count() or 1)


def _print_config(command, doc):
    print(json.dumps({"command": command, "config": doc}, sort_keys=True))
    sys.stdout.flush()


def _progress(msg):
    print(msg, file=sys.stderr)


def _write(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_synth(args):
    doc = json.loads(Path(args.spec).read_text())
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = SyntheticSpec.from_dict(doc)
    _print_config("synth", spec.to_dict())
    path = write_manifest(args.out, synth_dataset(spec))
    print(f"wrote {path}")
    return 0


def cmd_bench(args):
    config = _run_config(args, folds=args.folds, seed=args.seed, jobs=_jobs(args.jobs))
    _print_config("bench", config.to_dict())
    report = run_benchmark(args.manifest, config, progress=_progress)
    _write(emit_report(report, args.format), args.out)
    _progress(f"mean accuracy {report.mean:.4f} +/- {report.std:.4f}")
    return 0


def cmd_classify(args):
    from .harness import _estimator, _inputs
    config = _run_config(args)
    _print_config("classify", config.to_dict())
    dataset = resolve_dataset(args.manifest)
    est = _estimator(dataset, config)
    est.fit(_inputs(dataset, config), dataset.labels)
    inp = Path(args.input)
    if inp.suffix.lower() == ".pgm":
        x = read_pgm(inp)
    else:
        m, _, n = read_fmx(inp)
        if n != 1:
            raise ValueError("FMX1 input must hold a single column")
        x = m[:, 0]
    if config.method in PATCH_METHODS:
        tally = est.vote_tallies(x[None])[0]
        k = int(est.classes_[tally.winner])
        out = {"class": k, "name": dataset.classes[k], "votes": tally.counts.tolist(),
               "residual_sums": tally.residual_sums.tolist()}
    else:
        r = est.residuals(np.ravel(x)[None])[0]
        k = int(est.predict(np.ravel(x)[None])[0])
        out = {"class": k, "name": dataset.classes[k],
               "residuals": {dataset.classes[int(c)]: float(v) for c, v in zip(est.classes_, r)}}
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_gridsearch(args):
    base = RunConfig(method=args.method, eta=args.eta, kernel=args.kernel,
                     bandwidth=args.bandwidth, folds=args.folds, seed=args.seed,
                     jobs=_jobs(args.jobs))
    _print_config("gridsearch", {**base.to_dict(), "lambdas": args.lambdas,
                                 "gammas": args.gammas, "taus": args.taus})
    res = grid_search(args.manifest, args.method, args.lambdas, args.gammas, args.taus,
                      args.folds, args.seed, base=base, progress=_progress)
    doc = {"best": res.best.to_dict(), "table": res.table,
           "report": res.report.to_dict()}
    _write(json.dumps(doc, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def cmd_formats(args):
    sys.stdout.write(FORMATS_TEXT)
    return 0


COMMANDS = {"synth": cmd_synth, "bench": cmd_bench, "classify": cmd_classify,
            "gridsearch": cmd_gridsearch, "formats": cmd_formats}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except SystemExit:
        raise
    except Exception as exc:  # runtime failure -> exit 1
        print(f"crckit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
