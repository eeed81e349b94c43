"""Command-line entry point: ``clusterdet {gen,train,eval,embed,cluster}``.

stdout carries only machine-readable results; diagnostics go to stderr.
Exit codes: 0 success, 1 input error (including bad flags), 2 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import netcore
from .clustering import ClusterSpec, fit_clusters
from .dataset import GenSpec, Source, gen_font, gen_rubbing, load_dataset, save_dataset
from .errors import InputError, NumericError
from .evaluation import average_precision, collect_features, embed_2d, infer
from .trainer import IterationRecord, TrainConfig, TrainingAborted, train

log = logging.getLogger("clusterdet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="clusterdet", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic dataset", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--kind", choices=["rubbing", "font"], default="rubbing")
    g.add_argument("--count", type=int, required=True, help="number of images")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=None,
                   help="canvas side in pixels (default 128 rubbing, 48 font)")
    g.add_argument("--noise", type=float, default=0.02, help="salt-and-pepper density")
    g.add_argument("--start", type=int, default=0, help="index of the first image")

    t = sub.add_parser("train", help="train a detector", formatter_class=fmt)
    t.add_argument("--config", help="JSON file with TrainConfig fields (all optional)")
    t.add_argument("--rubbing", required=True, help="rubbing dataset directory")
    t.add_argument("--font", help="font dataset directory (needed when lambda_1 > 0)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="per-iteration CSV log path")
    t.add_argument("--seed", type=int, help="override config seed")
    t.add_argument("--iterations", type=int, help="override config iterations")
    t.add_argument("--tau", type=float, help="override config tau")

    e = sub.add_parser("eval", help="detection metrics as JSON", formatter_class=fmt)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="labelled rubbing dataset directory")
    e.add_argument("--config", help="JSON config (anchor sizes)")
    e.add_argument("--score-thresh", type=float, default=0.5,
                   help="operating point for precision/recall/F1")
    e.add_argument("--min-score", type=float, default=0.05,
                   help="detections below this score are dropped before NMS")
    e.add_argument("--nms", type=float, default=0.5, help="NMS IoU threshold")

    m = sub.add_parser("embed", help="2-D PCA of role-tagged features", formatter_class=fmt)
    m.add_argument("--ckpt", required=True)
    m.add_argument("--rubbing", required=True)
    m.add_argument("--font", required=True)
    m.add_argument("--out", required=True, help="CSV with columns role,x,y")
    m.add_argument("--features", help="also dump the full feature vectors to this CSV")
    m.add_argument("--config", help="JSON config (anchor sizes, matching, caps)")
    m.add_argument("--seed", type=int, default=0, help="negative subsampling tie-break seed")

    c = sub.add_parser("cluster", help="cluster a feature CSV", formatter_class=fmt)
    c.add_argument("--features", required=True,
                   help="CSV of vectors; a leading non-numeric column and header are skipped")
    c.add_argument("--method", choices=["kmeans", "dbscan"], default="kmeans")
    c.add_argument("--k", type=int, default=8)
    c.add_argument("--eps", type=float, default=12.0)
    c.add_argument("--min-samples", type=int, default=5)
    c.add_argument("--n-init", type=int, default=1)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="JSON report path (default: stdout)")
    return p


def _load_config(path, **overrides) -> TrainConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise InputError(f"{path}: config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def _fmt(x) -> str:
    return repr(float(x))


def cmd_gen(args) -> int:
    if args.count < 0 or args.start < 0:
        raise InputError("--count and --start must be >= 0")
    size = args.size
    kw = {"seed": args.seed, "noise_density": args.noise}
    if size is not None:
        kw["image_size" if args.kind == "rubbing" else "font_size"] = size
        if size - 4 < GenSpec.glyph_size[1]:
            kw["glyph_size"] = (min(GenSpec.glyph_size[0], size // 2), size - 4)
    spec = GenSpec(**kw)
    make = gen_rubbing if args.kind == "rubbing" else gen_font
    save_dataset([make(spec, i) for i in range(args.start, args.start + args.count)], args.out)
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config, seed=args.seed, iterations=args.iterations, tau=args.tau)
    print(config.to_json(), flush=True)
    rubbing = load_dataset(args.rubbing, Source.RUBBING)
    if not rubbing:
        raise InputError(f"no images in {args.rubbing}")
    font = []
    if config.contrastive:
        if not args.font:
            raise InputError("--font is required when lambda_1 > 0")
        font = load_dataset(args.font, Source.FONT)

    log_file = open(args.log, "w", newline="") if args.log else None
    writer = None
    if log_file:
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(IterationRecord.LOG_COLUMNS)
    try:
        params, records = train(
            config, rubbing, font, callback=(lambda r: writer.writerow(r.log_row())) if writer else None
        )
    except TrainingAborted as exc:
        last = exc.records[-1].iteration if exc.records else None
        print(f"training aborted: {exc}; last good iteration: {last}", file=sys.stderr)
        return 2
    finally:
        if log_file:
            log_file.close()
    netcore.save_checkpoint(params, args.out)
    if records:
        print(f"final total loss {records[-1].report.total:.6f}", file=sys.stderr)
    return 0


def _check_anchor_count(params, config):
    if netcore.n_anchors_of(params) != len(config.anchor_sizes):
        raise InputError(
            f"checkpoint has {netcore.n_anchors_of(params)} anchors per cell but the config "
            f"lists {len(config.anchor_sizes)} sizes"
        )


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    params = netcore.load_checkpoint(args.ckpt)
    _check_anchor_count(params, config)
    data = load_dataset(args.data, Source.RUBBING)
    if not data:
        raise InputError(f"no images in {args.data}")
    dets = [infer(params, s.image, config.anchor_sizes, args.min_score, args.nms) for s in data]
    report = average_precision(dets, [s.boxes for s in data], score_thresh=args.score_thresh)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_embed(args) -> int:
    config = _load_config(args.config)
    params = netcore.load_checkpoint(args.ckpt)
    _check_anchor_count(params, config)
    rubbing = load_dataset(args.rubbing, Source.RUBBING)
    font = load_dataset(args.font, Source.FONT)
    roles, x = collect_features(params, rubbing, font, config, seed=args.seed)
    points, degenerate = embed_2d(list(zip(roles, x)))
    if degenerate:
        print("warning: all feature vectors identical; embedding collapsed to the origin",
              file=sys.stderr)
    _write_rows(args.out, ["role", "x", "y"], [(r, _fmt(a), _fmt(b)) for r, a, b in points])
    if args.features:
        header = ["role"] + [f"f{i}" for i in range(x.shape[1])]
        _write_rows(args.features, header, [[r] + [_fmt(v) for v in row] for r, row in zip(roles, x)])
    return 0


def _read_features(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc

    def numeric(cell):
        try:
            float(cell)
            return True
        except ValueError:
            return False

    if rows and not any(numeric(c) for c in rows[0]):
        rows = rows[1:]
    if rows and not numeric(rows[0][0]):
        rows = [r[1:] for r in rows]
    try:
        x = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric feature value ({exc})") from exc
    if x.ndim != 2 or len(x) == 0:
        raise InputError(f"{path}: expected a non-empty rectangular table")
    return x


def cmd_cluster(args) -> int:
    x = _read_features(args.features)
    spec = ClusterSpec(
        args.method, k=args.k, eps=args.eps, min_samples=args.min_samples,
        seed=args.seed, n_init=args.n_init,
    )
    model = fit_clusters(x, spec)
    labels = model.assignments
    report = {"method": args.method, "n_points": int(len(x))}
    if args.method == "kmeans":
        report.update(k=args.k, seed=args.seed, n_init=args.n_init,
                      iterations=int(model.iterations_run))
    else:
        report.update(eps=args.eps, min_samples=args.min_samples,
                      noise=int((labels < 0).sum()))
    report.update(
        n_clusters=int(len(model.centers)),
        inertia=float(model.inertia),
        sizes=np.bincount(labels[labels >= 0], minlength=len(model.centers)).tolist(),
        labels=labels.tolist(),
    )
    text = json.dumps(report, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
    "embed": cmd_embed, "cluster": cmd_cluster,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:  # --help (0) or a usage error (1)
        return exc.code
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
