"""Command-line entry point: ``astcl {parse,pretrain,apply,synth}``.

Exit codes: 0 success, 2 input error, 3 no training signal, 4 model/config mismatch.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import downstream as ds
from . import hcl, synth
from .config import ConfigError, TrainConfig, coerce, read_flat_config, write_flat_config
from .demo_lang import ParseError, parse_demo_source
from .tree import AstError, AstGraph, dumps_ast_json, load_ast_json

log = logging.getLogger("astcl")

EXIT_OK, EXIT_INPUT, EXIT_SIGNAL, EXIT_MODEL = 0, 2, 3, 4

AST_SUFFIX = ".ast.jsonl"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --- file helpers -----------------------------------------------------------


def write_atomic(path: Path, text: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(text, bytes):
        tmp.write_bytes(text)
    else:
        tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def load_tree(path: Path, cfg: TrainConfig | None = None) -> AstGraph:
    """Interchange files (``.jsonl``) are loaded, anything else is parsed as demo source."""
    caps = {}
    if cfg is not None:
        caps = dict(max_depth=cfg.max_depth, max_nodes=cfg.max_nodes, max_paths=cfg.max_paths)
    if not path.is_file():
        raise CliError(f"{path}: no such file", EXIT_INPUT)
    try:
        if path.suffix == ".jsonl":
            with open(path, "rb") as fh:
                return load_ast_json(fh, **caps)
        return parse_demo_source(path.read_text(encoding="utf-8"), **caps)
    except ParseError as e:
        raise CliError(f"{path}:{e.line}:{e.col}: {str(e).split(': ', 1)[1]}", EXIT_INPUT) from None
    except AstError as e:
        raise CliError(f"{path}: {e}", EXIT_INPUT) from None


def expand_inputs(items: list[str]) -> list[Path]:
    out: list[Path] = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            out += sorted(q for q in p.iterdir() if q.is_file() and not q.name.startswith("."))
        elif p.is_file():
            out.append(p)
        else:
            raise CliError(f"{p}: no such file or directory", EXIT_INPUT)
    if not out:
        raise CliError("no input files", EXIT_INPUT)
    return out


def read_table(path: Path, columns: list[str]) -> list[dict]:
    if not path.is_file():
        raise CliError(f"{path}: no such file", EXIT_INPUT)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise CliError(f"{path}: missing columns {', '.join(missing)}", EXIT_INPUT)
        rows = list(reader)
    for row in rows:
        for c in columns:
            if c.startswith("path"):
                row[c] = str((path.parent / row[c]).resolve()) if not Path(row[c]).is_absolute() else row[c]
    return rows


# --- configuration ----------------------------------------------------------

_CFG_FIELDS = {f.name: f for f in fields(TrainConfig)}


def add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file of TrainConfig fields")
    p.add_argument("--profile", choices=["full", "desk"], default="full")
    p.add_argument("--seed", type=int)
    for name, f in _CFG_FIELDS.items():
        if name == "seed":
            continue
        flag = "--" + name.replace("_", "-")
        if isinstance(f.default, bool):
            p.add_argument(flag, dest=f"cfg_{name}", action="store_const", const="true")
        else:
            p.add_argument(flag, dest=f"cfg_{name}", metavar=name.upper())


def train_config(args) -> TrainConfig:
    values: dict = {}
    if args.config:
        cpath = Path(args.config)
        if not cpath.is_file():
            raise CliError(f"{cpath}: no such config file", EXIT_INPUT)
        values.update(read_flat_config(cpath.read_text(encoding="utf-8")))
    for name in _CFG_FIELDS:
        v = getattr(args, f"cfg_{name}", None)
        if v is not None:
            values[name] = v
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        return TrainConfig.profile(args.profile, **values)
    except (ConfigError, TypeError) as e:
        raise CliError(f"config: {e}", EXIT_INPUT) from None


def echo_config(out_dir: Path, command: str, extra: dict) -> None:
    write_atomic(out_dir / "effective_config.txt",
                 write_flat_config({"command": command, **extra}))


def open_checkpoint(path: str) -> hcl.Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{p}: no such checkpoint", EXIT_INPUT)
    try:
        return hcl.load_checkpoint(p)
    except (hcl.CheckpointError, ConfigError, KeyError) as e:
        raise CliError(f"{p}: {e}", EXIT_MODEL) from None


# --- commands ---------------------------------------------------------------


def cmd_parse(args) -> int:
    out_dir = Path(args.out_dir)
    rows = []
    for path in expand_inputs(args.inputs):
        g = load_tree(path, None if not args.max_depth else
                      TrainConfig(max_depth=args.max_depth))
        stem = path.name[:-len(AST_SUFFIX)] if path.name.endswith(AST_SUFFIX) else path.stem
        write_atomic(out_dir / (stem + AST_SUFFIX), dumps_ast_json(g))
        rows.append([str(path), g.n, g.depth, len(g.paths), g.truncated_paths])
    write_atomic(out_dir / "stats.csv",
                 csv_text(["file", "nodes", "depth", "paths", "truncated_paths"], rows))
    echo_config(out_dir, "parse", {"inputs": [str(p) for p in args.inputs]})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = train_config(args)
    out_dir = Path(args.out_dir)
    corpus = [load_tree(p, cfg) for p in expand_inputs(args.corpus)]
    echo_config(out_dir, "pretrain", {**cfg.to_dict(), "corpus": [str(c) for c in args.corpus]})
    logs: list[hcl.StepLog] = []
    try:
        ckpt = hcl.pretrain(corpus, cfg, on_step=logs.append)
    except hcl.NoTrainingSignal as e:
        raise CliError(f"no training signal: {e}", EXIT_SIGNAL) from None
    except ValueError as e:
        raise CliError(str(e), EXIT_INPUT) from None
    hcl.save_checkpoint(ckpt, out_dir / "checkpoint.helc")
    write_atomic(out_dir / "train_log.csv",
                 hcl.StepLog.CSV_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in logs))
    return EXIT_OK


def _trees(paths: list[str], cfg: TrainConfig) -> list[AstGraph]:
    return [load_tree(Path(p), cfg) for p in paths]


def apply_embed(args, ckpt, out_dir: Path) -> None:
    files = expand_inputs(args.inputs)
    vecs = ds.code_vectors(_trees([str(f) for f in files], ckpt.config), ckpt.params, ckpt.config)
    header = ["path"] + [f"v{i}" for i in range(vecs.shape[1])]
    write_atomic(out_dir / "vectors.csv",
                 csv_text(header, [[str(f)] + [repr(float(x)) for x in row]
                                   for f, row in zip(files, vecs)]))


def apply_classify(args, ckpt, out_dir: Path) -> None:
    if not args.train or not args.test:
        raise CliError("classify needs --train and --test label files", EXIT_INPUT)
    train = read_table(Path(args.train), ["path", "label"])
    test = read_table(Path(args.test), ["path", "label"])
    names = sorted({r["label"] for r in train + test})
    index = {n: i for i, n in enumerate(names)}
    tuned = ds.fine_tune(ckpt, _trees([r["path"] for r in train], ckpt.config),
                         [index[r["label"]] for r in train], epochs=args.epochs, lr=args.lr,
                         classes=max(len(names), 2), patience=args.patience, seed=ckpt.config.seed)
    pred = tuned.predict(_trees([r["path"] for r in test], ckpt.config))
    truth = [index[r["label"]] for r in test]
    write_atomic(out_dir / "predictions.csv",
                 csv_text(["path", "label", "prediction"],
                          [[r["path"], r["label"], names[p]] for r, p in zip(test, pred)]))
    write_atomic(out_dir / "metrics.csv",
                 csv_text(["metric", "value"], [["accuracy", ds.accuracy(pred, truth)]]))


def _pair_scores(rows, ckpt) -> tuple[np.ndarray, list[int]]:
    paths = sorted({r[c] for r in rows for c in ("path1", "path2")})
    vecs = ds.code_vectors(_trees(paths, ckpt.config), ckpt.params, ckpt.config)
    at = {p: vecs[i] for i, p in enumerate(paths)}
    p = np.array([ds.relatedness(at[r["path1"]], at[r["path2"]]) for r in rows])
    y = [int(r["y"]) for r in rows]
    if any(v not in (1, -1) for v in y):
        raise CliError("clone labels must be 1 or -1", EXIT_INPUT)
    return p, y


def apply_clone(args, ckpt, out_dir: Path) -> None:
    if not args.pairs:
        raise CliError("clone needs --pairs", EXIT_INPUT)
    rows = read_table(Path(args.pairs), ["path1", "path2", "y"])
    p, y = _pair_scores(rows, ckpt)
    calib = None
    if args.calibrate_on:
        cal_rows = read_table(Path(args.calibrate_on), ["path1", "path2", "y"])
        cp, cy = _pair_scores(cal_rows, ckpt)
        calib = ds.CloneCalibration.fit(cp, cy)
    scores = np.array([calib(v) if calib else v for v in p])
    verdict = scores > 0
    prec, rec, f1 = ds.prf1(verdict, np.array(y) == 1)
    write_atomic(out_dir / "predictions.csv",
                 csv_text(["path1", "path2", "y", "p", "is_clone"],
                          [[r["path1"], r["path2"], r["y"], repr(float(s)), bool(v)]
                           for r, s, v in zip(rows, scores, verdict)]))
    metrics = [["precision", prec], ["recall", rec], ["f1", f1],
               ["mse", float(np.mean((np.array(y) - scores) ** 2))]]
    if calib:
        metrics += [["calibration_scale", calib.scale], ["calibration_offset", calib.offset]]
    write_atomic(out_dir / "metrics.csv", csv_text(["metric", "value"], metrics))


def apply_cluster(args, ckpt, out_dir: Path) -> None:
    if args.labels:
        rows = read_table(Path(args.labels), ["path", "label"])
        paths, truth = [r["path"] for r in rows], [r["label"] for r in rows]
    else:
        paths, truth = [str(p) for p in expand_inputs(args.inputs)], None
    if args.k > len(paths):
        raise CliError(f"K={args.k} exceeds the number of snippets ({len(paths)})", EXIT_MODEL)
    vecs = ds.code_vectors(_trees(paths, ckpt.config), ckpt.params, ckpt.config)
    res = ds.kmeans(vecs, args.k, seed=ckpt.config.seed, max_iters=args.max_iters)
    write_atomic(out_dir / "assignments.csv",
                 csv_text(["path", "cluster"], zip(paths, res.assignments.tolist())))
    metrics = [["inertia", res.inertia[-1]], ["iterations", res.iterations]]
    if truth is not None:
        metrics.append(["ari", ds.ari(res.assignments, truth)])
    write_atomic(out_dir / "metrics.csv", csv_text(["metric", "value"], metrics))


def apply_project(args, ckpt, out_dir: Path) -> None:
    files = expand_inputs(args.inputs)
    rows = []
    for f in files:
        g = load_tree(f, ckpt.config)
        coords = ds.pca_2d(hcl.encode_graph(g, ckpt.params, ckpt.config))
        rows += [[str(f), i, g.levels[i], repr(float(c[0])), repr(float(c[1]))]
                 for i, c in enumerate(coords)]
    write_atomic(out_dir / "projection.csv",
                 csv_text(["file", "node_id", "level", "pc1", "pc2"], rows))


APPLY = {"embed": apply_embed, "classify": apply_classify, "clone": apply_clone,
         "cluster": apply_cluster, "project": apply_project}


def cmd_apply(args) -> int:
    ckpt = open_checkpoint(args.checkpoint)
    if args.seed is not None:
        ckpt.config.seed = args.seed
    out_dir = Path(args.out_dir)
    echo_config(out_dir, f"apply {args.task}",
                {**ckpt.config.to_dict(), "checkpoint": args.checkpoint,
                 **{k: v for k, v in vars(args).items()
                    if k in ("inputs", "train", "test", "pairs", "labels", "k", "epochs",
                             "lr", "patience", "calibrate_on", "max_iters") and v is not None}})
    try:
        APPLY[args.task](args, ckpt, out_dir)
    except ValueError as e:
        raise CliError(str(e), EXIT_MODEL) from None
    return EXIT_OK


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    if args.families:
        sources, labels = synth.family_sources(args.count, args.seed, args.max_depth)
        rows = []
        for i, (src, lab) in enumerate(zip(sources, labels)):
            name = f"prog_{i:04d}.demo"
            write_atomic(out_dir / name, src)
            rows.append([name, "loop" if lab == 0 else "branch"])
        write_atomic(out_dir / "labels.csv", csv_text(["path", "label"], rows))
    else:
        rng = np.random.default_rng(args.seed)
        for i in range(args.count):
            write_atomic(out_dir / f"prog_{i:04d}.demo", synth.random_program(rng, args.max_depth))
    return EXIT_OK


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="astcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse sources into interchange files + stats")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-depth", type=int)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("corpus", nargs="+", help="files or directories of sources / interchange files")
    p.add_argument("--out-dir", required=True)
    add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("apply", help="run a downstream task with a checkpoint")
    p.add_argument("task", choices=sorted(APPLY))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--inputs", nargs="*", default=[])
    p.add_argument("--train")
    p.add_argument("--test")
    p.add_argument("--pairs")
    p.add_argument("--calibrate-on")
    p.add_argument("--labels")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=5)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("synth", help="write random demo-language programs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-depth", type=int, default=6)
    p.add_argument("--families", action="store_true",
                   help="loop-heavy vs branch-heavy programs with labels.csv")
    p.set_defaults(func=cmd_synth)
    return parser


def thread_limit() -> int | None:
    raw = os.environ.get("HELOC_THREADS")
    if not raw:
        return None
    try:
        return max(1, int(raw))
    except ValueError:
        return None


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=thread_limit()):
            return args.func(args)
    except CliError as e:
        print(f"astcl: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
