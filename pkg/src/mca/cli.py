"""Command-line entry point: ``mca gen | build-space | train | eval | audit | bench``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import METHODS, final_accuracy, mean_traces, run_bench, write_bench_csv
from .config import TrainConfig, apply_overrides, parse_kv_file
from .diagnostics import (BoundInputs, audit_assumptions, bound_constants, format_report,
                          measure_m_u, write_report_csv)
from .embedding_io import (EmbeddingMatrix, l2_normalize, load_dataset, load_embeddings,
                           load_vocabulary, save_embeddings)
from .errors import DataError, MCAError, NumericError
from .knn import topk_cross_modal, topk_in_modal
from .metrics import format_report as format_metrics
from .metrics import metric_report
from .metrics import write_report_csv as write_metrics_csv
from .model import image_assign, load_checkpoint, text_assign
from .plotting import plot_bench, plot_loss_curve, plot_vocabulary_curve
from .semantic_space import (build_semantic_space, vocabulary_size_curve, word_table,
                             write_word_table)
from .synthetic import SynthConfig, generate, write_bundle
from .trainer import evaluate, predict, split_indices, train

log = logging.getLogger("mca")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# TrainConfig fields that do not affect results; kept out of the manifest's config block
RUNTIME_FIELDS = ("workers",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser, cls, skip=()):
    """One kebab-case flag per dataclass field; unset flags stay absent from the namespace."""
    group = parser.add_argument_group(f"{cls.__name__} fields")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        if kind == "bool":
            group.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS)
            continue
        conv = {"int": int, "float": float}.get(kind.split(" ")[0], str)  # "float | None" -> float
        group.add_argument(_flag(f.name), dest=f.name, type=conv, default=argparse.SUPPRESS,
                           metavar=kind.split(" ")[0].upper())


def _resolve(cls, args, base=None):
    """Defaults, then ``--config`` file, then explicit flags."""
    cfg = base if base is not None else cls()
    if getattr(args, "config", None):
        cfg = apply_overrides(cfg, parse_kv_file(args.config))
    names = {f.name for f in dataclasses.fields(cls)}
    explicit = {k: v for k, v in vars(args).items() if k in names}
    if explicit:
        cfg = dataclasses.replace(cfg, **explicit)
    return cfg


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_record(paths: dict[str, str | None]) -> dict:
    out = {}
    for key, p in paths.items():
        if p is None:
            continue
        rec = {"path": str(p), "sha256": _sha256(p)}
        meta = Path(p).with_suffix(".meta.json")
        if meta.exists():
            rec["meta_sha256"] = _sha256(meta)
        out[key] = rec
    return out


def _require(path, what: str) -> str:
    if path is None:
        raise UsageError(f"missing required input: {what}")
    if not Path(path).exists():
        raise DataError(f"{what} not found: {path}")
    return path


def write_manifest(out_dir: Path, command: str, config, inputs: dict, extra: dict | None = None) -> Path:
    cfg = dataclasses.asdict(config) if dataclasses.is_dataclass(config) else dict(config or {})
    runtime = {k: cfg.pop(k) for k in RUNTIME_FIELDS if k in cfg}
    manifest = {"command": command, "version": __version__, "config": cfg,
                "runtime": runtime, "inputs": inputs}
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# --- subcommands -------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _resolve(SynthConfig, args)
    ds, vocab, truth = generate(cfg)
    out = Path(args.out)
    paths = write_bundle(out, ds, vocab, truth, cfg)
    write_manifest(out, "gen", cfg, {})
    write_metrics_csv(out / "metrics.csv", {"n_images": ds.images.n, "n_words": len(vocab.words),
                                            "n_misaligned": len(truth.misaligned)})
    for key, p in paths.items():
        print(f"{key:<9} {p}")
    return EXIT_OK


def _build_space(args, cfg, dataset, out: Path):
    vocab = load_vocabulary(_require(args.words, "--words"), _require(args.taxonomy, "--taxonomy"))
    tree = vocab.tree()
    space = build_semantic_space(dataset, vocab, cfg, tree)
    print(space.format_report())
    _write_rows(out / "stage_report.csv", ["stage", "kept", "dropped"], space.report)
    write_word_table(out / "words.csv", word_table(vocab, tree, space.scores, space))
    gammas = list(range(0, tree.max_depth + 1))
    sizes = vocabulary_size_curve(space.candidates, tree, gammas)
    _write_rows(out / "vocab_curve.csv", ["gamma_h", "size"], zip(gammas, sizes))
    plot_vocabulary_curve(gammas, sizes, out / "vocab_curve.png")
    save_embeddings(out / "space.mcae", space.kept_embeddings)
    return space


def cmd_build_space(args) -> int:
    cfg = _resolve(TrainConfig, args)
    cfg.validate()
    dataset = load_dataset(_require(args.images, "--images"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    space = _build_space(args, cfg, dataset, out)
    write_manifest(out, "build-space", cfg, _input_record(
        {"images": args.images, "words": args.words, "taxonomy": args.taxonomy}))
    write_metrics_csv(out / "metrics.csv", {f"kept_{s}": k for s, k, _ in space.report})
    return EXIT_OK


def _dump_neighbors(out: Path, u: EmbeddingMatrix, words: EmbeddingMatrix, cfg) -> None:
    topk_in_modal(u, cfg.k_i, workers=cfg.workers).to_csv(out / "neighbors_image.csv")
    topk_cross_modal(u, words, cfg.k_s, workers=cfg.workers).to_csv(out / "neighbors_text.csv")


def cmd_train(args) -> int:
    cfg = _resolve(TrainConfig, args)
    cfg.validate()
    dataset = load_dataset(_require(args.images, "--images"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_idx, test_idx = split_indices(dataset.images.n, cfg.holdout, cfg.seed)
    train_set = dataset.take(train_idx)
    if args.space is not None:
        space_emb = load_embeddings(_require(args.space, "--space"))
    else:
        space_emb = _build_space(args, cfg, train_set, out).kept_embeddings
    inputs = _input_record({"images": args.images, "space": args.space,
                            "words": args.words, "taxonomy": args.taxonomy})
    write_manifest(out, "train", cfg, inputs,
                   {"split": {"train": len(train_idx), "holdout": len(test_idx)}})
    if args.dump_neighbors:
        _dump_neighbors(out, l2_normalize(train_set.images), l2_normalize(space_emb), cfg)

    resume = None
    if args.resume:
        resume = out / "checkpoints" / "state.npz"
        if not resume.exists():
            raise DataError(f"nothing to resume: {resume}")
    result = train(train_set, space_emb, cfg, run_dir=out, resume=resume)
    plot_loss_curve(result.state.history, out / "loss_curve.png")

    report = {}
    if dataset.labels is not None:
        report.update({f"train_{k}": v for k, v in
                       metric_report(result.assignments, train_set.labels).items()})
        if len(test_idx):
            held = evaluate(result.state.params, dataset.take(test_idx))
            report.update({f"holdout_{k}": v for k, v in held.items()})
    report["final_loss"] = result.state.history[-1].l_total if result.state.history else float("nan")
    write_metrics_csv(out / "metrics.csv", report)
    print(format_metrics(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(_require(args.images, "--images"))
    ckpt = args.checkpoint
    rows = None
    if args.run is not None:
        run = Path(_require(args.run, "--run"))
        ckpt = ckpt or str(run / "params.mcap")
        manifest = json.loads((run / "manifest.json").read_text())
        cfg = manifest["config"]
        train_idx, test_idx = split_indices(dataset.images.n, cfg["holdout"], cfg["seed"])
        rows = {"all": None, "train": train_idx, "holdout": test_idx}[args.split]
    params = load_checkpoint(_require(ckpt, "--checkpoint"))
    subset = dataset if rows is None else dataset.take(rows)
    if subset.labels is None:
        raise DataError("evaluation needs labels in the images' .meta.json")
    report = evaluate(params, subset)
    print(format_metrics(report))
    if args.out:
        out = Path(args.out)
        write_manifest(out, "eval", {"split": args.split},
                       _input_record({"images": args.images, "checkpoint": ckpt}))
        write_metrics_csv(out / "metrics.csv", report)
        pred = predict(params, subset.images)
        _write_rows(out / "assignments.csv", ["id", "cluster"], zip(subset.images.ids, pred.tolist()))
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _resolve(TrainConfig, args)
    dataset = load_dataset(_require(args.images, "--images"))
    params = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    words = l2_normalize(load_embeddings(_require(args.space, "--space")))
    u = l2_normalize(dataset.images)
    img_nbrs = topk_in_modal(u, cfg.k_i, workers=cfg.workers)
    txt_nbrs = topk_cross_modal(u, words, min(cfg.k_s, words.n), workers=cfg.workers)
    q = image_assign(params, u.data.astype(np.float64))
    p = text_assign(params, words.data.astype(np.float64))
    audit = audit_assumptions(q, p, img_nbrs, txt_nbrs)
    m_u = args.m_u if args.m_u is not None else measure_m_u(u.data)
    inputs = BoundInputs(n=u.n, m=words.n, d=u.d, c=params.c, tau_ia=cfg.tau_ia,
                         tau_pa=cfg.tau_pa, eta=cfg.eta, lambda_a=cfg.lambda_a,
                         lambda_pa=cfg.lambda_pa, lambda_sa=cfg.lambda_sa, l_is=args.l_is,
                         l_i_lip=args.l_i_lip, m_u=m_u, big_c=args.big_c, delta=args.delta)
    report = bound_constants(audit, inputs)
    print(format_report(report))
    if args.out:
        out = Path(args.out)
        write_manifest(out, "audit", cfg, _input_record(
            {"images": args.images, "checkpoint": args.checkpoint, "space": args.space}),
            {"bound_inputs": dataclasses.asdict(inputs)})
        write_report_csv(out / "audit.csv", report)
        write_metrics_csv(out / "metrics.csv", {"margin": report.margin})
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _resolve(TrainConfig, args)
    cfg.validate()
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    dataset = load_dataset(_require(args.images, "--images"))
    vocab = load_vocabulary(_require(args.words, "--words"), _require(args.taxonomy, "--taxonomy"))
    out = Path(args.out)
    write_manifest(out, "bench", cfg, _input_record(
        {"images": args.images, "words": args.words, "taxonomy": args.taxonomy}),
        {"repeats": args.repeats})
    runs = run_bench(dataset, vocab, cfg, repeats=args.repeats)
    write_bench_csv(out / "bench.csv", runs)
    plot_bench(mean_traces(runs), out / "bench.png")
    final = final_accuracy(runs)
    write_metrics_csv(out / "metrics.csv", {f"final_{m}": final[m] for m in METHODS})
    print(format_metrics({m: final[m] for m in METHODS}))
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mca", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mca {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="key=value file of config overrides")
        return p

    p = with_config(sub.add_parser("gen", help="write a synthetic dataset bundle"))
    p.add_argument("-o", "--out", required=True)
    _add_dataclass_flags(p, SynthConfig)
    p.set_defaults(func=cmd_gen)

    p = with_config(sub.add_parser("build-space", help="filter a vocabulary into a semantic space"))
    p.add_argument("--images", required=True)
    p.add_argument("--words", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("-o", "--out", required=True)
    _add_dataclass_flags(p, TrainConfig)
    p.set_defaults(func=cmd_build_space)

    p = with_config(sub.add_parser("train", help="train the cluster heads"))
    p.add_argument("--images", required=True)
    p.add_argument("--space", help="prebuilt semantic space (.mcae); else --words/--taxonomy")
    p.add_argument("--words")
    p.add_argument("--taxonomy")
    p.add_argument("-o", "--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true", help="continue from the run's last epoch")
    p.add_argument("--dump-neighbors", action="store_true",
                   help="write neighbor tables as CSV into the run directory")
    _add_dataclass_flags(p, TrainConfig)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against labels")
    p.add_argument("--images", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--run", help="run directory; supplies checkpoint and split")
    p.add_argument("--split", choices=("all", "train", "holdout"), default="all")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("audit", help="assumption audit and bound constants"))
    p.add_argument("--images", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--space", required=True)
    p.add_argument("-o", "--out")
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--big-c", type=float, default=1.0,
                   help="unidentified constant from Lagrange mean value argument")
    p.add_argument("--l-is", type=float, default=1.0)
    p.add_argument("--l-i-lip", type=float, default=1.0)
    p.add_argument("--m-u", type=float, default=None, help="default: measured from the images")
    _add_dataclass_flags(p, TrainConfig)
    p.set_defaults(func=cmd_audit)

    p = with_config(sub.add_parser("bench", help="compare SMP / PMCP / MCA pseudo-labels"))
    p.add_argument("--images", required=True)
    p.add_argument("--words", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--repeats", type=int, default=1)
    _add_dataclass_flags(p, TrainConfig)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mca {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"mca {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"mca {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MCAError as exc:
        print(f"mca {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
