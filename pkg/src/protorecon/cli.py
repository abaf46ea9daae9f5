"""Command-line front end: split, train, eval, compare, analyze, synth."""
from __future__ import annotations

import argparse
import json
import os
import sys
import threading
from datetime import datetime, timezone
from pathlib import Path

from .config import ConfigError, RunConfig
from .corpus import (
    Dataset,
    LabelingMask,
    ParseError,
    build_vocab,
    default_feature_table,
    gen_synthetic,
    load_dataset,
    load_feature_table,
    make_labeling_mask,
    parse_dataset,
    rules_to_text,
    serialize_rows,
)
from .evalsuite import (
    HIGHER_IS_BETTER,
    align_pair,
    compare_strategies,
    error_analysis,
    evaluate,
    ward_cluster,
)
from .seq2seq import CheckpointError, load_checkpoint, save_checkpoint
from .trainer import fit, load_model, predict

OUT_ENV = "PROTORECON_OUT"
METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"


class CliError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def out_dir(args) -> Path:
    path = Path(args.out or os.environ.get(OUT_ENV) or "protorecon-out")
    path.mkdir(parents=True, exist_ok=True)
    return path


# ------------------------------------------------------------------- data


def load_run_data(cfg: RunConfig) -> Dataset:
    if not cfg.train_path:
        return gen_synthetic(cfg.synthetic_n_sets, cfg.synthetic_n_daughters, cfg.dataset_seed)[0]
    return load_dataset(cfg.train_path, cfg.valid_path, cfg.test_path or None, cfg.proto_language)


def load_run_mask(cfg: RunConfig, dataset: Dataset) -> LabelingMask | None:
    if cfg.mask_path:
        return LabelingMask.from_text(Path(cfg.mask_path).read_text(encoding="utf-8"))
    if cfg.labeling_percent >= 100:
        return None
    return make_labeling_mask(dataset.train, cfg.labeling_percent / 100, cfg.dataset_seed)


def feature_table(cfg: RunConfig):
    return load_feature_table(cfg.feature_table_path) if cfg.feature_table_path else default_feature_table()


# ------------------------------------------------------------------- split


def cmd_split(args) -> int:
    ds = parse_dataset(args.dataset, "train")
    out = out_dir(args)
    seed = args.seed if args.seed is not None else 0
    for pct in args.percents:
        mask = make_labeling_mask(ds.train, pct / 100, seed)
        path = out / f"mask_p{_pct_label(pct)}_s{seed}.txt"
        path.write_text(mask.to_text(), encoding="utf-8")
        print(f"{path}\t{len(mask.labeled_ids)}")
    return 0


def _pct_label(pct: float) -> str:
    return str(int(pct)) if float(pct).is_integer() else str(pct)


# ------------------------------------------------------------------- train


def run_training(cfg: RunConfig, out: Path) -> dict:
    """One full run: fit, write checkpoint and metrics log; returns the final record."""
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.to_train_config()
    dataset = load_run_data(cfg)
    mask = load_run_mask(cfg, dataset)
    vocab = build_vocab(dataset)
    table = feature_table(cfg)
    (out / "config.json").write_text(_dump(cfg.to_dict()) + "\n", encoding="utf-8")
    log_path = out / METRICS_FILE
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(_dump({"event": "start", "created": _now(), "strategy": tcfg.strategy.name,
                        "model_seed": cfg.model_seed, "dataset_seed": cfg.dataset_seed}) + "\n")

        def sink(rec):
            fh.write(_dump(rec) + "\n")

        result = fit(tcfg, dataset, mask, cfg.model_seed, vocab=vocab, sink=sink)
        model = load_model(result.best_params, vocab, tcfg, cfg.model_seed)
        reports = {}
        for split in ("valid", "test"):
            items = dataset.split(split)
            if items:
                preds = predict(model, items, tcfg.eval_batch_size)
                reports[split] = evaluate(preds, [cs.protoform for cs in items], table).__dict__
        meta = {"config": cfg.to_dict(), "best_epoch": result.best_epoch,
                "labeled_ids": None if mask is None else sorted(mask.labeled_ids)}
        save_checkpoint(out / CHECKPOINT_FILE, result.best_params, vocab, meta, created=_now())
        final = {"event": "final", "completed": True, "best_epoch": result.best_epoch,
                 "best_val_ted": result.best_val_ted if result.best_epoch else None,
                 "epochs_completed": result.epochs_completed, "stopped_early": result.stopped_early,
                 "pool_size": len(result.pool), "reports": reports}
        fh.write(_dump(final) + "\n")
    return final


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    seeds = args.seeds or [cfg.model_seed]
    out = out_dir(args)
    if len(seeds) == 1:
        final = run_training(cfg.replace(model_seed=seeds[0]), out)
        print(_dump(final["reports"]))
        return 0
    errors = []

    def worker(chunk):
        for s in chunk:
            try:
                final = run_training(cfg.replace(model_seed=s), out / f"seed{s}")
                print(f"seed {s}: {_dump(final['reports'])}")
            except Exception as exc:  # reported after all threads join
                errors.append((s, exc))

    jobs = max(1, min(args.jobs, len(seeds)))
    threads = [threading.Thread(target=worker, args=(seeds[i::jobs],)) for i in range(jobs)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for s, exc in errors:
        print(f"seed {s} failed: {exc}", file=sys.stderr)
    return 1 if errors else 0


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_json_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(model_seed=args.seed)
    return cfg


# -------------------------------------------------------------------- eval


def _load_for_eval(args):
    params, vocab, header = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(header["meta"]["config"])
    overrides = {k: v for k, v in (("train_path", args.train), ("valid_path", args.valid),
                                   ("test_path", args.test)) if v}
    if overrides:
        cfg = cfg.replace(**overrides)
    dataset = load_run_data(cfg)
    data_vocab = build_vocab(dataset)
    if data_vocab.hash() != vocab.hash():
        raise CheckpointError(f"{args.checkpoint}: vocabulary hash mismatch with the evaluation data; refusing")
    model = load_model(params, vocab, cfg.to_train_config(), cfg.model_seed)
    return cfg, dataset, model, header


def cmd_eval(args) -> int:
    cfg, dataset, model, header = _load_for_eval(args)
    if args.transductive:
        if args.mask:
            labeled = LabelingMask.from_text(Path(args.mask).read_text(encoding="utf-8")).labeled_ids
        else:
            labeled = header["meta"].get("labeled_ids")
            if labeled is None:
                raise CliError("transductive evaluation needs a mask (--mask) or a masked training run")
        items = [cs for cs in dataset.train if cs.id not in set(labeled)]
        split = "transductive"
    else:
        items = dataset.split(args.split)
        split = args.split
    if not items:
        raise CliError(f"split {split!r} is empty")
    preds = predict(model, items)
    golds = [cs.protoform for cs in items]
    report = evaluate(preds, golds, feature_table(cfg))
    out = out_dir(args)
    write_predictions(out / f"predictions_{split}.tsv", [cs.id for cs in items], golds, preds)
    (out / f"report_{split}.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_json())
    return 0


def write_predictions(path, ids, golds, preds) -> None:
    lines = [f"{i}\t{' '.join(g)}\t{' '.join(p)}" for i, g, p in zip(ids, golds, preds)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_predictions(path) -> tuple[list, list, list]:
    ids, golds, preds = [], [], []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != 3:
            raise ParseError(f"{path}:{n}: expected id<TAB>gold<TAB>pred")
        ids.append(cells[0])
        golds.append(tuple(cells[1].split()))
        preds.append(tuple(cells[2].split()))
    return ids, golds, preds


# ----------------------------------------------------------------- compare


def read_metric(path, metric: str, split: str = "test") -> float:
    """Metric from an EvalReport JSON file or from the final line of a metrics log."""
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        raise CliError(f"{path}: empty file")
    obj = json.loads(text.splitlines()[-1])
    if obj.get("event") == "final":
        obj = obj["reports"].get(split)
        if obj is None:
            raise CliError(f"{path}: no {split} report in final record")
    if metric not in obj:
        raise CliError(f"{path}: no {metric!r} value")
    return float(obj[metric])


def cmd_compare(args) -> int:
    if args.metric not in HIGHER_IS_BETTER:
        raise CliError(f"unknown metric {args.metric!r}; expected one of {sorted(HIGHER_IS_BETTER)}")
    if len(args.a) < 2 or len(args.b) < 2:
        raise CliError("need at least 2 runs per side")
    a = [read_metric(p, args.metric, args.split) for p in args.a]
    b = [read_metric(p, args.metric, args.split) for p in args.b]
    seed = args.seed if args.seed is not None else 0
    res = compare_strategies(a, b, args.metric, args.alpha, args.resamples, seed).to_dict()
    res["metric"] = args.metric
    text = _dump(res)
    (out_dir(args) / "compare.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


# ----------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    out = out_dir(args)
    if args.mode == "errors":
        _, golds, preds = read_predictions(args.input)
        counts = error_analysis([align_pair(p, g) for p, g in zip(preds, golds)])
        _write_table(out / "exchange.tsv", ("gold", "pred"), {(g, p): n for (g, p), n in counts.exchange.items()})
        _write_table(out / "insertions.tsv", ("pred",), {(p,): n for p, n in counts.insertions.items()})
        _write_table(out / "deletions.tsv", ("gold",), {(g,): n for g, n in counts.deletions.items()})
        print(_dump({"exchange": sum(counts.exchange.values()), "insertions": sum(counts.insertions.values()),
                     "deletions": sum(counts.deletions.values())}))
        return 0
    params, vocab, header = load_checkpoint(args.input)
    emb = params.get("phoneme_emb")
    if emb is None:
        raise CliError(f"{args.input}: checkpoint has no phoneme embeddings")
    ids = vocab.phoneme_ids()
    if args.language:
        cfg = RunConfig.from_dict(header["meta"]["config"])
        inventory = _inventory(load_run_data(cfg), args.language)
        ids = [i for i in ids if vocab.tokens[i] in inventory]
    if len(ids) < 2:
        raise CliError("need at least 2 phonemes to cluster")
    tree = ward_cluster({vocab.tokens[i]: emb[i] for i in ids})
    path = out / (f"dendrogram_{args.language}.nwk" if args.language else "dendrogram.nwk")
    path.write_text(tree.newick() + "\n", encoding="utf-8")
    print(path)
    return 0


def _inventory(dataset: Dataset, language: str) -> set:
    if language == dataset.proto_language:
        return {t for cs in dataset.all_sets() if cs.protoform for t in cs.protoform}
    if language not in dataset.languages:
        raise CliError(f"unknown language {language!r}")
    return {t for cs in dataset.all_sets() for t in cs.reflexes.get(language, ())}


def _write_table(path, key_names, counts: dict) -> None:
    rows = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    lines = ["\t".join(key_names + ("count",))] + ["\t".join(k + (str(n),)) for k, n in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    ds, rules = gen_synthetic(args.n_sets, args.n_daughters, seed)
    out = out_dir(args)
    for split in ("train", "valid", "test"):
        (out / f"{split}.tsv").write_text(serialize_rows(ds.split(split), ds.languages), encoding="utf-8")
    (out / "rules.tsv").write_text(rules_to_text(rules), encoding="utf-8")
    print(out)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help=f"output directory (default ${OUT_ENV})")

    p = argparse.ArgumentParser(prog="protorecon", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", parents=[common], help="write nested labeling masks")
    s.add_argument("dataset", help="train TSV")
    s.add_argument("--percents", type=float, nargs="+", default=[5, 10, 20, 30])
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", parents=[common], help="train one run per seed")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="decode and score a split")
    s.add_argument("checkpoint")
    s.add_argument("--split", default="test", choices=["train", "valid", "test"])
    s.add_argument("--train")
    s.add_argument("--valid")
    s.add_argument("--test")
    s.add_argument("--transductive", action="store_true", help="score the unlabeled part of train")
    s.add_argument("--mask")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", parents=[common], help="significance of A vs B over runs")
    s.add_argument("--a", nargs="+", required=True)
    s.add_argument("--b", nargs="+", required=True)
    s.add_argument("--metric", default="acc")
    s.add_argument("--split", default="test")
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--resamples", type=int, default=9999)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("analyze", parents=[common], help="error tables or embedding dendrogram")
    s.add_argument("mode", choices=["errors", "cluster"])
    s.add_argument("input", help="prediction TSV (errors) or checkpoint (cluster)")
    s.add_argument("--language")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    s.add_argument("--n-sets", type=int, default=400)
    s.add_argument("--n-daughters", type=int, default=4)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("config", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CliError, CheckpointError, ParseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
