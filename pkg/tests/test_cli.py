import json
import subprocess
import sys

import pytest

from protorecon.cli import main, read_predictions
from protorecon.corpus import (
    LabelingMask,
    apply_rules,
    default_feature_table,
    load_dataset,
    parse_rows,
    rules_from_text,
)
from protorecon.evalsuite import evaluate, token_edit_distance
from protorecon.seq2seq import load_checkpoint

TINY = {
    "synthetic_n_sets": 40,
    "synthetic_n_daughters": 3,
    "max_epochs": 3,
    "batch_size": 16,
    "warmup_epochs": 1,
    "learning_rate": 0.003,
    "d2p_embedding_size": 8,
    "d2p_model_size": 8,
    "d2p_encoder_layers_count": 1,
    "d2p_number_of_heads": 2,
    "d2p_feedforward_dimension": 16,
    "d2p_inference_decode_max_length": 8,
    "p2d_model_size": 8,
    "p2d_encoder_layers_count": 1,
    "p2d_number_of_heads": 2,
    "p2d_feedforward_dimension": 16,
    "dpd_shared_embedding_size": 8,
}


def _config(tmp_path, name="cfg.json", **kw):
    path = tmp_path / name
    path.write_text(json.dumps({**TINY, **kw}), encoding="utf-8")
    return str(path)


def _synth(tmp_path, *extra):
    out = tmp_path / "data"
    assert main(["synth", "--n-sets", "40", "--n-daughters", "3", "--out", str(out), *extra]) == 0
    return out


def _lines(path):
    return path.read_text(encoding="utf-8").splitlines()


# ------------------------------------------------------------------- synth


def test_synth_round_trip_and_rules(tmp_path):
    out = _synth(tmp_path, "--seed", "3")
    ds = load_dataset(out / "train.tsv", out / "valid.tsv", out / "test.tsv")
    assert len(ds.train) + len(ds.valid) + len(ds.test) == 40
    rules = rules_from_text((out / "rules.tsv").read_text(encoding="utf-8"))
    for cs in ds.all_sets():
        for d, refl in cs.reflexes.items():
            assert apply_rules(cs.protoform, [r for r in rules if r.daughter == d]) == refl
    again = tmp_path / "again"
    main(["synth", "--n-sets", "40", "--n-daughters", "3", "--seed", "3", "--out", str(again)])
    for f in ("train.tsv", "valid.tsv", "test.tsv", "rules.tsv"):
        assert (out / f).read_bytes() == (again / f).read_bytes()


# ------------------------------------------------------------------- split


def test_split_writes_nested_masks(tmp_path):
    data = _synth(tmp_path)
    out = tmp_path / "masks"
    assert main(["split", str(data / "train.tsv"), "--percents", "5", "10", "20", "30", "100",
                 "--seed", "7", "--out", str(out)]) == 0
    masks = [LabelingMask.from_text((out / f"mask_p{p}_s7.txt").read_text(encoding="utf-8"))
             for p in (5, 10, 20, 30, 100)]
    assert all(a.labeled_ids <= b.labeled_ids for a, b in zip(masks, masks[1:]))
    _, items = parse_rows((data / "train.tsv").read_text(encoding="utf-8"))
    assert masks[-1].labeled_ids == {cs.id for cs in items}
    first = (out / "mask_p10_s7.txt").read_bytes()
    main(["split", str(data / "train.tsv"), "--percents", "10", "--seed", "7", "--out", str(out)])
    assert (out / "mask_p10_s7.txt").read_bytes() == first


def test_split_missing_file_reports_error(tmp_path, capsys):
    assert main(["split", str(tmp_path / "nope.tsv"), "--out", str(tmp_path)]) == 1
    assert "nope.tsv" in capsys.readouterr().err


# ------------------------------------------------------------------- train


def test_train_writes_log_and_checkpoint(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", _config(tmp_path, strategy="DPD-PIM-BST", labeling_percent=30,
                                              bootstrapping_warmup_epochs=0), "--out", str(out)]) == 0
    recs = [json.loads(l) for l in _lines(out / "metrics.jsonl")]
    assert recs[0]["event"] == "start" and recs[-1]["event"] == "final"
    assert recs[-1]["completed"] and set(recs[-1]["reports"]) == {"valid", "test"}
    assert {"acc", "ted", "ter", "fer", "bcfs", "n"} <= set(recs[-1]["reports"]["test"])
    assert any(r.get("split") == "valid" and "val_ted" in r for r in recs)
    epoch_recs = [r for r in recs if r.get("split") == "train" and "pool_size" in r]
    assert len(epoch_recs) == 3 and all("lr" in r and "consistency_weight" in r for r in epoch_recs)
    _, _, header = load_checkpoint(out / "checkpoint.bin")
    assert header["meta"]["config"]["strategy"] == "DPD-PIM-BST"
    assert len(header["meta"]["labeled_ids"]) == 8  # 30% of 28


def test_train_zero_epochs(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", _config(tmp_path, max_epochs=0), "--out", str(out)]) == 0
    recs = [json.loads(l) for l in _lines(out / "metrics.jsonl")]
    assert [r.get("event") for r in recs] == ["start", "final"]
    assert (out / "checkpoint.bin").exists()


def test_train_is_deterministic(tmp_path):
    cfg = _config(tmp_path, strategy="DPD", labeling_percent=20)
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert main(["train", "--config", cfg, "--out", str(o)]) == 0
    a, b = (_lines(o / "metrics.jsonl") for o in outs)
    assert a[1:] == b[1:] and len(a) > 5
    assert json.loads(a[0])["created"]

    def body(path):
        raw = path.read_bytes()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl])
        header.pop("created")
        return header, raw[nl:]

    assert body(outs[0] / "checkpoint.bin") == body(outs[1] / "checkpoint.bin")


def test_train_multi_seed_threads(tmp_path):
    out = tmp_path / "multi"
    assert main(["--out", str(out), "train", "--config", _config(tmp_path, max_epochs=1),
                 "--seeds", "1", "2", "--jobs", "2"]) == 0
    for s in (1, 2):
        assert json.loads(_lines(out / f"seed{s}" / "metrics.jsonl")[-1])["event"] == "final"
    assert _lines(out / "seed1" / "metrics.jsonl")[1:] != _lines(out / "seed2" / "metrics.jsonl")[1:]


@pytest.mark.parametrize("bad,key", [
    ({"batch_size": 0}, "batch_size"),
    ({"learning_rate": "fast"}, "learning_rate"),
    ({"no_such_key": 1}, "no_such_key"),
    ({"strategy": "MAGIC"}, "strategy"),
    ({"d2p_model_size": 10, "d2p_number_of_heads": 3, "architecture": "transformer"}, "d2p"),
])
def test_train_rejects_bad_config(tmp_path, capsys, bad, key):
    assert main(["train", "--config", _config(tmp_path, **bad), "--out", str(tmp_path)]) == 2
    assert key in capsys.readouterr().err


# -------------------------------------------------------------------- eval


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    out = tmp / "run"
    cfg = _config(tmp, labeling_percent=30, max_epochs=3)
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    return tmp, out / "checkpoint.bin"


def test_eval_report_recomputable_from_tsv(trained):
    tmp, ck = trained
    out = tmp / "eval"
    assert main(["eval", str(ck), "--out", str(out)]) == 0
    report = json.loads((out / "report_test.json").read_text(encoding="utf-8"))
    ids, golds, preds = read_predictions(out / "predictions_test.tsv")
    assert len(ids) == report["n"] == 8
    again = evaluate(preds, golds, default_feature_table())
    assert again.__dict__ == report


def test_eval_transductive(trained):
    tmp, ck = trained
    out = tmp / "trans"
    assert main(["eval", str(ck), "--transductive", "--out", str(out)]) == 0
    ids, _, _ = read_predictions(out / "predictions_transductive.tsv")
    _, _, header = load_checkpoint(ck)
    assert len(ids) == 28 - 8 and not set(ids) & set(header["meta"]["labeled_ids"])


def test_eval_refuses_other_vocabulary(trained, tmp_path, capsys):
    _, ck = trained
    paths = []
    for split in ("train", "valid", "test"):
        paths += [f"--{split}", str(tmp_path / f"{split}.tsv")]
        (tmp_path / f"{split}.tsv").write_text(f"id\tprotoform\tX\n{split}1\tq q\tq\n", encoding="utf-8")
    assert main(["eval", str(ck), *paths, "--out", str(tmp_path)]) == 1
    assert "hash" in capsys.readouterr().err


def test_eval_empty_split(tmp_path, capsys):
    data = tmp_path / "d"
    data.mkdir()
    rows = "id\tprotoform\tA\nt1\tp a\tb a\n"
    (data / "train.tsv").write_text(rows, encoding="utf-8")
    (data / "valid.tsv").write_text(rows.replace("t1", "v1"), encoding="utf-8")
    (data / "test.tsv").write_text("id\tprotoform\tA\n", encoding="utf-8")
    cfg = _config(tmp_path, train_path=str(data / "train.tsv"), valid_path=str(data / "valid.tsv"),
                  test_path=str(data / "test.tsv"), max_epochs=0)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    assert main(["eval", str(tmp_path / "r" / "checkpoint.bin"), "--out", str(tmp_path)]) == 1
    assert "empty" in capsys.readouterr().err


def test_memorised_item_scores_perfectly(tmp_path):
    data = tmp_path / "d"
    data.mkdir()
    (data / "train.tsv").write_text("id\tprotoform\tA\tB\nt1\tp a t\tb a t\tp o\n", encoding="utf-8")
    (data / "valid.tsv").write_text("id\tprotoform\tA\tB\nv1\tp a t\tb a t\tp o\n", encoding="utf-8")
    cfg = _config(tmp_path, train_path=str(data / "train.tsv"), valid_path=str(data / "valid.tsv"),
                  max_epochs=200, learning_rate=0.01, d2p_dropout=0.0, daughter_drop_probability=0.0,
                  permute_daughters=False, d2p_embedding_size=16, d2p_model_size=16)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    assert main(["eval", str(tmp_path / "r" / "checkpoint.bin"), "--split", "train", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report_train.json").read_text(encoding="utf-8"))
    assert (report["acc"], report["ted"], report["bcfs"]) == (1.0, 0.0, 1.0)


# ----------------------------------------------------------------- compare


def _report(path, acc):
    path.write_text(json.dumps({"acc": acc, "ted": 1 - acc}), encoding="utf-8")
    return str(path)


def test_compare_cli(tmp_path, capsys):
    a = [_report(tmp_path / f"a{i}.json", 0.8 + 0.01 * i) for i in range(10)]
    b = [_report(tmp_path / f"b{i}.json", 0.2 + 0.01 * i) for i in range(10)]
    assert main(["compare", "--a", *a, "--b", *b, "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "compare.json").read_text(encoding="utf-8"))
    assert res["significant"] and res["better"] == "A"
    assert {"wilcoxon_p", "bootstrap_p", "mean_a", "mean_b"} <= set(res)
    assert main(["compare", "--a", *a, "--b", *a, "--out", str(tmp_path)]) == 0
    assert not json.loads((tmp_path / "compare.json").read_text(encoding="utf-8"))["significant"]
    assert main(["compare", "--a", a[0], "--b", *b, "--out", str(tmp_path)]) == 1
    assert main(["compare", "--a", *a, "--b", *b, "--metric", "bleu", "--out", str(tmp_path)]) == 1


def test_compare_reads_metrics_logs(trained, tmp_path):
    _, ck = trained
    log = ck.parent / "metrics.jsonl"
    assert main(["compare", "--a", str(log), str(log), "--b", str(log), str(log), "--out", str(tmp_path)]) == 0


# ----------------------------------------------------------------- analyze


def test_analyze_errors_recount(tmp_path):
    tsv = tmp_path / "p.tsv"
    tsv.write_text("a\tk a t\tk o t\nb\tp i\tp i s\nc\tt u\tu\nd\tm a\tm a\n", encoding="utf-8")
    assert main(["analyze", "errors", str(tsv), "--out", str(tmp_path)]) == 0
    exchange = _lines(tmp_path / "exchange.tsv")
    assert exchange == ["gold\tpred\tcount", "a\to\t1"]
    assert _lines(tmp_path / "insertions.tsv") == ["pred\tcount", "s\t1"]
    assert _lines(tmp_path / "deletions.tsv") == ["gold\tcount", "t\t1"]
    _, golds, preds = read_predictions(tsv)
    total = sum(int(l.split("\t")[-1]) for f in ("exchange", "insertions", "deletions")
                for l in _lines(tmp_path / f"{f}.tsv")[1:])
    assert total == sum(token_edit_distance(p, g) for p, g in zip(preds, golds))


def test_analyze_perfect_predictions_empty_tables(tmp_path):
    tsv = tmp_path / "p.tsv"
    tsv.write_text("a\tk a\tk a\n", encoding="utf-8")
    assert main(["analyze", "errors", str(tsv), "--out", str(tmp_path)]) == 0
    assert _lines(tmp_path / "exchange.tsv") == ["gold\tpred\tcount"]


def test_analyze_cluster(trained):
    tmp, ck = trained
    out = tmp / "cluster"
    assert main(["analyze", "cluster", str(ck), "--out", str(out)]) == 0
    tree = (out / "dendrogram.nwk").read_text(encoding="utf-8").strip()
    assert tree.startswith("(") and tree.endswith(");")
    params, vocab, _ = load_checkpoint(ck)
    assert all(vocab.tokens[i] in tree for i in vocab.phoneme_ids())
    assert main(["analyze", "cluster", str(ck), "--language", "Lang1", "--out", str(out)]) == 0
    assert (out / "dendrogram_Lang1.nwk").exists()


def test_analyze_cluster_three_phonemes(tmp_path):
    data = tmp_path / "d"
    data.mkdir()
    (data / "train.tsv").write_text("id\tprotoform\tA\nt1\tp a\tb a\n", encoding="utf-8")
    (data / "valid.tsv").write_text("id\tprotoform\tA\nv1\tp a\tb a\n", encoding="utf-8")
    cfg = _config(tmp_path, train_path=str(data / "train.tsv"), valid_path=str(data / "valid.tsv"), max_epochs=0)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    assert main(["analyze", "cluster", str(tmp_path / "r" / "checkpoint.bin"), "--out", str(tmp_path)]) == 0
    tree = (tmp_path / "dendrogram.nwk").read_text(encoding="utf-8").strip()
    assert tree.count("(") == 2 and all(t in tree for t in ("a", "b", "p"))


def test_analyze_cluster_needs_embeddings(tmp_path, capsys):
    from protorecon.corpus import Dataset, CognateSet, build_vocab
    from protorecon.seq2seq import save_checkpoint
    v = build_vocab(Dataset(["A"], train=[CognateSet("x", {"A": ("a",)}, ("b",))]))
    save_checkpoint(tmp_path / "ck.bin", {}, v, {})
    assert main(["analyze", "cluster", str(tmp_path / "ck.bin"), "--out", str(tmp_path)]) == 1
    assert "embeddings" in capsys.readouterr().err


# -------------------------------------------------------------- entry point


def test_module_entry_point_and_env_out(tmp_path):
    env = {"PROTORECON_OUT": str(tmp_path / "envout"), "PATH": ""}
    proc = subprocess.run([sys.executable, "-m", "protorecon", "synth", "--n-sets", "20", "--n-daughters", "2"],
                          capture_output=True, text=True, env={**env, "PYTHONPATH": ":".join(sys.path)})
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "envout" / "train.tsv").exists()
