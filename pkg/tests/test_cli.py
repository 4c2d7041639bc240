import json
from pathlib import Path

import numpy as np
import pytest

from composed_retrieval.checkpoint import load_checkpoint
from composed_retrieval.cli import main
from composed_retrieval.composition import CATEGORIES
from composed_retrieval.config import RunConfig
from composed_retrieval.eval_ensemble import ScoreMatrix
from composed_retrieval.model import RetrievalModel

TINY_RUN = {
    "encoder": {"hidden_dim": 16, "num_heads": 2, "intermediate_dim": 32},
    "composition": {"embed_dim": 16, "hidden_dim": 16, "category_dim": 4},
    "optim": {"lr_composition": 1e-3, "lr_encoder": 1e-4, "batch_size": 4, "epochs": 2, "max_steps": 6},
    "pretrain": {"steps": 3, "batch_size": 4},
    "fixture": {"num_items": 6, "feature_dim": 8},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.json").write_text(json.dumps(TINY_RUN))
    assert run("fixture", "--config", root / "run.json", "--out", root / "fx") == 0
    return root


def _cfg(workspace):
    return workspace / "fx" / "config.json"


def _bytes(directory: Path):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


def test_fixture_writes_expected_files(workspace):
    names = set(_bytes(workspace / "fx"))
    assert {"train.jsonl", "val.jsonl", "test.jsonl", "embeddings.json", "embeddings.bin",
            "vocab.txt", "corpus.jsonl", "config.json"} <= names


def test_fixture_same_seed_same_bytes(workspace, tmp_path):
    assert run("fixture", "--config", workspace / "run.json", "--out", tmp_path / "again") == 0
    assert _bytes(tmp_path / "again") == _bytes(workspace / "fx")


def test_fixture_seed_changes_data(workspace, tmp_path):
    assert run("fixture", "--config", workspace / "run.json", "--seed", 1, "--out", tmp_path / "s1") == 0
    assert (tmp_path / "s1" / "train.jsonl").read_bytes() != (workspace / "fx" / "train.jsonl").read_bytes()


def test_pretrain_zero_steps_equals_initialization(workspace, tmp_path):
    assert run("pretrain-text", "--config", _cfg(workspace), "--steps", 0, "--out", tmp_path) == 0
    model, _, _ = load_checkpoint(tmp_path)
    cfg = RunConfig.load(_cfg(workspace))
    init = RetrievalModel.init(cfg.encoder_config, cfg.composition, model.encoder.vocab_size,
                               model.feature_dim, cfg.optim.seed, model.encoder.num_categories)
    for name, p in init.named_parameters().items():
        assert np.array_equal(model.named_parameters()[name].data, p.data)


def test_pretrain_is_deterministic(workspace, tmp_path):
    for tag in ("a", "b"):
        assert run("pretrain-text", "--config", _cfg(workspace), "--steps", 50, "--out", tmp_path / tag) == 0
    assert _bytes(tmp_path / "a") == _bytes(tmp_path / "b")
    lines = (tmp_path / "a" / "pretrain_metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == list(range(50))


def test_pretrain_on_fixture_corpus_halves_loss(tmp_path):
    from composed_retrieval.config import DESK_SCALE
    from composed_retrieval.data import fixture_vocabulary
    from composed_retrieval.training import evaluate_pretrain_loss

    cfg_path = tmp_path / "desk.json"
    cfg_path.write_text(json.dumps(DESK_SCALE))
    assert run("fixture", "--config", cfg_path, "--out", tmp_path / "fx") == 0
    assert run("pretrain-text", "--config", tmp_path / "fx" / "config.json", "--steps", 0,
               "--out", tmp_path / "p0") == 0
    assert run("pretrain-text", "--config", tmp_path / "fx" / "config.json", "--steps", 200,
               "--out", tmp_path / "p200") == 0
    cfg = RunConfig.load(tmp_path / "fx" / "config.json")
    corpus = [json.loads(l) for l in (tmp_path / "fx" / "corpus.jsonl").read_text().splitlines()]
    vocab = fixture_vocabulary()
    start = evaluate_pretrain_loss(load_checkpoint(tmp_path / "p0")[0], corpus, vocab, cfg)
    end = evaluate_pretrain_loss(load_checkpoint(tmp_path / "p200")[0], corpus, vocab, cfg)
    assert end < 0.5 * start


def test_train_uses_pretrained_encoder(workspace, tmp_path):
    assert run("pretrain-text", "--config", _cfg(workspace), "--out", tmp_path / "pre") == 0
    assert run("train", "--config", _cfg(workspace), "--checkpoint", tmp_path / "pre",
               "--out", tmp_path / "ft") == 0
    pre, _, _ = load_checkpoint(tmp_path / "pre")
    ft, _, _ = load_checkpoint(tmp_path / "ft")
    # heads get no retrieval gradient, so they survive fine-tuning untouched
    for p, q in zip(pre.encoder.head_parameters(), ft.encoder.head_parameters()):
        assert np.array_equal(p.data, q.data)


def test_train_deterministic_and_metrics(workspace, tmp_path):
    for tag in ("a", "b"):
        assert run("train", "--config", _cfg(workspace), "--out", tmp_path / tag) == 0
    assert _bytes(tmp_path / "a") == _bytes(tmp_path / "b")
    recs = [json.loads(l) for l in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == list(range(6))
    assert all(set(r) == {"step", "loss"} for r in recs)


def test_zero_learning_rates_leave_parameters_unchanged(workspace, tmp_path):
    raw = json.loads(_cfg(workspace).read_text())
    raw["optim"].update(lr_composition=0.0, lr_encoder=0.0, max_steps=None, epochs=1)
    cfg_path = workspace / "fx" / "frozen.json"
    cfg_path.write_text(json.dumps(raw))
    assert run("train", "--config", cfg_path, "--out", tmp_path) == 0
    trained, _, _ = load_checkpoint(tmp_path)
    cfg = RunConfig.load(cfg_path)
    init = RetrievalModel.init(cfg.encoder_config, cfg.composition, trained.encoder.vocab_size,
                               trained.feature_dim, cfg.optim.seed)
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) > 0
    for name, p in init.named_parameters().items():
        assert np.array_equal(trained.named_parameters()[name].data, p.data)


@pytest.fixture(scope="module")
def trained_pair(workspace):
    for seed in (0, 1):
        assert run("train", "--config", _cfg(workspace), "--seed", seed,
                   "--out", workspace / f"ck{seed}") == 0
    return workspace / "ck0", workspace / "ck1"


def test_rank_twice_identical(workspace, trained_pair, capsys):
    reports = []
    for tag in ("r1", "r2"):
        assert run("rank", "--config", _cfg(workspace), "--checkpoint", trained_pair[0],
                   "--out", workspace / tag) == 0
        reports.append(capsys.readouterr().out)
    assert reports[0] == reports[1]
    assert (workspace / "r1" / "report.json").read_text().strip() == reports[0].strip()
    assert _bytes(workspace / "r1" / "model_0") == _bytes(workspace / "r2" / "model_0")


def test_rank_threads_same_report(workspace, trained_pair, capsys):
    run("rank", "--config", _cfg(workspace), "--checkpoint", trained_pair[0])
    single = capsys.readouterr().out
    run("rank", "--config", _cfg(workspace), "--checkpoint", trained_pair[0], "--threads", 3)
    assert capsys.readouterr().out == single


def test_ensemble_of_same_checkpoint_equals_single(workspace, trained_pair, capsys):
    run("rank", "--config", _cfg(workspace), "--checkpoint", trained_pair[0])
    single = capsys.readouterr().out
    run("rank", "--config", _cfg(workspace), "--checkpoint", trained_pair[0],
        "--checkpoint", trained_pair[0])
    assert capsys.readouterr().out == single


def test_ensemble_matches_manual_average_of_persisted(workspace, trained_pair, capsys):
    out = workspace / "ens"
    assert run("rank", "--config", _cfg(workspace), "--checkpoint", trained_pair[0],
               "--checkpoint", trained_pair[1], "--out", out) == 0
    capsys.readouterr()
    for c in CATEGORIES:
        a = ScoreMatrix.load(out / "model_0" / f"{c}.json")
        b = ScoreMatrix.load(out / "model_1" / f"{c}.json")
        e = ScoreMatrix.load(out / "ensemble" / f"{c}.json")
        manual = [[(x + y) / 2 for x, y in zip(ra, rb)] for ra, rb in zip(a.scores.tolist(), b.scores.tolist())]
        # persisted values are 32-bit
        np.testing.assert_allclose(e.scores, manual, rtol=0, atol=1e-7)
        assert e.query_ids == a.query_ids and e.gallery_ids == a.gallery_ids
    # the offline ensemble command over the persisted matrices reproduces the
    # elementwise mean exactly at storage precision
    assert run("ensemble", "--config", _cfg(workspace), "--scores", out / "model_0",
               "--scores", out / "model_1", "--out", workspace / "offline") == 0
    capsys.readouterr()
    for c in CATEGORIES:
        a = ScoreMatrix.load(out / "model_0" / f"{c}.json").scores
        b = ScoreMatrix.load(out / "model_1" / f"{c}.json").scores
        off = ScoreMatrix.load(workspace / "offline" / f"{c}.json").scores
        assert np.array_equal(off, ((a + b) / 2).astype(np.float32).astype(np.float64))


def test_eval_reads_persisted_scores(workspace, trained_pair, capsys):
    assert run("rank", "--config", _cfg(workspace), "--checkpoint", trained_pair[0],
               "--out", workspace / "ev") == 0
    capsys.readouterr()
    assert run("eval", "--config", _cfg(workspace), "--scores", workspace / "ev" / "model_0") == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"dress", "shirt", "toptee", "average"}
    assert all(0.0 <= report[c][k] <= 100.0 for c in CATEGORIES for k in ("r10", "r50"))


# --- exit codes ----------------------------------------------------------------


def test_missing_config_exits_one(tmp_path, capsys):
    assert run("train", "--config", tmp_path / "none.json") == 1
    assert "error" in capsys.readouterr().err


def test_unknown_category_exits_one(workspace, tmp_path):
    raw = json.loads(_cfg(workspace).read_text())
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"candidate": "a", "target": "b", "captions": ["x"], "category": "hat"}) + "\n")
    raw["paths"] = {**raw["paths"], "train": str(bad), "embeddings": str(workspace / "fx" / "embeddings.json"),
                    "vocab": str(workspace / "fx" / "vocab.txt")}
    (tmp_path / "c.json").write_text(json.dumps(raw))
    assert run("train", "--config", tmp_path / "c.json") == 1


def test_dimension_mismatch_exits_one_before_compute(workspace, tmp_path):
    raw = json.loads(_cfg(workspace).read_text())
    raw["fixture"]["feature_dim"] = 5
    (tmp_path / "run.json").write_text(json.dumps(raw))
    assert run("fixture", "--config", tmp_path / "run.json", "--out", tmp_path / "fx5") == 0
    ckpt = workspace / "dimcheck"
    assert run("train", "--config", _cfg(workspace), "--out", ckpt) == 0
    assert run("rank", "--config", tmp_path / "fx5" / "config.json", "--checkpoint", ckpt) == 1


def test_rank_without_checkpoint_exits_one(workspace):
    assert run("rank", "--config", _cfg(workspace)) == 1


def test_non_finite_features_exit_two(workspace, tmp_path):
    from composed_retrieval.data import EmbeddingStore

    store = EmbeddingStore.load(workspace / "fx" / "embeddings.json")
    poisoned = np.array(store.matrix)
    poisoned[:] = np.nan
    EmbeddingStore(store.ids, poisoned).save(tmp_path / "emb.json")
    raw = json.loads(_cfg(workspace).read_text())
    raw["paths"] = {**raw["paths"], "train": str(workspace / "fx" / "train.jsonl"),
                    "embeddings": str(tmp_path / "emb.json"), "vocab": str(workspace / "fx" / "vocab.txt")}
    (tmp_path / "c.json").write_text(json.dumps(raw))
    assert run("train", "--config", tmp_path / "c.json", "--out", tmp_path / "ck") == 2
