import csv
import json
from pathlib import Path

import numpy as np
import pytest

from hybridret.cli import main
from hybridret.config import RunConfig, parse_config, render_config
from hybridret.encoder import Checkpoint, init_params
from hybridret.retrieval import EmbeddingStore
from hybridret.seeding import subseed

DATA = Path(__file__).parent / "data"
SMALL = ["--set", "dim=8", "--set", "batch_tuples=2", "--set", "queue_size=16", "--quiet"]


def run(*argv) -> int:
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--problems", 6, "--out", root / "synth.jsonl", "--quiet") == 0
    assert run("train", "--corpus", root / "synth.jsonl", "--steps", 4, "--out", root / "run", *SMALL) == 0
    assert run("embed", "--checkpoint", root / "run" / "checkpoint.bin", "--corpus", root / "synth.jsonl",
               "--out", root / "store.bin", "--quiet") == 0
    return root


def test_ingest_stage_counts(tmp_path, capsys):
    assert run("ingest", DATA / "mini_corpus.jsonl", "--out", tmp_path / "c.jsonl") == 0
    out = capsys.readouterr().out.splitlines()
    # two lexer failures, then the comment-only duplicate goes
    assert out[:4] == ["ingested\t10", "syntactic\t8", "capped\t8", "deduplicated\t7"]
    assert len((tmp_path / "c.jsonl").read_text().splitlines()) == 7


def test_ingest_is_idempotent(tmp_path):
    assert run("ingest", DATA / "mini_corpus.jsonl", "--out", tmp_path / "a.jsonl", "--quiet") == 0
    assert run("ingest", tmp_path / "a.jsonl", "--out", tmp_path / "b.jsonl", "--quiet") == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_ingest_empty_and_missing_inputs(tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    assert run("ingest", tmp_path / "empty.jsonl", "--out", tmp_path / "x.jsonl", "--quiet") == 2
    assert run("ingest", tmp_path / "nope.jsonl", "--quiet") == 2
    (tmp_path / "bad.jsonl").write_text("{not json\n")
    assert run("ingest", tmp_path / "bad.jsonl", "--out", tmp_path / "x.jsonl", "--quiet") == 2


def test_bad_config_exits_2(tmp_path):
    (tmp_path / "c.cfg").write_text("bogus = 1\n")
    assert run("synth", "--config", tmp_path / "c.cfg", "--out", tmp_path / "s.jsonl") == 2
    assert run("synth", "--set", "lr=abc", "--out", tmp_path / "s.jsonl") == 2
    assert run("synth", "--preset", "galactic", "--out", tmp_path / "s.jsonl") == 2
    assert run("frobnicate") == 2
    assert run("--help") == 0


def test_synth_counts_and_determinism(tmp_path):
    assert run("synth", "--problems", 50, "--out", tmp_path / "a.jsonl", "--quiet") == 0
    assert run("synth", "--problems", 50, "--out", tmp_path / "b.jsonl", "--quiet") == 0
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert len(lines) == 150
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert run("synth", "--problems", 5, "--languages", "toy_a,python", "--out", tmp_path / "c.jsonl") == 2


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    log = read_csv(run_dir / "train_log.csv")
    assert [int(r["step"]) for r in log] == [1, 2, 3, 4]
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert "wall_clock_s" not in manifest and "wall_clock_s" in json.loads((run_dir / "timing.json").read_text())
    cfg = parse_config(manifest["run_config"])
    assert cfg.steps == 4 and cfg.dim == 8
    assert manifest["checkpoint_sha256"]


def test_train_zero_steps_is_init(tmp_path, workspace):
    assert run("train", "--corpus", workspace / "synth.jsonl", "--steps", 0, "--out", tmp_path, *SMALL) == 0
    ck = Checkpoint.load(tmp_path / "checkpoint.bin")
    init = init_params(8, len(ck.vocab), subseed(RunConfig().seed, "init"))
    for a, b in zip(ck.state.query.arrays(), init.arrays()):
        assert np.array_equal(a, b.astype(np.float32).astype(float))
    assert (tmp_path / "train_log.csv").read_text().splitlines() == [
        (tmp_path / "train_log.csv").read_text().splitlines()[0]
    ]


def test_ablate_rpcl_zeroes_column(tmp_path, workspace):
    assert run("train", "--corpus", workspace / "synth.jsonl", "--steps", 3, "--ablate", "rpcl",
               "--out", tmp_path, *SMALL) == 0
    log = read_csv(tmp_path / "train_log.csv")
    rpcl_cols = [c for c in log[0] if "rpcl" in c or "mmd" in c]
    assert rpcl_cols
    assert all(float(r[c]) == 0.0 for r in log for c in rpcl_cols)
    assert all(float(r["l_mpcl"]) > 0 for r in log)


def test_sweep_rows(tmp_path, workspace):
    assert run("train", "--corpus", workspace / "synth.jsonl", "--steps", 2, "--sweep", "queue",
               "--values", "16,32,24", "--out", tmp_path, *SMALL) == 0
    rows = read_csv(tmp_path / "sweep_queue.csv")
    assert [int(r["value"]) for r in rows] == [16, 24, 32]
    assert all(r["parameter"] == "queue_size" and int(r["steps"]) == 2 for r in rows)
    for r in rows:
        assert 0 < float(r["code2code_mrr"]) <= 1
        steps = [int(x["step"]) for x in read_csv(tmp_path / f"queue_{r['value']}" / "train_log.csv")]
        assert steps == sorted(steps)


def test_embed_refuses_stale_store(tmp_path, workspace):
    store = tmp_path / "store.bin"
    ckpt = workspace / "run" / "checkpoint.bin"
    corpus = workspace / "synth.jsonl"
    assert run("embed", "--checkpoint", ckpt, "--corpus", corpus, "--out", store, "--quiet") == 0
    # same inputs: refreshing is fine
    assert run("embed", "--checkpoint", ckpt, "--corpus", corpus, "--out", store, "--quiet") == 0
    assert run("train", "--corpus", corpus, "--steps", 1, "--seed", 5, "--out", tmp_path / "other", *SMALL) == 0
    other = tmp_path / "other" / "checkpoint.bin"
    assert run("embed", "--checkpoint", other, "--corpus", corpus, "--out", store, "--quiet") == 2
    assert run("embed", "--checkpoint", other, "--corpus", corpus, "--out", store, "--force", "--quiet") == 0
    assert EmbeddingStore.load(store).fingerprint == Checkpoint.load(other).fingerprint()


def test_eval_outputs(tmp_path, workspace):
    assert run("eval", "--store", workspace / "store.bin", "--checkpoint", workspace / "run" / "checkpoint.bin",
               "--corpus", workspace / "synth.jsonl", "--gridsearch", "--heatmap", "Code2Code",
               "--set", "alpha_step=0.25", "--dataset", "toy", "--out", tmp_path, "--quiet") == 0
    rows = read_csv(tmp_path / "metrics.csv")
    strategies = {r["strategy"] for r in rows}
    assert strategies == {"NL2Code", "NL2NL", "Code2Code", "Remix", "Concat", "Weight"}
    # one sample per language and problem: intra-language scenarios have nothing relevant and are skipped
    assert len([r for r in rows if r["strategy"] == "Code2Code"]) == 6
    assert all(r["dataset"] == "toy" and 0 < float(r["mrr"]) <= 1 for r in rows)
    wr = read_csv(tmp_path / "weight_report.csv")
    assert float(wr[0]["alpha_star"]) in (0.0, 0.25, 0.5, 0.75, 1.0)
    assert len(read_csv(tmp_path / "alpha_curve.csv")) == 5
    assert (tmp_path / "heatmap_Code2Code.svg").read_text().startswith("<svg")
    lines = (tmp_path / "heatmap_Code2Code.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[1].split(",")[1] == ""


def test_eval_rejects_stale_store_and_bad_strategy(tmp_path, workspace):
    assert run("train", "--corpus", workspace / "synth.jsonl", "--steps", 1, "--seed", 9,
               "--out", tmp_path, *SMALL) == 0
    args = ["eval", "--store", workspace / "store.bin", "--out", tmp_path, "--quiet"]
    assert run(*args, "--checkpoint", tmp_path / "checkpoint.bin") == 2
    assert run(*args, "--checkpoint", tmp_path / "checkpoint.bin", "--force", "--strategies", "Code2Code") == 0
    assert run(*args, "--strategies", "Telepathy") == 2
    assert run(*args, "--strategies", "Remix") == 2
    assert run("eval", "--out", tmp_path) == 2


def test_eval_significance(tmp_path, workspace):
    assert run("eval", "--store", workspace / "store.bin", "--significance", workspace / "store.bin",
               "--strategies", "Code2Code", "--set", "significance_resamples=100", "--out", tmp_path,
               "--quiet") == 0
    rows = read_csv(tmp_path / "significance.csv")
    assert rows and all(float(r["p_value"]) == 1.0 for r in rows)


def test_report(tmp_path, workspace, capsys):
    assert run("eval", "--store", workspace / "store.bin", "--strategies", "NL2Code,Code2Code",
               "--out", tmp_path, "--quiet") == 0
    capsys.readouterr()
    assert run("report", tmp_path / "metrics.csv") == 0
    text = capsys.readouterr().out
    assert "| NL2Code MRR | NL2Code MAP | Code2Code MRR | Code2Code MAP |" in text
    assert run("report", tmp_path / "metrics.csv", "--out", tmp_path / "summary.md", "--quiet") == 0
    assert (tmp_path / "summary.md").read_text() == text
    (tmp_path / "junk.csv").write_text("x,y\n")
    assert run("report", tmp_path / "junk.csv") == 2


def test_flags_override_config_file(tmp_path, workspace):
    (tmp_path / "run.cfg").write_text(render_config(RunConfig(steps=50, dim=16)))
    assert run("train", "--config", tmp_path / "run.cfg", "--corpus", workspace / "synth.jsonl",
               "--steps", 1, *SMALL, "--out", tmp_path / "o") == 0
    cfg = parse_config(json.loads((tmp_path / "o" / "manifest.json").read_text())["run_config"])
    assert cfg.steps == 1 and cfg.dim == 8
