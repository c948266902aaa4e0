import json
import subprocess
import sys

import numpy as np
import pytest

from treespec.bench import BenchReport, PromptReport, run_bench
from treespec.checkpoint import save_speculator, save_target
from treespec.cli import main
from treespec.verify import StepRecord, StepTrace

from .conftest import tiny_speculator, tiny_target


@pytest.fixture(scope="module")
def ckpts(tmp_path_factory):
    d = tmp_path_factory.mktemp("ck")
    target = tiny_target(0, vocab=32, hidden=16, heads=2, layers=2, max_seq_len=160, dtype="float32")
    save_target(d / "t.spdl", target)
    save_speculator(d / "s.spdl", tiny_speculator(target, init_noise=0.3))
    (d / "corpus.txt").write_text(" ".join(str(i % 32) for i in range(400)) + "\n")
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# ---------------------------------------------------------------- report arithmetic


def test_prompt_report_metrics():
    trace = StepTrace([StepRecord(0, 5, 3, 4, 2), StepRecord(1, 5, 1, 5, 0), StepRecord(2, 5, 4, 9, 3)], 1)
    r = PromptReport.from_trace(0, trace, seconds=2.0)
    assert r.steps == 3 and r.total_tokens == 8  # prefill token excluded
    assert r.extra_tokens_per_step == pytest.approx((8 - 3) / 3)
    assert r.tokens_per_second == pytest.approx(4.5)
    assert r.histogram == {2: 1, 0: 1, 3: 1}


def test_aggregate_pools_steps(target64):
    rep = run_bench(target64, [[1, 2], [3]], "vanilla", max_new=10)
    assert rep.steps == 18 and rep.extra_tokens_per_step == 0.0
    lines = [json.loads(x) for x in rep.to_jsonl().splitlines()]
    assert len(lines) == 3 and lines[-1]["tokens_per_second_note"] == "informational"
    assert "tokens/second" in rep.table()


def test_oracle_mode_hits_depth(target64):
    rep = run_bench(target64, [[1, 2, 3]], "oracle", max_new=61, tree_shape=(1,) * 5)
    assert rep.extra_tokens_per_step == 5.0


def test_spec_mode_needs_speculator(target64):
    with pytest.raises(ValueError):
        run_bench(target64, [[1]], "spec")


# ---------------------------------------------------------------- CLI


def test_vanilla_and_spec_decode_agree(capsys, ckpts):
    _, a, _ = run(capsys, "decode", "--target", ckpts / "t.spdl", "--mode", "vanilla", "--prompt", "1 2 3",
                  "--max-new", 30)
    _, b, _ = run(capsys, "decode", "--target", ckpts / "t.spdl", "--spec", ckpts / "s.spdl", "--prompt", "1 2 3",
                  "--max-new", 30)
    assert a == b and len(a.split()) == 30


def test_bench_oracle_is_five(capsys, ckpts, tmp_path):
    code, out, _ = run(capsys, "bench", "--target", ckpts / "t.spdl", "--mode", "oracle", "--tree", "1,1,1,1,1",
                       "--max-new", 61, "--num-prompts", 2, "--out", tmp_path / "r.jsonl")
    agg = json.loads((tmp_path / "r.jsonl").read_text().splitlines()[-1])
    assert code == 0 and agg["extra_tokens_per_step"] == 5.0


def test_bench_vanilla_is_zero(capsys, ckpts, tmp_path):
    code, _, _ = run(capsys, "bench", "--target", ckpts / "t.spdl", "--mode", "vanilla", "--corpus",
                     ckpts / "corpus.txt", "--num-prompts", 2, "--max-new", 10, "--out", tmp_path / "r.jsonl")
    agg = json.loads((tmp_path / "r.jsonl").read_text().splitlines()[-1])
    assert code == 0 and agg["extra_tokens_per_step"] == 0.0


@pytest.mark.parametrize("argv", [
    ["decode", "--target", "{t}", "--spec", "{s}", "--prompt", "1", "--temp", "-1"],
    ["decode", "--target", "{t}", "--spec", "{s}", "--prompt", "1", "--temp", "2.5"],
    ["decode", "--target", "{t}", "--spec", "{s}", "--prompt", "1", "--tree", "1,1,1,1,1,1"],
    ["decode", "--target", "{t}", "--spec", "{s}", "--prompt", "99"],
    ["decode", "--spec", "{s}", "--prompt", "1"],
    ["train", "--target", "{t}", "--out", "x.spdl"],
    ["train", "--target", "{t}", "--corpus", "/nonexistent", "--out", "x.spdl"],
    ["bench", "--target", "{t}", "--spec", "{s}", "--prompts", "/nonexistent"],
    ["check", "--suite", "42"],
])
def test_usage_errors_exit_2(capsys, ckpts, argv):
    argv = [a.format(t=ckpts / "t.spdl", s=ckpts / "s.spdl") for a in argv]
    code, _, err = run(capsys, *argv)
    assert code == 2 and "error" in err


def test_bad_checkpoint_exits_1(capsys, ckpts, tmp_path):
    bad = tmp_path / "bad.spdl"
    bad.write_bytes(b"nope")
    code, _, err = run(capsys, "decode", "--target", bad, "--mode", "vanilla", "--prompt", "1")
    assert code == 1 and "checkpoint" in err
    code, out, _ = run(capsys, "check", "--target", bad, "--suite", "4", "--quick")
    assert code == 1 and "[FAIL]" in out


def test_config_file_overrides_flags(capsys, ckpts, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"max_new": 7, "temperature": 0}))
    _, out, _ = run(capsys, "decode", "--target", ckpts / "t.spdl", "--mode", "vanilla", "--prompt", "1",
                    "--max-new", 30, "--config", cfg)
    assert len(out.split()) == 7
    cfg.write_text(json.dumps({"bogus": 1}))
    code, _, _ = run(capsys, "decode", "--target", ckpts / "t.spdl", "--prompt", "1", "--config", cfg)
    assert code == 2


def test_sampled_decode_seeded(capsys, ckpts):
    argv = ["decode", "--target", ckpts / "t.spdl", "--spec", ckpts / "s.spdl", "--prompt", "4 5", "--temp", 0.9,
            "--seed", 3, "--max-new", 20]
    assert run(capsys, *argv)[1] == run(capsys, *argv)[1]


def test_gen_corpus_and_train_roundtrip(capsys, tmp_path):
    corpus = tmp_path / "c.txt"
    assert run(capsys, "gen-corpus", "--vocab", 16, "--length", 3000, "--out", corpus)[0] == 0
    tgt = tmp_path / "t.spdl"
    code, out, _ = run(capsys, "train", "--model", "target", "--corpus", corpus, "--out", tgt, "--steps", 20,
                       "--batch-size", 4, "--seq-len", 16, "--hidden", 16, "--attn-heads", 2, "--layers", 1,
                       "--max-seq-len", 128, "--warmup", 5)
    assert code == 0 and json.loads(out)["steps"] == 20
    spec = tmp_path / "s.spdl"
    code, out, _ = run(capsys, "train", "--target", tgt, "--corpus", corpus, "--out", spec, "--steps", 5,
                       "--batch-size", 2, "--seq-len", 16, "--heads", 3, "--augment-layers", 1, "--warmup", 2,
                       "--log-every", 1)
    assert code == 0
    assert json.loads((tmp_path / "s.spdl.config.json").read_text())["train"]["w_reg"] == 10.0
    assert len((tmp_path / "s.spdl.loss.jsonl").read_text().splitlines()) == 5
    code, out, _ = run(capsys, "decode", "--target", tgt, "--spec", spec, "--prompt", "1 2", "--tree", "2,1,1",
                       "--max-new", 12)
    assert code == 0 and len(out.split()) == 12


def test_text_prompt_roundtrip(capsys, tmp_path):
    src = tmp_path / "a.txt"
    src.write_text("abcabcabc " * 40)
    corpus = tmp_path / "c.txt"
    assert run(capsys, "gen-corpus", "--kind", "text", "--input", src, "--out", corpus)[0] == 0
    tgt = tmp_path / "t.spdl"
    run(capsys, "train", "--model", "target", "--corpus", corpus, "--out", tgt, "--steps", 60, "--batch-size", 4,
        "--seq-len", 16, "--hidden", 16, "--attn-heads", 2, "--layers", 1, "--max-seq-len", 64, "--vocab", 256,
        "--warmup", 5, "--lr", 0.01)
    code, out, _ = run(capsys, "decode", "--target", tgt, "--mode", "vanilla", "--prompt-text", "abc",
                       "--max-new", 6, "--text")
    assert code == 0 and len(out.rstrip("\n").encode()) >= 1


def test_check_list_and_quick_suite(capsys):
    code, out, _ = run(capsys, "check", "--list")
    assert code == 0 and len(out.splitlines()) == 10
    code, out, _ = run(capsys, "check", "--suite", "4", "7", "--quick")
    assert code == 0 and out.count("[PASS]") == 2


def test_module_entry_point(ckpts):
    res = subprocess.run([sys.executable, "-m", "treespec", "decode", "--target", str(ckpts / "t.spdl"),
                          "--mode", "vanilla", "--prompt", "1 2", "--max-new", "5"], capture_output=True, text=True)
    assert res.returncode == 0 and len(res.stdout.split()) == 5
