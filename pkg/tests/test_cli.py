import csv
from pathlib import Path

import pytest

from zero_avsr import cli, const
from zero_avsr.exceptions import DivergedLoss, InfeasibleMapping
from zero_avsr.trainer import read_metrics

TINY = str(Path(__file__).resolve().parents[1] / "configs" / "tiny.yaml")


def zeroavsr(command, out, *overrides, config=TINY):
    argv = [command, "--config", config, "--out", str(out), "--log-level", "WARNING"]
    for item in overrides:
        argv += ["--set", item]
    return cli.main(argv)


def read_rows(path):
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    paths = {name: root / name for name in ("corpus", "romanizer", "lm")}
    assert zeroavsr("gen-corpus", paths["corpus"]) == 0
    corpus = f"paths.corpus={paths['corpus']}"
    assert zeroavsr("train-romanizer", paths["romanizer"], corpus) == 0
    assert zeroavsr("pretrain-lm", paths["lm"], corpus) == 0
    return {
        "corpus": corpus,
        "romanizer": f"paths.romanizer={paths['romanizer'] / 'romanizer.pt'}",
        "lm": f"paths.lm={paths['lm'] / 'lm.pt'}",
        "root": root,
    }


def test_parser_requires_out():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["eval"])
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["fly", "--out", "x"])


def test_gen_corpus_is_deterministic(tmp_path):
    assert zeroavsr("gen-corpus", tmp_path / "a") == 0
    assert zeroavsr("gen-corpus", tmp_path / "b") == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    assert Path(const.RESOLVED_CONFIG_FILENAME) in files_a
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_bad_config_exits_2(tmp_path):
    assert zeroavsr("eval", tmp_path, "bridge.mix_ratio=2") == const.EXIT_CONFIG
    assert zeroavsr("eval", tmp_path, config=str(tmp_path / "missing.yaml")) == const.EXIT_CONFIG
    # no paths.corpus
    assert zeroavsr("eval", tmp_path / "run") == const.EXIT_CONFIG
    assert zeroavsr("gen-corpus", tmp_path / "wide", "corpus.n_graphemes=40") == const.EXIT_CONFIG
    assert zeroavsr("train-romanizer", tmp_path / "heads", "romanizer.n_heads=3") == const.EXIT_CONFIG
    assert zeroavsr("pretrain-lm", tmp_path / "odd", "lm.n_heads=16") == const.EXIT_CONFIG


def test_exit_codes_for_failures(tmp_path, monkeypatch):
    def diverge(cfg, out):
        raise DivergedLoss("nan")

    def other(cfg, out):
        raise InfeasibleMapping("boom")

    monkeypatch.setitem(cli.COMMANDS, "gen-corpus", diverge)
    assert zeroavsr("gen-corpus", tmp_path) == const.EXIT_DIVERGED
    monkeypatch.setitem(cli.COMMANDS, "gen-corpus", other)
    assert zeroavsr("gen-corpus", tmp_path) == 1


def test_oracle_cascade(pipeline, tmp_path):
    code = zeroavsr("eval", tmp_path, pipeline["corpus"], "eval.romanizer=oracle", "eval.max_utts=0")
    assert code == 0
    rows = {r["lang"]: r for r in read_rows(tmp_path / "cascaded.csv")}
    assert rows["avg"]["cer"] == "0.000000"
    assert rows["heb"]["unseen"] == "1"
    assert "config_hash" in (tmp_path / "cascaded.txt").read_text()
    assert (tmp_path / const.RESOLVED_CONFIG_FILENAME).exists()


def test_model_cascade_and_breakdown(pipeline, tmp_path):
    assert zeroavsr("eval", tmp_path / "c", pipeline["corpus"], pipeline["romanizer"]) == 0
    assert (tmp_path / "c" / "cascaded.csv").exists()
    assert zeroavsr("eval", tmp_path / "e", pipeline["corpus"], pipeline["romanizer"], "eval.mode=error_breakdown") == 0
    counts = {r["category"]: int(r["count"]) for r in read_rows(tmp_path / "e" / "error_breakdown.csv")}
    assert sum(counts.values()) == 3 * 2


def test_reconstruction(pipeline, tmp_path):
    assert zeroavsr("eval", tmp_path, pipeline["corpus"], "eval.mode=reconstruction") == 0
    rows = {r["lang"]: r for r in read_rows(tmp_path / "reconstruction.csv")}
    assert rows["avg"]["cer"] == "0.000000"


def test_toy_lm_backend_needs_an_lm(pipeline, tmp_path):
    common = (pipeline["corpus"], "eval.romanizer=oracle", "backend.kind=toy-lm")
    assert zeroavsr("eval", tmp_path / "no-lm", *common) == const.EXIT_CONFIG
    assert zeroavsr("eval", tmp_path / "lm", *common, pipeline["lm"]) == 0


def test_unreachable_remote_backend_exits_4(pipeline, tmp_path):
    code = zeroavsr(
        "eval",
        tmp_path,
        pipeline["corpus"],
        "eval.romanizer=oracle",
        "backend.kind=remote-chat",
        "backend.endpoint=http://127.0.0.1:9/v1/chat/completions",
        "backend.timeout=1",
    )
    assert code == const.EXIT_BACKEND


def test_unseen_speech_in_task1_exits_2(pipeline, tmp_path):
    code = zeroavsr(
        "train-bridge",
        tmp_path,
        pipeline["corpus"],
        pipeline["romanizer"],
        pipeline["lm"],
        "languages.unseen=[]",
        "languages.seen=[grk, heb]",
    )
    assert code == const.EXIT_CONFIG
    assert not (tmp_path / "bridge.pt").exists()


def test_bridge_then_unified_eval(pipeline, tmp_path):
    bridge_dir = tmp_path / "bridge"
    assert zeroavsr("train-bridge", bridge_dir, pipeline["corpus"], pipeline["romanizer"], pipeline["lm"]) == 0
    assert len(read_metrics(bridge_dir / const.METRICS_FILENAME)) == 4
    bridge = f"paths.bridge={bridge_dir / 'bridge.pt'}"

    out = tmp_path / "unified"
    assert zeroavsr("eval", out, pipeline["corpus"], pipeline["romanizer"], bridge, "eval.mode=unified") == 0
    rows = {r["lang"]: r for r in read_rows(out / "unified.csv")}
    assert {"grk", "cyr", "heb", "avg", "seen_avg", "unseen_avg"} <= set(rows)
    assert rows["heb"]["unseen"] == "1"

    sweep = tmp_path / "sweep"
    assert zeroavsr("eval", sweep, pipeline["corpus"], pipeline["romanizer"], bridge, "eval.mode=noise_sweep") == 0
    assert len(read_rows(sweep / "noise_sweep.csv")) == 2 * len(const.MODALITIES)


def test_rerun_into_same_directory_starts_fresh(pipeline):
    out = pipeline["root"] / "rerun"
    assert zeroavsr("train-romanizer", out, pipeline["corpus"]) == 0
    first = (out / const.METRICS_FILENAME).read_bytes()
    assert zeroavsr("train-romanizer", out, pipeline["corpus"]) == 0
    assert (out / const.METRICS_FILENAME).read_bytes() == first
    assert [r["step"] for r in read_metrics(out / const.METRICS_FILENAME)] == ["1", "2", "3", "4"]


def test_pretrain_lm_checkpoints_and_resumes(pipeline, tmp_path):
    first = tmp_path / "first"
    assert zeroavsr("pretrain-lm", first, pipeline["corpus"], "lm.checkpoint_every=2") == 0
    assert (first / "lm.train.pt").exists()
    resumed = tmp_path / "resumed"
    resume = f"paths.resume={first / 'lm.train.pt'}"
    assert zeroavsr("pretrain-lm", resumed, pipeline["corpus"], "lm.steps=6", resume) == 0
    assert [r["step"] for r in read_metrics(resumed / const.METRICS_FILENAME)] == ["5", "6"]
    assert (resumed / "lm.pt").exists()


@pytest.mark.slow
def test_zero_shot_and_ablation_pilot(pipeline, tmp_path):
    out = tmp_path / "zs"
    code = zeroavsr("eval", out, pipeline["corpus"], "eval.mode=zero_shot", "eval.holdouts=[heb]")
    assert code == 0
    for mode in ("unified", "cascaded"):
        rows = read_rows(out / f"zero_shot_{mode}.csv")
        assert {r["lang"] for r in rows if r["unseen"] == "1"} == {"heb"}
        assert (out / "holdout-heb" / f"{mode}.csv").exists()

    ab = tmp_path / "ablation"
    code = zeroavsr(
        "eval",
        ab,
        pipeline["corpus"],
        "eval.mode=ablation",
        "eval.holdouts=[heb]",
        "eval.seen_subsets={one: [grk], two: [grk, cyr]}",
    )
    assert code == 0
    assert [r["n_seen"] for r in read_rows(ab / "ablation.csv")] == ["1", "2"]
