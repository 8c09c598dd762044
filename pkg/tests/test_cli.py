import json

import pytest

from uncertain_ann.cli import build_parser, main
from uncertain_ann.config import ConfigViolation, RunConfig, parse_config_text

SMALL = ["--num-users", "80", "--num-items", "60", "--num-categories", "6", "--num-clusters", "3"]
FAST = ["--epochs", "1", "--n", "8", "--n-prime", "4", "--ef-construction", "30", "--k", "10", "--metric-n", "10"]


def run(*args):
    return main([str(a) for a in args])


def test_parse_config_text():
    text = "# comment\nalpha = 0.5\n\nbeta=2  # trailing\nout=runs/a\n"
    assert parse_config_text(text) == {"alpha": "0.5", "beta": "2", "out": "runs/a"}
    with pytest.raises(ConfigViolation, match="unknown"):
        parse_config_text("alpah=1\n")
    with pytest.raises(ConfigViolation, match="line 1"):
        parse_config_text("alpha\n")


def test_coercion_and_validation():
    cfg = RunConfig.from_mapping({"n": "32", "alpha": "0.25", "ue": "count"})
    assert cfg.n == 32 and cfg.alpha == 0.25 and cfg.ue == "count"
    for bad in ({"alpha": "0"}, {"m_cap": "1"}, {"n": "1"}, {"ue": "gp"}, {"k": "x"}, {"nope": "1"}):
        with pytest.raises(ConfigViolation):
            RunConfig.from_mapping(bad)


def test_digest_ignores_paths_and_stage_seeds_differ():
    a, b = RunConfig(out="x"), RunConfig(out="y", data="z")
    assert a.digest() == b.digest()
    assert a.digest() != RunConfig(alpha=2.0).digest()
    seeds = {RunConfig(seed=7).stage_seed(s) for s in ("synth", "train", "swing", "build-index")}
    assert len(seeds) == 4
    assert RunConfig(seed=7).stage_seed("train") == RunConfig(seed=7).stage_seed("train")
    assert RunConfig(seed=7).stage_seed("train") != RunConfig(seed=8).stage_seed("train")


def test_every_key_has_a_flag():
    parser = build_parser()
    args = parser.parse_args(["retrieve", "--n-prime", "5", "--T-c", "3"])
    assert args.n_prime == "5" and args.T_c == "3"
    with pytest.raises(SystemExit) as info:
        parser.parse_args(["evaluate", "--help"])
    assert info.value.code == 0


def test_synth_byte_identical(tmp_path):
    for out in ("a", "b"):
        assert run("synth", "--seed", 7, "--out", tmp_path / out, *SMALL) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "interactions.tsv" in names and "observed.emb.meta.json" in names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_retrieve_without_model_exits_2(tmp_path, capsys):
    assert run("synth", "--data", tmp_path, *SMALL) == 0
    assert run("retrieve", "--data", tmp_path) == 2
    assert str(tmp_path / "model.umdl") in capsys.readouterr().err


def test_missing_train_and_config_errors(tmp_path, capsys):
    assert run("swing", "--data", tmp_path / "nothing") == 2
    assert "train.tsv" in capsys.readouterr().err
    assert run("synth", "--alpha", "-1", "--data", tmp_path) == 3
    (tmp_path / "bad.cfg").write_text("colour=blue\n")
    assert run("synth", "--config", tmp_path / "bad.cfg") == 3
    assert run("synth", "--config", tmp_path / "missing.cfg") == 2


def test_flags_override_config_file(tmp_path):
    (tmp_path / "run.cfg").write_text(f"num_users=30\nnum_items=20\nout={tmp_path / 'c'}\n")
    assert run("synth", "--config", tmp_path / "run.cfg", "--num-users", 40) == 0
    assert len({line.split("\t")[0] for line in (tmp_path / "c" / "interactions.tsv").read_text().splitlines()}) == 40


def pipeline(d):
    steps = [
        ["synth", *SMALL],
        ["swing"],
        ["train", "--swing", d / "swing.tsv", *FAST],
        ["build-index", *FAST],
        ["reweight-index", *FAST],
        ["retrieve", "--index", d / "index.reweighted.uhnw", "--beta", "0.5", *FAST],
        ["evaluate", *FAST],
    ]
    for step in steps:
        assert run(step[0], "--data", d, "--seed", 3, *step[1:]) == 0, step[0]


def test_full_pipeline_and_sidecars(tmp_path, capsys):
    d = tmp_path / "run"
    pipeline(d)
    for name in ("swing.tsv", "model.umdl", "index.uhnw", "index.reweighted.uhnw", "retrieval.tsv", "report.tsv"):
        meta = json.loads((d / (name + ".meta.json")).read_text())
        assert len(meta["config_hash"]) == 16
        assert meta["seed"] == 3
    split = json.loads((d / "train.tsv.meta.json").read_text())["split_hash"]
    assert json.loads((d / "retrieval.tsv.meta.json").read_text())["split_hash"] == split
    header, row = (d / "report.tsv").read_text().splitlines()
    assert header == "users\tskipped\trecall@10\tentropy@10\tnewcate@10"
    assert "Recall@10" in capsys.readouterr().out


def test_pipeline_bit_reproducible(tmp_path):
    pipeline(tmp_path / "a")
    pipeline(tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if not p.name.endswith(".meta.json"))
    assert len(names) >= 10
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_evaluate_refuses_foreign_split(tmp_path, capsys):
    d = tmp_path / "run"
    pipeline(d)
    other = tmp_path / "other"
    assert run("synth", "--data", other, "--seed", 4, *SMALL) == 0
    capsys.readouterr()
    code = run("evaluate", "--data", d, "--train", other / "train.tsv", "--truth", other / "truth.tsv", *FAST)
    assert code == 4
    assert "split" in capsys.readouterr().err


def test_count_head_path_without_model(tmp_path):
    d = tmp_path / "emb"
    assert run("synth", "--data", d, *SMALL) == 0
    for step in (["build-index", "--ue", "count"], ["reweight-index", "--ue", "count"],
                 ["retrieve", "--ue", "count", "--index", d / "index.reweighted.uhnw", "--beta", "1"],
                 ["evaluate"]):
        assert run(step[0], "--data", d, *FAST, *step[1:]) == 0, step[0]
    assert run("reweight-index", "--data", d, "--ue", "none", *FAST) == 3
