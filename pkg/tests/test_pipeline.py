import json
import os

import pytest

from rgrec.cli import main
from rgrec.config import PipelineConfig, load_config, parse_assignments
from rgrec.errors import ConfigError
from rgrec.pipeline import STAGES, Pipeline, ablation_settings, read_report_values
from rgrec.synthetic import SyntheticConfig, write_dataset

SMALL = """\
# tiny settings so the whole pipeline runs in seconds
kg = data/kg_final.txt
interactions = data/ratings_final.txt
workspace = ws
embed_dim = 8
kge_steps = 150
kge_lr = 0.01
kge_batch = 64
n_rules = 8
runs = 2
max_epochs = 3
lr = 0.02
batch_size = 32
n_negatives = 15
pretrain_lr = 0.01
pretrain_max_epochs = 20
"""


def _setup(root):
    write_dataset(root / "data", SyntheticConfig(n_users=25, n_items=40, interactions_per_user=6))
    (root / "run.conf").write_text(SMALL)
    return root / "run.conf"


def _files(ws):
    return {str(p.relative_to(ws)): p.read_bytes() for p in sorted(ws.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    conf = _setup(root)
    assert main(["evaluate", "--config", str(conf), "-q"]) == 0
    return root, conf


def test_end_to_end_report(built, capsys):
    root, conf = built
    assert main(["evaluate", "--config", str(conf), "-q"]) == 0
    text = capsys.readouterr().out
    values = read_report_values(text)
    assert set(values) == {"auc", "f1", "hits@5", "ndcg@5", "hits@10", "ndcg@10"}
    assert all(0 <= m <= 1 for m, _ in values.values())
    assert "# strategy = rotate" in text and "run 1: seed" in text
    for stage in STAGES:
        assert list((root / "ws" / stage).glob("*/stamp.json")), stage


def test_rerun_is_a_noop(built):
    root, conf = built
    stamps = {p: p.stat().st_mtime_ns for p in (root / "ws").rglob("stamp.json")}
    before = _files(root / "ws")
    assert main(["evaluate", "--config", str(conf), "-q"]) == 0
    assert {p: p.stat().st_mtime_ns for p in (root / "ws").rglob("stamp.json")} == stamps
    assert _files(root / "ws") == before


def test_clean_rebuild_is_byte_identical(built, tmp_path):
    root, _ = built
    conf = tmp_path / "run.conf"
    conf.write_text(SMALL.replace("data/", str(root / "data") + "/"))
    assert main(["evaluate", "--config", str(conf), "-q"]) == 0
    assert _files(tmp_path / "ws") == _files(root / "ws")


def test_every_stage_is_reachable_alone(built):
    root, conf = built
    cfg = load_config(conf)
    pipe = Pipeline(cfg)
    for stage in STAGES:
        d = pipe.run(stage)
        assert json.loads((d / "stamp.json").read_text())["key"] == pipe.key(stage)


def test_missing_upstream_names_the_stage(tmp_path, capsys):
    conf = _setup(tmp_path)
    assert main(["pretrain", "--config", str(conf), "--no-deps", "-q"]) == 2
    assert "'score-rules'" in capsys.readouterr().err


def test_modified_artifact_is_stale(built, tmp_path, capsys):
    root, _ = built
    conf = tmp_path / "run.conf"
    conf.write_text(SMALL.replace("data/", str(root / "data") + "/").replace("workspace = ws", f"workspace = {tmp_path / 'ws'}"))
    assert main(["train", "--config", str(conf), "-q"]) == 0
    hist = next((tmp_path / "ws" / "train").glob("*/history.tsv"))
    hist.write_text(hist.read_text() + "tampered\n")
    capsys.readouterr()
    assert main(["evaluate", "--config", str(conf), "--no-deps", "-q", "runs=1"]) == 2
    assert "stamp" in capsys.readouterr().err
    # with dependency resolution the damaged stage is rebuilt
    assert main(["evaluate", "--config", str(conf), "-q", "runs=1"]) == 0
    assert "tampered" not in hist.read_text()


def test_changed_parameters_are_outdated(built, capsys):
    root, conf = built
    assert main(["train", "--config", str(conf), "--no-deps", "-q", "n_rules=5"]) == 2
    assert "different inputs" in capsys.readouterr().err


def test_invalid_strategy_is_usage_error(built, capsys):
    _, conf = built
    assert main(["mine", "--config", str(conf), "--strategy", "pca"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "strategy" in err


def test_usage_errors(built, capsys):
    _, conf = built
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    assert main(["mine", "--config", str(conf), "colour=red"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["mine", "--config", str(conf), "notanassignment"])
    assert exc.value.code == 1
    assert main(["mine", "--config", str(conf) + ".missing"]) == 1


def test_missing_data_file_is_data_error(tmp_path, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text("kg = nowhere.txt\ninteractions = nowhere.txt\n")
    assert main(["ingest", "--config", str(conf), "-q"]) == 2
    assert "not found" in capsys.readouterr().err


def test_config_layers(tmp_path):
    conf = tmp_path / "sub" / "c.conf"
    conf.parent.mkdir()
    conf.write_text("kg = kg.txt  # relative\nseed = 4\nlr = 0.5\npretrain = off\n")
    cfg = load_config(conf, ["lr=0.25", "n-rules=12"], seed=9, threads=None)
    assert cfg.kg == str((tmp_path / "sub" / "kg.txt").resolve())
    assert (cfg.seed, cfg.lr, cfg.n_rules, cfg.pretrain, cfg.threads) == (9, 0.25, 12, False, 1)
    assert cfg.k_values() == (5, 10)


def test_config_defaults():
    cfg = PipelineConfig(kg="k", interactions="i")
    assert (cfg.max_rule_length, cfg.n_rules, cfg.strategy, cfg.embed_dim) == (3, 30, "rotate", 1024)
    assert (cfg.dim, cfg.fanout, cfg.runs, cfg.n_negatives, cfg.train_fraction) == (8, 4, 5, 100, 0.6)


@pytest.mark.parametrize("line", ["strategy = pca", "train_fraction = 0.5", "max_rule_length = 5", "ks = a,b",
                                  "dim = 0", "seed = x", "pretrain = maybe"])
def test_config_rejects(line):
    with pytest.raises(ConfigError):
        load_config(None, [line.replace(" ", "")])


def test_parse_assignments_reports_line():
    with pytest.raises(ConfigError, match="f.conf:2"):
        parse_assignments(["seed = 1", "nonsense"], "f.conf")


def test_ablation_grids():
    cfg = PipelineConfig(kg="k", interactions="i")
    assert [n for n, _ in ablation_settings("rule-count", cfg)] == ["L=10", "L=30", "L=50", "L=all"]
    assert [c.max_rule_length for _, c in ablation_settings("rule-length", cfg)] == [2, 3, 4]
    assert [c.strategy for _, c in ablation_settings("filter-strategy", cfg)] == ["rotate", "transe", "cwa"]
    assert [c.train_fraction for _, c in ablation_settings("cold-start", cfg)] == [0.2, 0.4, 0.6]
    assert [c.pretrain for _, c in ablation_settings("no-pretrain", cfg)] == [True, False]


def test_no_pretrain_ablation(built, capsys):
    _, conf = built
    assert main(["no-pretrain", "--config", str(conf), "-q", "runs=1"]) == 0
    out = capsys.readouterr().out
    rows = [l.split("\t") for l in out.splitlines() if l.count("\t") == 3]
    assert {r[0] for r in rows} == {"with-W", "without-W"}
    assert os.path.isfile(built[0] / "ws" / "ablations" / "no-pretrain.txt")
