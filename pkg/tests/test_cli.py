import csv
import json

import pytest

from tdil.cli import BETA_SWEEP, config_to_text, load_config, policy_panel, run_command
from tdil.trainer import TrainConfig

TINY = """
[schedule]
total_steps = 300
warmup_steps = 50
eval_interval = 100

[discriminator]
disc_hidden = 8
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text(TINY)
    return path


def test_print_config_lists_every_field(capsys):
    assert run_command(["train", "--print-config"]) == 0
    text = capsys.readouterr().out
    for name in TrainConfig.__dataclass_fields__:
        assert f"{name} = " in text
    assert "[reward]" in text and "beta = 0.0" in text


def test_config_text_round_trip(tmp_path):
    cfg = TrainConfig(beta=0.25, seed=11, gamma=0.9)
    path = tmp_path / "rt.cfg"
    path.write_text(config_to_text(cfg))
    assert load_config(path) == cfg


def test_train_twice_gives_identical_csv(cfg_file, tmp_path, capsys):
    for name in ("a", "b"):
        assert run_command(["train", "--config", str(cfg_file), "--seed", "7", "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "metrics.csv").read_text()
    assert a == (tmp_path / "b" / "metrics.csv").read_text()
    rows = list(csv.DictReader(a.splitlines()))
    assert len(rows) == 4
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 7 and manifest["evaluation"] == "greedy"
    assert len(manifest["inputs"]["map"]) == 64


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["nosuch"],
    ["train", "--config", "/nonexistent/file.cfg"],
    ["blind-select", "--run", "/nonexistent"],
])
def test_error_exits_nonzero(argv, capsys):
    assert run_command(argv) != 0


def test_invalid_config_values(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[reward]\nbeta = 3\n")
    assert run_command(["train", "--config", str(bad)]) == 2
    assert "beta" in capsys.readouterr().err
    bad.write_text("[reward]\nwhatever = 1\n")
    assert run_command(["train", "--config", str(bad)]) == 2
    bad.write_text("[nosection]\nbeta = 0\n")
    assert run_command(["train", "--config", str(bad)]) == 2


def test_sweep_beta_one_row_per_value(cfg_file, tmp_path, capsys):
    assert run_command(["sweep-beta", "--config", str(cfg_file), "--seeds", "0", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep-beta.csv")))
    assert [r["beta"] for r in rows] == list(BETA_SWEEP)
    assert [r["bc"] for r in rows].count("True") == 1


def test_compare_rewards_outputs(cfg_file, tmp_path, capsys):
    out = tmp_path / "cmp"
    assert run_command(["compare-rewards", "--config", str(cfg_file), "--seeds", "0,1", "--out", str(out)]) == 0
    for name in ("irl", "l2", "tdil"):
        rows = list(csv.reader(open(out / f"curve-{name}.csv")))
        assert rows[0] == ["env_steps", "steps_per_episode"] and len(rows) == 5
        grid = (out / f"heatmap-{name}.txt").read_text().split("\n")[:-1]
        assert len(grid) == 8 and all(len(line.split()) == 8 for line in grid)
        [float(v) for line in grid for v in line.split()]
    for name in ("bc", "irl", "l2", "tdil"):
        panel = (out / f"policy-{name}.txt").read_text().split("\n")[:-1]
        assert len(panel) == 8
        cells = [c for line in panel for c in line.split()]
        assert len(cells) == 64 and cells.count("G") == 1 and set(cells) <= set("^v<>G")
    summary = list(csv.DictReader(open(out / "summary.csv")))
    assert len(summary) == 6


def test_bc_panel_follows_demo(cfg_file, tmp_path, capsys):
    out = tmp_path / "cmp"
    run_command(["compare-rewards", "--config", str(cfg_file), "--seeds", "0", "--out", str(out)])
    panel = [line.split() for line in (out / "policy-bc.txt").read_text().split("\n")[:-1]]
    # top row, x = 5..7 is the start of the route and points left
    assert panel[0][5:] == ["<", "<", "<"]
    assert panel[4][4] == "<" and panel[4][3] == "G"


def test_disc_report_and_sweep_alpha(cfg_file, tmp_path, capsys):
    assert run_command(["disc-report", "--config", str(cfg_file), "--seeds", "0", "--disc-steps", "50",
                        "--env", "chain", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "disc-report.csv")))
    assert rows[0]["env"] == "chain" and 0 <= float(rows[0]["acc_reversed"]) <= 1
    assert run_command(["sweep-alpha", "--config", str(cfg_file), "--seeds", "0", "--disc-steps", "20",
                        "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep-alpha.csv")))
    assert [float(r["alpha"]) for r in rows] == [0.5, 0.5, 0.67, 0.67, 0.9, 0.9, 0.99, 0.99]


def test_blind_select_and_export(cfg_file, tmp_path, capsys):
    run = tmp_path / "run"
    run_command(["train", "--config", str(cfg_file), "--out", str(run)])
    capsys.readouterr()
    assert run_command(["blind-select", "--run", str(run)]) == 0
    out = capsys.readouterr().out
    assert "blind pick" in out and "regret" in out and "spearman" in out
    assert run_command(["export", "--run", str(run), "--format", "json", "--out", str(tmp_path / "b.json")]) == 0
    bundle = json.loads((tmp_path / "b.json").read_text())
    assert len(bundle["registry"]) == len(bundle["metrics"]) == 4
    assert run_command(["export", "--run", str(run), "--format", "csv", "--out", str(tmp_path / "b.csv")]) == 0
    assert len(list(csv.DictReader(open(tmp_path / "b.csv")))) == 4


def test_policy_panel_shape():
    from tdil.agent import SoftQAgent
    from tdil.env import default_grid
    env = default_grid()
    text = policy_panel(SoftQAgent(64, 4), env)
    assert text.count("^") == 63 and "G" in text
