import json

import pytest

from suptlab import __version__
from suptlab.cli import main, read_csv_body
from suptlab.config import ConfigError, parse_config
from suptlab.graph import load_dataset_jsonl


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    data, ck = d / "data.jsonl", d / "ck.npz"
    assert main(["datagen", "--out", str(data), "--num-graphs", "40", "--n-min", "8", "--n-max", "12"]) == 0
    assert main(["pretrain", "--dataset", str(data), "--out", str(ck), "--pretrain-epochs", "3",
                 "--num-layers", "2", "--hidden-dim", "8"]) == 0
    return d


class TestConfig:
    def test_flag_overrides_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nlr = 1e-3\nk = 5\n")
        cfg = parse_config(path, {"lr": "1e-4", "k": None})
        assert cfg.lr == 1e-4 and cfg.k == 5

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("lrr = 1e-3\n")
        with pytest.raises(ConfigError, match="lrr"):
            parse_config(path)

    def test_bad_type(self):
        with pytest.raises(ConfigError, match="k"):
            parse_config(None, {"k": "three"})

    def test_no_file(self):
        cfg = parse_config(None, {})
        assert cfg.k == 3 and cfg.lr == 1e-3


class TestCommands:
    def test_datagen_round_trip(self, workdir):
        ds = load_dataset_jsonl(workdir / "data.jsonl")
        assert len(ds) == 40
        meta = json.loads((workdir / "data.jsonl.meta.json").read_text())
        assert meta["version"] == __version__ and meta["config"]["num_graphs"] == 40

    def test_gradcheck(self, tmp_path, capsys):
        out = tmp_path / "g.json"
        assert main(["gradcheck", "--instances", "2", "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert payload["failures"] == 0 and payload["version"] == __version__

    def test_universality(self, tmp_path):
        out = tmp_path / "u.json"
        assert main(["universality", "--trials", "20", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["failures"] == 0

    def test_timing(self, tmp_path):
        out = tmp_path / "t.json"
        assert main(["timing", "--repetitions", "5", "--out", str(out)]) == 0
        rows = json.loads(out.read_text())["timings"]
        assert {r["variant"] for r in rows} >= {"ft", "gpf", "supt_soft", "supt_hard"}

    def test_tune_and_eval(self, workdir, tmp_path):
        model, res = tmp_path / "m.npz", tmp_path / "e.json"
        common = ["--dataset", str(workdir / "data.jsonl"), "--checkpoint", str(workdir / "ck.npz")]
        assert main(["tune", *common, "--epochs", "2", "--prompt", "supt-hard", "--model", str(model)]) == 0
        assert main(["eval", *common, "--model", str(model), "--out", str(res)]) == 0
        payload = json.loads(res.read_text())
        assert 0.0 <= payload["mean_auc"] <= 1.0 and payload["config"]["model"] == str(model)

    def test_sweep_deterministic(self, workdir, tmp_path):
        common = ["--dataset", str(workdir / "data.jsonl"), "--checkpoint", str(workdir / "ck.npz"),
                  "--epochs", "2", "--seeds", "0-2", "--workers", "1"]
        bodies = []
        for name in ("a.csv", "b.csv"):
            assert main(["sweep", *common, "--out", str(tmp_path / name)]) == 0
            text = (tmp_path / name).read_text()
            assert text.startswith("# suptlab") and __version__ in text.splitlines()[0]
            bodies.append(read_csv_body(tmp_path / name))

        def strip_wall(body):
            lines = [line.split(",") for line in body.splitlines()]
            col = lines[0].index("wall_ms")
            return [row[:col] + row[col + 1:] for row in lines]

        assert strip_wall(bodies[0]) == strip_wall(bodies[1])
        assert len(bodies[0].splitlines()) == 4


class TestExitCodes:
    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["tune", "--lrr", "1"])
        assert exc.value.code == 2

    def test_bad_config_file(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("lrr = 1\n")
        assert main(["gradcheck", "--config", str(path)]) == 2

    def test_missing_dataset(self, tmp_path):
        assert main(["tune", "--dataset", str(tmp_path / "nope.jsonl"), "--checkpoint", "x"]) == 3

    def test_missing_required(self):
        assert main(["tune"]) == 2

    def test_help_lists_grid(self, capsys):
        with pytest.raises(SystemExit):
            main(["sweep", "--help"])
        text = capsys.readouterr().out
        assert "search grids" in text and "supt-hard" in text
