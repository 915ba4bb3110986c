import json

import numpy as np
import pytest

from sdtseg import cli
from sdtseg.config import ConfigError, RunConfig, load_run_config, parse_run_config
from sdtseg.network import init_network
from sdtseg.raster import LabelMask, read_field_stack, read_mask, read_weights, write_array, write_mask, write_weights


def tiny_config(tmp_path, **train):
    doc = {
        "out_dir": str(tmp_path / "run"),
        "train": {"epochs": 2, "batch_size": 4, "crop": 16, "trunk_width": 4, "seed": 1, "val_every": 1, **train},
        "sdt": {"clip": 8},
        "synth": {"size": 32, "count": 10, "radius": [3, 8], "seed": 0},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


class TestConfig:
    def test_defaults(self):
        cfg = parse_run_config({})
        assert cfg.train.lam == 2.0 and cfg.train.clip == 32.0 and cfg.synth.classes == 5

    def test_lambda_alias_and_sdt_section(self):
        cfg = parse_run_config({"train": {"lambda": 0.5}, "sdt": {"clip": 4, "void_policy": "background"}})
        assert cfg.train.lam == 0.5 and cfg.sdt.clip == 4 and cfg.sdt.void_policy == "background"

    @pytest.mark.parametrize(
        "doc",
        [
            {"bogus": 1},
            {"train": {"bogus": 1}},
            {"train": {"lam": 1.0}},
            {"train": {"clip": 3}},
            {"synth": {"colour": 1}},
            {"train": {"epochs": -1}},
            {"sdt": {"clip": 0.5}},
            [],
        ],
    )
    def test_rejected(self, doc):
        with pytest.raises(ConfigError):
            parse_run_config(doc)

    def test_round_trip(self, tmp_path):
        cfg = parse_run_config({"train": {"lambda": 0.5, "lr_milestones": [3]}, "synth": {"shapes": [1, 2]}})
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert load_run_config(path) == cfg

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="malformed JSON"):
            load_run_config(path)


class TestSdtCommand:
    def make_mask(self, tmp_path):
        labels = np.zeros((20, 20), int)
        labels[5:12, 4:15] = 1
        path = tmp_path / "m.pgm"
        write_mask(LabelMask(labels, 2), path)
        return path, labels

    def test_two_channels(self, tmp_path):
        path, _ = self.make_mask(tmp_path)
        assert cli.main(["sdt", str(path), str(tmp_path / "o.sdtf"), "--clip", "32"]) == 0
        stack = read_field_stack(tmp_path / "o.sdtf")
        assert stack.channels == 2 and (np.abs(stack.data) <= 1).all()

    def test_clip_one_is_binary(self, tmp_path):
        path, labels = self.make_mask(tmp_path)
        assert cli.main(["sdt", str(path), str(tmp_path / "o.sdtf"), "--clip", "1"]) == 0
        stack = read_field_stack(tmp_path / "o.sdtf").data
        np.testing.assert_array_equal(stack[1], np.where(labels == 1, 1.0, -1.0))
        assert set(np.unique(stack)) == {-1.0, 1.0}

    def test_missing_file(self, tmp_path, capsys):
        assert cli.main(["sdt", str(tmp_path / "nope.pgm"), str(tmp_path / "o.sdtf")]) == 2
        err = capsys.readouterr().err
        assert err.startswith("error:") and err.count("\n") == 1

    def test_bad_format(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
        assert cli.main(["sdt", str(path), str(tmp_path / "o.sdtf")]) == 2


class TestTrainCommand:
    def test_outputs_and_determinism(self, tmp_path, capsys):
        config = tiny_config(tmp_path)
        assert cli.main(["train", str(config)]) == 0
        run = tmp_path / "run"
        first = {p.name: p.read_bytes() for p in [run / "final.sdtw", run / "train_log.jsonl", run / "metrics.json"]}
        epochs = sorted(p.name for p in (run / "checkpoints").iterdir())
        assert epochs == ["epoch_000.sdtw", "epoch_001.sdtw"]
        rows = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [0, 1]
        assert set(rows[0]) == {"epoch", "step", "lr", "nll", "l1", "total", "val_oa"}
        metrics = json.loads((run / "metrics.json").read_text())
        assert {"oa", "per_class_f1", "per_class_iou", "miou", "pixels_evaluated"} <= set(metrics)
        assert cli.main(["train", str(config)]) == 0
        for name, data in first.items():
            assert (run / name).read_bytes() == data, name

    def test_lambda_zero_log(self, tmp_path):
        assert cli.main(["train", str(tiny_config(tmp_path, **{"lambda": 0.0}))]) == 0
        for line in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines():
            row = json.loads(line)
            assert row["l1"] > 0 and row["total"] == row["nll"]

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{")
        assert cli.main(["train", str(path)]) == 2

    def test_divergence_exit_code(self, tmp_path):
        with np.errstate(all="ignore"):
            code = cli.main(["train", str(tiny_config(tmp_path, lr=1e30, **{"lambda": 0.0}))])
        assert code == 3
        assert (tmp_path / "run" / "last_good.sdtw").exists()

    def test_from_synth_directory(self, tmp_path):
        config = tiny_config(tmp_path)
        assert cli.main(["synth", str(config)]) == 0
        data_dir = tmp_path / "run" / "data"
        assert len(list((data_dir / "images").iterdir())) == 10
        doc = json.loads(config.read_text())
        doc["data_dir"] = str(data_dir)
        doc["out_dir"] = str(tmp_path / "run2")
        config.write_text(json.dumps(doc))
        assert cli.main(["train", str(config)]) == 0


class TestEvalCommand:
    def test_class_mismatch(self, tmp_path):
        config = tiny_config(tmp_path)
        weights = tmp_path / "w.sdtw"
        write_weights(init_network(4, 4).params, weights)
        assert cli.main(["eval", str(weights), str(config)]) == 2

    def test_constant_correct_network(self, tmp_path, capsys):
        doc = json.loads(tiny_config(tmp_path).read_text())
        doc["synth"].update(shapes=[0, 0], classes=2)
        config = tmp_path / "c.json"
        config.write_text(json.dumps(doc))
        state = init_network(2, 4, seed=0)
        params = {k: np.zeros_like(v) for k, v in state.params.items()}
        params["fusion.b"] = np.array([5.0, -5.0])
        write_weights(params, tmp_path / "w.sdtw")
        capsys.readouterr()
        assert cli.main(["eval", str(tmp_path / "w.sdtw"), str(config), "--split", "all"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["oa"] == 1.0 and out["pixels_evaluated"] == 10 * 32 * 32

    def test_missing_weights(self, tmp_path):
        assert cli.main(["eval", str(tmp_path / "none.sdtw"), str(tiny_config(tmp_path))]) == 2


class TestInferCommand:
    def test_writes_mask_and_probs(self, tmp_path, rng):
        write_weights(init_network(3, 4, seed=0).params, tmp_path / "w.sdtw")
        write_array(rng.standard_normal((3, 24, 24)), tmp_path / "img.sdtf")
        args = ["infer", str(tmp_path / "w.sdtw"), str(tmp_path / "img.sdtf"), str(tmp_path / "p.pgm"),
                "--window", "8", "--probs", str(tmp_path / "p.sdtf")]
        assert cli.main(args) == 0
        pred = read_mask(tmp_path / "p.pgm", classes=3)
        probs = read_field_stack(tmp_path / "p.sdtf").data
        assert pred.data.shape == (24, 24)
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)

    def test_wrong_channels(self, tmp_path):
        write_weights(init_network(3, 4, seed=0).params, tmp_path / "w.sdtw")
        write_array(np.zeros((2, 8, 8)), tmp_path / "img.sdtf")
        assert cli.main(["infer", str(tmp_path / "w.sdtw"), str(tmp_path / "img.sdtf"), str(tmp_path / "p.pgm")]) == 2


class TestGradcheckCommand:
    def test_pass(self, capsys):
        assert cli.main(["gradcheck", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "lambda=0.5" in out and "sdt_head.w" in out

    def test_corrupted_fails(self, capsys):
        assert cli.main(["gradcheck", "--seed", "0", "--lambda", "2", "--corrupt"]) == 4
        assert "FAIL" in capsys.readouterr().out


class TestBenchCommand:
    def test_rows(self, capsys):
        assert cli.main(["bench", "--sizes", "32", "64", "128", "--runs", "1"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert sum(line.startswith("size=") for line in lines) == 3
        assert sum(line.startswith("ratio") for line in lines) == 2

    def test_single_size(self, capsys):
        assert cli.main(["bench", "--sizes", "64", "--runs", "1"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 1 and lines[0].startswith("size=64")

    def test_unsorted_sizes(self):
        assert cli.main(["bench", "--sizes", "64", "32"]) == 2
