import csv
import json

import numpy as np
import pytest

from openset3d.autodiff import load_checkpoint, save_checkpoint
from openset3d.cli import RunConfig, main, read_scores_csv
from openset3d.data import ConfigError, ParseError, load_dataset, parse_labeled_points
from openset3d.geometry import PointCloud
from openset3d.metrics import open_set_metrics
from openset3d.data import serialize_labeled_points

SMALL_SYNTH = {"n_points": 64, "samples_per_class": 6}
SMALL_BACKBONE = {"widths": [8, 16], "fractions": [1.0, 0.5], "head_hidden": 16, "upe_hidden": 8}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "data"
    cfg = write_json(tmp_path / "synth.json", SMALL_SYNTH)
    assert main(["synth", "--config", cfg, "--seed", "3", "--out", str(out)]) == 0
    return out


def run_config(tmp_path, synth_dir, **over):
    cfg = {"dataset": str(synth_dir), "split": str(synth_dir / "split.json"), "seed": 7,
           "epochs": 2, "n_points": 64, "batch_size": 8, "backbone": SMALL_BACKBONE,
           "ups": {"beta_min": 0.4, "beta_max": 0.6, "aug_ratio": 0.5}}
    cfg.update(over)
    return write_json(tmp_path / "run.json", cfg)


def read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


class TestSynth:
    def test_default_layout(self, tmp_path):
        out = tmp_path / "d"
        assert main(["synth", "--seed", "0", "--out", str(out)]) == 0
        ds = load_dataset(out)
        assert len(ds) == 200
        assert {len(s.cloud) for s in ds.samples} == {512}
        assert ds.class_names == ["sphere", "cube", "cylinder", "torus"]
        split = json.loads((out / "split.json").read_text())
        assert split["unknown"] == ["torus"]

    def test_byte_identical(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", SMALL_SYNTH)
        for name in ("a", "b"):
            assert main(["synth", "--config", cfg, "--seed", "5", "--out", str(tmp_path / name)]) == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 4 * 6 + 2
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_unknown_shape(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "s.json", {"classes": ["sphere", "dodecahedron"],
                                               "known": ["sphere"], "unknown": ["dodecahedron"]})
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "dodecahedron" in capsys.readouterr().err

    def test_refuses_non_empty(self, tmp_path, capsys):
        out = tmp_path / "o"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        assert main(["synth", "--out", str(out)]) == 2
        assert "--force" in capsys.readouterr().err


class TestAugment:
    @pytest.fixture
    def cloud_file(self, tmp_path):
        rng = np.random.default_rng(0)
        c = PointCloud(rng.normal(size=(1000, 3)), rng.integers(0, 3, 1000))
        p = tmp_path / "cloud.txt"
        p.write_text(serialize_labeled_points(c))
        return p

    def test_zero_beta(self, tmp_path, cloud_file):
        out = tmp_path / "o"
        assert main(["augment", str(cloud_file), "--beta-min", "0", "--beta-max", "0",
                     "--seed", "1", "--out", str(out)]) == 0
        assert (out / "augmented.txt").read_text() == cloud_file.read_text()
        assert (out / "mask.txt").read_text() == ""

    def test_fixed_beta(self, tmp_path, cloud_file):
        out = tmp_path / "o"
        assert main(["augment", str(cloud_file), "--beta-min", "0.6", "--beta-max", "0.6",
                     "--seed", "1", "--out", str(out)]) == 0
        mask = [int(x) for x in (out / "mask.txt").read_text().split()]
        assert len(mask) == 600 and len(set(mask)) == 600
        aug = parse_labeled_points((out / "augmented.txt").read_text())
        np.testing.assert_array_equal(aug.labels[mask], 3)

    @pytest.mark.parametrize("gen", ["cutmix", "rotation", "translation", "scaling", "noise"])
    def test_repeatable(self, tmp_path, cloud_file, gen):
        for name in ("a", "b"):
            assert main(["augment", str(cloud_file), "--generator", gen, "--seed", "4",
                         "--out", str(tmp_path / name)]) == 0
        for f in ("augmented.txt", "mask.txt"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_parse_error_context(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("0 0 0 1\n0 0 0\n")
        assert main(["augment", str(bad), "--seed", "1", "--out", str(tmp_path / "o")]) == 2
        assert "bad.txt:line 2" in capsys.readouterr().err


class TestRunConfig:
    def test_seed_required(self, tmp_path, synth_dir):
        cfg = json.loads(open(run_config(tmp_path, synth_dir)).read())
        del cfg["seed"]
        path = write_json(tmp_path / "noseed.json", cfg)
        with pytest.raises(ConfigError, match="seed"):
            RunConfig.load(path)
        assert RunConfig.load(path, seed=3).seed == 3

    def test_missing_path(self, tmp_path, synth_dir):
        path = run_config(tmp_path, synth_dir, dataset=str(tmp_path / "nope"))
        with pytest.raises(ConfigError, match="does not exist"):
            RunConfig.load(path)

    def test_unknown_key(self, tmp_path, synth_dir):
        with pytest.raises(ConfigError, match="learning_rate"):
            RunConfig.load(run_config(tmp_path, synth_dir, learning_rate=0.1))

    def test_relative_paths(self, tmp_path, synth_dir):
        rc = RunConfig.load(run_config(tmp_path, synth_dir, dataset="data",
                                       split="data/split.json"))
        assert rc.dataset == str(synth_dir.resolve())

    def test_generator_flag(self, tmp_path, synth_dir):
        rc = RunConfig.load(run_config(tmp_path, synth_dir), generator="noise")
        assert rc.train.ups.generator == "noise"


class TestTrainEval:
    def test_end_to_end(self, tmp_path, synth_dir):
        cfg = run_config(tmp_path, synth_dir)
        run = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(run)]) == 0
        rows = read_rows(run / "train_log.csv")
        assert [r["epoch"] for r in rows] == ["1", "2"]
        assert set(rows[0]) == {"epoch", "loss_task", "loss_upe", "train_accuracy"}
        for fn in ("upe", "msp", "maxlogit"):
            ev = tmp_path / f"eval_{fn}"
            assert main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--score-fn", fn,
                         "--out", str(ev)]) == 0
            metrics = json.loads((ev / "metrics.json").read_text())
            assert set(metrics) == {"auroc", "aupr", "fpr_at_95_tpr", "detection_error",
                                    "accuracy_sample", "accuracy_class"}
            dump = read_scores_csv(ev / "scores.csv")
            # 30% of 6 known samples per class plus all 6 torus samples
            assert len(dump.scores) == 3 * 2 + 6
            recomputed = open_set_metrics(dump)
            for k, v in recomputed.items():
                assert metrics[k] == v
            svg = (ev / "histogram.svg").read_text()
            assert svg.startswith("<svg") and "unknown (n=6)" in svg
            m_out = tmp_path / f"m_{fn}.json"
            assert main(["metrics", "--scores", str(ev / "scores.csv"), "--out", str(m_out)]) == 0
            assert json.loads(m_out.read_text()) == recomputed

    def test_deterministic_artifacts(self, tmp_path, synth_dir):
        cfg = run_config(tmp_path, synth_dir)
        for name in ("a", "b"):
            assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == 0
            assert main(["eval", "--checkpoint", str(tmp_path / name / "checkpoint.bin"),
                         "--out", str(tmp_path / name / "eval")]) == 0
        for f in ("checkpoint.bin", "train_log.csv", "config.json", "eval/scores.csv",
                  "eval/metrics.json", "eval/histogram.svg"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_plain_closed_set(self, tmp_path, synth_dir):
        cfg = run_config(tmp_path, synth_dir, alpha=0.0, use_ups=False)
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
        rows = read_rows(tmp_path / "run" / "train_log.csv")
        assert all(float(r["loss_upe"]) == 0.0 for r in rows)
        _, meta = load_checkpoint(tmp_path / "run" / "checkpoint.bin")
        assert meta["backbone"]["unknown_class"] is False

    def test_nan_abort(self, tmp_path, synth_dir, capsys):
        cfg = run_config(tmp_path, synth_dir, lr=1e300)
        with np.errstate(all="ignore"):
            assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 2
        err = capsys.readouterr().err
        assert "non-finite loss at epoch" in err and "batch" in err and "parameter" in err

    def test_uniform_logit_stub(self, tmp_path, synth_dir):
        cfg = run_config(tmp_path, synth_dir, epochs=1)
        run = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(run)]) == 0
        params, meta = load_checkpoint(run / "checkpoint.bin")
        params["head.fc2.weight"][:] = 0.0
        params["head.fc2.bias"][:] = 0.0
        save_checkpoint(run / "stub.bin", params, meta)
        assert main(["eval", "--checkpoint", str(run / "stub.bin"), "--score-fn", "msp",
                     "--out", str(tmp_path / "ev")]) == 0
        dump = read_scores_csv(tmp_path / "ev" / "scores.csv")
        np.testing.assert_allclose(dump.scores, 1 - 1 / 4, rtol=1e-15)

    def test_segmentation_rows(self, tmp_path):
        data = tmp_path / "scenes"
        scfg = write_json(tmp_path / "s.json", {
            "task": "segmentation", "classes": ["sphere", "cube", "torus"],
            "known": ["sphere", "cube"], "unknown": ["torus"], "n_points": 96, "n_scenes": 10})
        assert main(["synth", "--config", scfg, "--seed", "1", "--out", str(data)]) == 0
        cfg = run_config(tmp_path, data, task="segmentation", n_points=48,
                         ups={"beta_min": 0.0, "beta_max": 0.6})
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
        assert main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.bin"),
                     "--out", str(tmp_path / "ev")]) == 0
        dump = read_scores_csv(tmp_path / "ev" / "scores.csv")
        assert len(dump.scores) == 3 * 96
        metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
        assert "miou" in metrics

    def test_bad_checkpoint(self, tmp_path, capsys):
        (tmp_path / "x.bin").write_bytes(b"not a checkpoint")
        assert main(["eval", "--checkpoint", str(tmp_path / "x.bin"), "--out",
                     str(tmp_path / "o")]) == 2
        assert "magic" in capsys.readouterr().err


class TestMetricsCommand:
    def test_malformed_csv(self, tmp_path, capsys):
        p = tmp_path / "s.csv"
        p.write_text("unit_id,score,is_unknown\na,0.5,1\nb,zz,0\n")
        assert main(["metrics", "--scores", str(p)]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_single_class(self, tmp_path, capsys):
        p = tmp_path / "s.csv"
        p.write_text("unit_id,score,is_unknown\na,0.5,1\nb,0.2,1\n")
        assert main(["metrics", "--scores", str(p)]) == 2

    def test_read_rejects_bad_header(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("id,score\n")
        with pytest.raises(ParseError, match="header"):
            read_scores_csv(p)
