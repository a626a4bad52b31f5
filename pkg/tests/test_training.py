import numpy as np
import pytest

from openset3d.data import Sample, SplitConfig, apply_split, synth_scenes, synth_shapes
from openset3d.geometry import PointCloud
from openset3d.network import BackboneConfig, OpenSetNet, total_loss
from openset3d.plotting import density_histogram, histogram_svg
from openset3d.training import (
    TrainConfig,
    TrainingError,
    crop,
    evaluate,
    fit_points,
    format_log,
    prepare_classification,
    train,
)
from openset3d.ups import UpsParams

SMALL = dict(widths=(8, 16), fractions=(1.0, 0.5), head_hidden=16, upe_hidden=8)


@pytest.fixture(scope="module")
def shapes_split():
    ds = synth_shapes(["sphere", "cube", "cylinder", "torus"], 64, 8, np.random.default_rng(0))
    return apply_split(ds, SplitConfig("s", ["sphere", "cube", "cylinder"], ["torus"]), 0.25, 0)


class TestHelpers:
    def test_fit_points(self, rng):
        pts = rng.random((10, 3))
        assert len(fit_points(pts, 6, rng)) == 6
        idx = fit_points(pts, 15, rng)
        assert len(idx) == 15 and set(idx[:10]) == set(range(10))
        np.testing.assert_array_equal(fit_points(pts, 10, rng), np.arange(10))

    def test_crop_is_local_block(self, rng):
        c = PointCloud(rng.random((200, 3)), rng.integers(0, 3, 200))
        out = crop(c, 50, rng)
        assert len(out) == 50 and out.labels is not None

    def test_prepare_normalises(self, shapes_split):
        prepared = prepare_classification(shapes_split[0], 32, seed=0)
        for s in prepared:
            assert len(s.cloud) == 32
            np.testing.assert_allclose(s.cloud.coords.mean(axis=0), 0, atol=1e-12)

    def test_config_round_trip(self):
        cfg = TrainConfig(epochs=3, ups=UpsParams(0.1, 0.2, generator="noise"))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_format_log(self):
        text = format_log([{"epoch": 1, "loss_task": 0.5, "loss_upe": 0.0, "train_accuracy": 1.0}])
        assert text == "epoch,loss_task,loss_upe,train_accuracy\n1,0.5,0.0,1.0\n"


class TestTrain:
    def test_fixed_batch_loss_decreases(self, shapes_split):
        train_set, _ = shapes_split
        model = OpenSetNet(BackboneConfig(num_known=3, **SMALL), seed=0)
        batch = prepare_classification(train_set[:12], 64, seed=99)
        coords = np.stack([s.cloud.coords for s in batch])
        labels = np.array([s.label for s in batch])
        refs = np.zeros(coords.shape[:2])

        def fixed_loss():
            return total_loss(model(coords), labels, refs)[0].item()

        before = fixed_loss()
        cfg = TrainConfig(n_points=64, epochs=20, batch_size=8, lr=3e-3, seed=0,
                          ups=UpsParams(0.4, 0.6, aug_ratio=0.2))
        rows = train(model, train_set, cfg)
        assert len(rows) == 20
        assert fixed_loss() < before

    def test_deterministic(self, shapes_split):
        cfg = TrainConfig(n_points=32, epochs=2, batch_size=8, seed=4,
                          ups=UpsParams(0.4, 0.6, aug_ratio=0.5))
        logs = []
        for _ in range(2):
            m = OpenSetNet(BackboneConfig(num_known=3, **SMALL), seed=1)
            logs.append((format_log(train(m, shapes_split[0], cfg)), m.state_dict()))
        assert logs[0][0] == logs[1][0]
        for k in logs[0][1]:
            np.testing.assert_array_equal(logs[0][1][k], logs[1][1][k])

    def test_rejects_unknown_training_labels(self, shapes_split):
        _, evals = shapes_split
        m = OpenSetNet(BackboneConfig(num_known=3, **SMALL))
        with pytest.raises(ValueError, match="outside the known classes"):
            train(m, evals, TrainConfig(n_points=32, epochs=1))

    def test_ups_needs_unknown_logit(self, shapes_split):
        m = OpenSetNet(BackboneConfig(num_known=3, unknown_class=False, **SMALL))
        with pytest.raises(ValueError, match="unknown logit"):
            train(m, shapes_split[0], TrainConfig(n_points=32, epochs=1))

    def test_mixing_needs_two_classes(self):
        one = [Sample(PointCloud(np.random.default_rng(i).normal(size=(32, 3)), np.zeros(32)), 0)
               for i in range(4)]
        m = OpenSetNet(BackboneConfig(num_known=1, **SMALL))
        with pytest.raises(TrainingError, match="two known classes"):
            train(m, one, TrainConfig(n_points=32, epochs=1, ups=UpsParams(0.4, 0.6, aug_ratio=1.0)))

    def test_segmentation_runs(self):
        ds = synth_scenes(["sphere", "cube", "torus"], 2, 80, 6, np.random.default_rng(2))
        tr, ev = apply_split(ds, SplitConfig("s", ["sphere", "cube"], ["torus"],
                                             task="segmentation"), 0.34, 0)
        m = OpenSetNet(BackboneConfig(num_known=2, head="segmentation", **SMALL))
        rows = train(m, tr, TrainConfig(n_points=40, epochs=2, batch_size=4,
                                        ups=UpsParams(0.0, 0.6)))
        assert len(rows) == 2
        res = evaluate(m, ev, "upe")
        assert len(res.dump.scores) == sum(len(s.cloud) for s in ev)


class TestEvaluate:
    def test_known_only_warns(self, shapes_split, caplog):
        known = [s for s in shapes_split[1] if s.label < 3]
        m = OpenSetNet(BackboneConfig(num_known=3, **SMALL))
        res = evaluate(m, known, "msp", n_points=32)
        assert res.report.auroc is None
        assert res.report.accuracy_sample is not None
        assert "omitted" in caplog.text

    def test_upe_needs_estimator(self, shapes_split):
        m = OpenSetNet(BackboneConfig(num_known=3, upe=False, **SMALL))
        with pytest.raises(ValueError, match="unknown-point estimator"):
            evaluate(m, shapes_split[1], "upe", n_points=32)

    def test_unknown_score_fn(self, shapes_split):
        m = OpenSetNet(BackboneConfig(num_known=3, **SMALL))
        with pytest.raises(ValueError, match="entropy"):
            evaluate(m, shapes_split[1], "entropy", n_points=32)


class TestPlotting:
    def test_density_unit_area(self, rng):
        d = density_histogram(rng.random(500), 20, 0.0, 1.0)
        assert d.sum() * (1.0 / 20) == pytest.approx(1.0)

    def test_svg(self, rng):
        known, unknown = rng.random(50), rng.random(20) + 0.5
        svg = histogram_svg(known, unknown, title="a<b")
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
        assert "a&lt;b" in svg and "known (n=50)" in svg and "unknown (n=20)" in svg
        assert svg == histogram_svg(known.copy(), unknown.copy(), title="a<b")

    def test_degenerate_inputs(self):
        assert "<svg" in histogram_svg([], [])
        assert "<svg" in histogram_svg([0.3, 0.3], [0.3])
