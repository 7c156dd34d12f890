import csv
import re
import warnings

import numpy as np
import pytest

from corrdiff.autodiff import load_checkpoint
from corrdiff.diffusion import make_schedule
from corrdiff.network import NetworkConfig, NoisePredictor
from corrdiff.pointset import ShapeDataset, SyntheticFamilyConfig, center_scale, gen_synthetic, knn_mask, mean_shape
from corrdiff.training import (
    AdamState,
    Classifier,
    ClassifierConfig,
    DiffusionTrainer,
    TrainConfig,
    adam_step,
    classification_report,
    smooth,
    train_classifier,
    train_diffusion,
    write_classification_csv,
    write_loss_csv,
)

from oracles import adam_scalar


def tiny_setup(n_subjects=4, n_points=8, seed=0):
    ds = center_scale(gen_synthetic(SyntheticFamilyConfig(n_points=n_points, n_subjects=n_subjects, seed=seed)))
    cfg = NetworkConfig(n_points=n_points, widths=(16, 16, 16), k=3, n_steps=20, time_dim=8)
    model = NoisePredictor(cfg, knn_mask(mean_shape(ds), 3), seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sched = make_schedule("scaled-linear", 20, 1e-4, 0.3)
    return ds, model, sched


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([[1.0, -2.0]])}
        state = AdamState()
        adam_step(p, {"w": np.zeros((1, 2))}, state, lr=0.1)
        np.testing.assert_array_equal(p["w"], [[1.0, -2.0]])
        assert state.step == 1

    def test_first_step(self):
        p = {"w": np.zeros((1, 1))}
        adam_step(p, {"w": np.ones((1, 1))}, AdamState(), lr=0.1)
        assert p["w"].item() == pytest.approx(-0.1, abs=1e-8)
        assert p["w"].item() == pytest.approx(adam_scalar(0.0, [1.0], 0.1), rel=1e-15)

    def test_quadratic(self):
        p = {"w": np.zeros((1, 1))}
        state = AdamState()
        grads = []
        for _ in range(200):
            g = 2.0 * (p["w"] - 3.0)
            grads.append(g.item())
            adam_step(p, {"w": g}, state, lr=0.1)
        assert abs(p["w"].item() - 3.0) < 1e-2
        assert p["w"].item() == pytest.approx(adam_scalar(0.0, grads, 0.1), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            adam_step({"w": np.zeros((1, 2))}, {"w": np.zeros((2, 1))}, AdamState(), lr=0.1)


class TestSmoothing:
    def test_window(self):
        np.testing.assert_allclose(smooth([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])

    def test_constant(self):
        np.testing.assert_allclose(smooth(np.full(100, 7.0)), 7.0)


class TestDiffusionTrainer:
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_memorizes_one_shape(self):
        # beta_1 = 1e-2 keeps the exact eps target within reach of a small net;
        # at 1e-4 it needs an input gain near 100
        ds, model, _ = tiny_setup()
        sched = make_schedule("scaled-linear", 20, 1e-2, 0.3)
        one = ds.subset([0])
        tr = DiffusionTrainer(model, one, sched, TrainConfig(epochs=2000, batch_size=1, lr=3e-3, ema_decay=0.0))
        losses = tr.run()
        assert len(losses) == 2000
        assert smooth(losses, 100)[-1] < 0.05

    def test_deterministic(self):
        curves = []
        for _ in range(2):
            ds, model, sched = tiny_setup()
            curves.append(DiffusionTrainer(model, ds, sched, TrainConfig(epochs=3, batch_size=3, lr=1e-3)).run())
        assert curves[0] == curves[1]

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = TrainConfig(epochs=10, batch_size=3, lr=1e-3, ema_decay=0.9)
        ds, model, sched = tiny_setup()
        full = DiffusionTrainer(model, ds, sched, cfg)
        full.run(20)

        ds, model, sched = tiny_setup()
        first = DiffusionTrainer(model, ds, sched, cfg)
        first.run(10)
        first.save(tmp_path / "m.ckpt")
        ds, model, sched = tiny_setup()
        second = DiffusionTrainer(NoisePredictor(model.config, model.mask, seed=99), ds, sched, cfg)
        second.load(tmp_path / "m.ckpt")
        assert second.step == 10
        second.run(10)
        assert second.losses[-10:] == full.losses[10:]
        for k in full.model.params:
            np.testing.assert_array_equal(second.model.params[k], full.model.params[k])
            np.testing.assert_array_equal(second.ema[k], full.ema[k])

    def test_missing_tensor_named(self, tmp_path):
        ds, model, sched = tiny_setup()
        tr = DiffusionTrainer(model, ds, sched, TrainConfig(epochs=1, batch_size=4))
        tr.run(1)
        tr.save(tmp_path / "m.ckpt")
        text = (tmp_path / "m.ckpt").read_text().splitlines()
        # drop the ema copy of head.b (header line plus one row)
        i = text.index(next(ln for ln in text if ln.startswith("ema.head.b ")))
        del text[i : i + 2]
        text[0] = f"CKPT1 {int(text[0].split()[1]) - 1}"
        (tmp_path / "m.ckpt").write_text("\n".join(text) + "\n")
        with pytest.raises(KeyError, match="ema.head.b"):
            tr.load(tmp_path / "m.ckpt")

    def test_checkpoint_grammar(self, tmp_path):
        ds, model, sched = tiny_setup()
        tr = DiffusionTrainer(model, ds, sched, TrainConfig(epochs=1, batch_size=4))
        tr.run(1)
        tr.save(tmp_path / "m.ckpt")
        lines = (tmp_path / "m.ckpt").read_text().split("\n")
        assert lines[-1] == ""
        m = re.fullmatch(r"CKPT1 (\d+)", lines[0])
        count, pos = int(m.group(1)), 1
        number = r"-?(\d+(\.\d*)?|\.\d+)([eE][-+]?\d+)?"
        for _ in range(count):
            head = re.fullmatch(r"(\S+) (\d+) (\d+)", lines[pos])
            rows, cols = int(head.group(2)), int(head.group(3))
            for row in lines[pos + 1 : pos + 1 + rows]:
                vals = row.split(" ")
                assert len(vals) == cols and all(re.fullmatch(number, v) for v in vals)
            pos += 1 + rows
        assert pos == len(lines) - 1
        assert set(load_checkpoint(tmp_path / "m.ckpt")) >= {"train.step", "adam.step", "attn.mask", "ema.corr.E"}

    def test_checkpoint_every(self, tmp_path):
        ds, model, sched = tiny_setup()
        tr = DiffusionTrainer(model, ds, sched, TrainConfig(epochs=3, batch_size=4))
        tr.run(checkpoint=tmp_path / "m.ckpt", checkpoint_every=2)
        assert load_checkpoint(tmp_path / "m.ckpt")["train.step"].item() == 6

    def test_unlabeled_conditional_rejected(self):
        ds, _, sched = tiny_setup()
        cfg = NetworkConfig(n_points=8, widths=(8, 8, 8), k=3, n_steps=20, time_dim=8, n_classes=2)
        model = NoisePredictor(cfg, knn_mask(mean_shape(ds), 3))
        with pytest.raises(ValueError, match="labeled"):
            DiffusionTrainer(model, ShapeDataset(ds.points), sched, TrainConfig(batch_size=4))

    @pytest.mark.parametrize("kw", [{"lr": 0.0}, {"batch_size": 99}, {"ema_decay": 1.0}])
    def test_invalid_config(self, kw):
        ds, model, sched = tiny_setup()
        with pytest.raises(ValueError):
            DiffusionTrainer(model, ds, sched, TrainConfig(**kw))

    def test_ablation_switches(self):
        base = NetworkConfig(n_points=8, k=3)
        cfg = TrainConfig(disable_correspondence=True, mask_all_true=True).network_config(base)
        assert not cfg.use_correspondence_embeddings and cfg.mask_all_true

    def test_train_diffusion_writes_outputs(self, tmp_path):
        ds, model, sched = tiny_setup()
        res = train_diffusion(model, ds, sched, TrainConfig(epochs=2, batch_size=4), tmp_path / "m.ckpt", tmp_path / "loss.csv")
        assert len(res.losses) == 4
        rows = list(csv.reader(open(tmp_path / "loss.csv")))
        assert rows[0] == ["step", "loss"] and len(rows) == 5
        assert float(rows[-1][1]) == res.losses[-1]


class TestClassifier:
    def test_separable_classes(self):
        cfg = SyntheticFamilyConfig(n_points=32, n_subjects=100, atrophy_depth=0.4, depth_jitter=0.0,
                                    radius_jitter=0.0, surface_noise=0.0)
        ds = center_scale(gen_synthetic(cfg))
        clf = train_classifier(ds, ClassifierConfig(widths=(16, 16), epochs=30, batch_size=32))
        assert np.mean(clf.predict(ds.points) == ds.labels) > 0.99

    def test_shuffled_labels_are_chance(self):
        ds = center_scale(gen_synthetic(SyntheticFamilyConfig(n_points=32, n_subjects=200, seed=2)))
        labels = np.random.default_rng(0).permutation(ds.labels)
        idx = np.random.default_rng(1).permutation(len(ds))
        train, test = idx[:300], idx[300:]
        clf = train_classifier(ShapeDataset(ds.points[train], labels[train]),
                               ClassifierConfig(widths=(16, 16), epochs=20, batch_size=32))
        acc = np.mean(clf.predict(ds.points[test]) == labels[test])
        assert abs(acc - 0.5) <= 0.1

    def test_point_order_invariant(self):
        clf = Classifier(ClassifierConfig(widths=(8, 8)))
        x = np.random.default_rng(0).normal(size=(3, 10, 3))
        perm = np.random.default_rng(1).permutation(10)
        np.testing.assert_allclose(clf.logits(x[:, perm]), clf.logits(x), rtol=1e-12)

    def test_noise_aware_needs_t(self):
        clf = Classifier(ClassifierConfig(widths=(8,), noise_aware=True, n_steps=10))
        with pytest.raises(ValueError, match="timesteps"):
            clf.logits(np.zeros((1, 4, 3)))
        assert clf.logits(np.zeros((2, 4, 3)), [1, 10]).shape == (2, 2)

    def test_noise_aware_training(self):
        ds = center_scale(gen_synthetic(SyntheticFamilyConfig(n_points=16, n_subjects=20)))
        sched = make_schedule("scaled-linear", 100, 1e-4, 0.15)
        clf = train_classifier(ds, ClassifierConfig(widths=(8,), noise_aware=True, epochs=2), sched)
        assert clf.config.n_steps == 100
        assert clf.predict(ds.points, 1).shape == (40,)
        with pytest.raises(ValueError, match="variance schedule"):
            train_classifier(ds, ClassifierConfig(noise_aware=True, epochs=1))

    def test_single_class_rejected(self):
        ds = gen_synthetic(SyntheticFamilyConfig(n_points=8, n_subjects=3)).with_class(0)
        with pytest.raises(ValueError, match="two classes"):
            train_classifier(ds, ClassifierConfig(epochs=1))

    def test_save_load(self, tmp_path):
        cfg = ClassifierConfig(widths=(8, 8))
        clf = Classifier(cfg)
        clf.save(tmp_path / "c.ckpt")
        back = Classifier.load(cfg, tmp_path / "c.ckpt")
        x = np.random.default_rng(0).normal(size=(2, 5, 3))
        np.testing.assert_array_equal(back.logits(x), clf.logits(x))
        with pytest.raises(ValueError, match="shape"):
            Classifier.load(ClassifierConfig(widths=(8, 4)), tmp_path / "c.ckpt")


class TestClassificationReport:
    def test_hand_example(self):
        rep = classification_report([0, 0, 0, 1, 1], [0, 1, 0, 1, 0])
        np.testing.assert_array_equal(rep.confusion, [[2, 1], [1, 1]])
        np.testing.assert_allclose(rep.per_class_accuracy, [2 / 3, 0.5])
        assert rep.accuracy == pytest.approx(0.6)
        assert rep.f1 == pytest.approx(0.5)  # tp 1, fp 1, fn 1

    def test_csv(self, tmp_path):
        reps = {"real": classification_report([0, 1], [0, 1]), "gen": classification_report([0, 1], [1, 1])}
        write_classification_csv(reps, tmp_path / "cm.csv", tmp_path / "sum.csv")
        cm = list(csv.DictReader(open(tmp_path / "cm.csv")))
        assert len(cm) == 8 and cm[1] == {"data": "real", "true": "0", "predicted": "1", "count": "0"}
        summary = list(csv.DictReader(open(tmp_path / "sum.csv")))
        assert summary[1]["class0_accuracy"] == "0.0" and summary[0]["accuracy"] == "1.0"


def test_loss_csv(tmp_path):
    write_loss_csv([0.5, 0.25], tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text() == "step,loss\n1,0.5\n2,0.25\n"
