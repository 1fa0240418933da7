"""Nesterov SGD, the step schedule, training and distillation runs."""
import numpy as np
import pytest

from prunedistill import trainer
from prunedistill.architectures import vgg
from prunedistill.checkpoint import MaskedCheckpoint
from prunedistill.data import DataConfig, LabeledDataset, load_dataset
from prunedistill.errors import ConfigError, DataError, NumericError
from prunedistill.layers import ArchitectureSpec, Dense, Flatten
from prunedistill.losses import DistillConfig, kd_loss_and_grad, label_entropy, softmax
from prunedistill.pruning import apply_masks, global_magnitude_mask
from prunedistill.trainer import (
    REPORT_COLUMNS,
    _fit,
    TrainConfig,
    agreement,
    distill,
    evaluate,
    lr_at_epoch,
    sgd_nesterov_step,
    train,
)

SHORT = TrainConfig(epochs=3, batch_size=16, lr=0.05, lr_drops=(2,), seed=0)


class TestSchedule:
    @pytest.mark.parametrize(
        "epoch,lr", [(0, 0.1), (59, 0.1), (60, 0.02), (119, 0.02), (120, 0.004), (160, 0.0008), (199, 0.0008)]
    )
    def test_vgg_steps(self, epoch, lr):
        assert lr_at_epoch(TrainConfig(), epoch) == pytest.approx(lr)

    def test_epoch_out_of_range(self):
        with pytest.raises(ConfigError):
            lr_at_epoch(TrainConfig(epochs=10, lr_drops=()), 10)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"lr_drops": (60, 60)},
            {"epochs": 50},
            {"lr": 0.0},
            {"momentum": 1.0},
            {"batch_size": 0},
        ],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs).check_valid()

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"nesterov": True})


class TestNesterov:
    def test_two_steps(self):
        params = {"w": np.array([0.0])}
        grads = {"w": np.array([1.0])}
        velocity = {"w": np.array([0.0])}
        params, velocity = sgd_nesterov_step(params, grads, velocity, 0.1, 0.9, 0.0)
        assert params["w"][0] == pytest.approx(-0.19)
        assert velocity["w"][0] == pytest.approx(1.0)
        params, velocity = sgd_nesterov_step(params, grads, velocity, 0.1, 0.9, 0.0)
        assert params["w"][0] == pytest.approx(-0.461)
        assert velocity["w"][0] == pytest.approx(1.9)

    def test_weight_decay(self):
        params = {"w": np.array([2.0])}
        out, _ = sgd_nesterov_step(params, {"w": np.array([0.0])}, {"w": np.array([0.0])}, 0.1, 0.0, 0.5)
        assert out["w"][0] == pytest.approx(2.0 - 0.1 * 1.0)

    def test_decay_names(self):
        params = {"w": np.array([2.0]), "g": np.array([2.0])}
        zero = {"w": np.array([0.0]), "g": np.array([0.0])}
        out, _ = sgd_nesterov_step(params, zero, dict(zero), 0.1, 0.0, 0.5, decay_names={"w"})
        assert out["g"][0] == 2.0 and out["w"][0] < 2.0

    def test_masked_coordinates_stay_zero(self):
        params = {"w": np.array([0.0, 1.0])}
        grads = {"w": np.array([-5.0, 1.0])}
        masks = {"w": np.array([False, True])}
        out, velocity = sgd_nesterov_step(params, grads, {"w": np.zeros(2)}, 0.1, 0.9, 5e-4, masks)
        assert out["w"][0] == 0.0 and not np.signbit(out["w"][0])
        assert velocity["w"][0] == 0.0

    def test_inputs_untouched(self):
        params = {"w": np.array([1.0])}
        sgd_nesterov_step(params, {"w": np.array([1.0])}, {"w": np.array([0.0])}, 0.1, 0.9, 0.0)
        assert params["w"][0] == 1.0

    def test_non_finite_update(self):
        with pytest.raises(NumericError):
            sgd_nesterov_step({"w": np.array([1.0])}, {"w": np.array([np.inf])}, {}, 0.1, 0.9, 0.0)


class TestTrain:
    def test_report_and_metrics(self, tiny_arch, tiny_data, tmp_path):
        ckpt, report = train(tiny_arch, tiny_data, SHORT, quiet=True)
        assert [row.epoch for row in report.history] == [0, 1, 2]
        assert [row.lr for row in report.history] == pytest.approx([0.05, 0.05, 0.01])
        assert report.best_val_epoch in (0, 1, 2)
        assert ckpt.epoch == report.best_val_epoch + 1
        assert set(report.final) == {"val_acc", "test_acc", "sparsity"}
        assert report.final["val_acc"] == pytest.approx(report.history[report.best_val_epoch].val_acc)
        path = report.to_csv(tmp_path / "train.csv")
        assert path.read_text().splitlines()[0] == ",".join(REPORT_COLUMNS)

    def test_deterministic(self, tiny_arch, tiny_data):
        a, _ = train(tiny_arch, tiny_data, SHORT, quiet=True)
        b, _ = train(tiny_arch, tiny_data, SHORT, quiet=True)
        assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params)

    def test_zero_epochs_leaves_init_alone(self, tiny_ckpt, tiny_data):
        cfg = TrainConfig(epochs=0, lr_drops=())
        out, report = train(tiny_ckpt.arch, tiny_data, cfg, init=tiny_ckpt, quiet=True)
        assert out is not tiny_ckpt and report.history == []
        assert tiny_ckpt.metrics == {}
        assert np.array_equal(out.params["0.weight"], tiny_ckpt.params["0.weight"])

    def test_zero_epochs_ignores_the_drop_schedule(self, tiny_ckpt, tiny_data):
        cfg = TrainConfig(epochs=0)
        cfg.check_valid()
        out, report = train(tiny_ckpt.arch, tiny_data, cfg, init=tiny_ckpt, quiet=True)
        assert report.history == []
        assert all(np.array_equal(out.params[n], tiny_ckpt.params[n]) for n in tiny_ckpt.params)

    def test_masks_survive_training(self, tiny_ckpt, tiny_data):
        tiny_ckpt.masks = global_magnitude_mask(tiny_ckpt.params, 0.5, tiny_ckpt.masks)
        tiny_ckpt.params = apply_masks(tiny_ckpt.params, tiny_ckpt.masks)
        out, _ = train(tiny_ckpt.arch, tiny_data, SHORT, init=tiny_ckpt, quiet=True)
        for name, mask in out.masks.items():
            assert (out.params[name][~mask] == 0).all()
        assert out.sparsity == pytest.approx(0.5, abs=1e-2)

    def test_init_for_another_arch(self, tiny_ckpt, tiny_data):
        other = vgg([2, "M", 8, "M"], (3, 8, 8), 3)
        with pytest.raises(ConfigError):
            train(other, tiny_data, SHORT, init=tiny_ckpt, quiet=True)

    def test_augmented_run(self, tiny_arch, tiny_data):
        cfg = TrainConfig(epochs=1, batch_size=32, lr=0.05, lr_drops=(), augment=True)
        _, report = train(tiny_arch, tiny_data, cfg, quiet=True)
        assert np.isfinite(report.history[0].train_loss)

    def test_non_finite_loss_raises(self, tiny_ckpt, tiny_data):
        def nan_loss(logits, images, labels):
            return float("nan"), np.zeros_like(logits)

        with pytest.raises(NumericError):
            _fit(tiny_ckpt, tiny_data, SHORT, nan_loss, quiet=True)

    @pytest.mark.slow
    def test_linear_model_separates_blobs(self):
        rng = np.random.default_rng(0)
        labels = np.repeat([0, 1], 125)
        centers = np.where(labels == 0, -1.0, 1.0)[:, None, None, None]
        images = (centers + rng.normal(0.0, 0.3, size=(250, 1, 4, 4))).astype(np.float32)
        order = rng.permutation(250)
        data = LabeledDataset(images, labels, 2, {"train": order[:200], "val": order[200:]})
        linear = ArchitectureSpec((1, 4, 4), 2, (Flatten(), Dense(16, 2)), "linear")
        cfg = TrainConfig(epochs=20, batch_size=16, lr=0.05, lr_drops=(), seed=0)
        _, report = train(linear, data, cfg, quiet=True)
        assert report.final["val_acc"] >= 0.99

    @pytest.mark.slow
    def test_learns_blobs(self, tiny_arch):
        data = load_dataset(
            DataConfig(classes=3, channels=3, height=8, width=8, per_class=60, test_per_class=20, noise_std=0.2)
        )
        cfg = TrainConfig(epochs=10, batch_size=16, lr=0.05, lr_drops=(7,), seed=0)
        _, report = train(tiny_arch, data, cfg, quiet=True)
        assert report.final["test_acc"] > 0.5


class TestEvaluation:
    def test_evaluate_range(self, tiny_ckpt, tiny_data):
        assert 0.0 <= evaluate(tiny_ckpt, tiny_data, "test") <= 1.0

    def test_empty_split(self, tiny_ckpt, tiny_data):
        with pytest.raises(DataError):
            evaluate(tiny_ckpt, tiny_data, "nonexistent")

    def test_untrained_net_on_random_labels_is_at_chance(self):
        rng = np.random.default_rng(0)
        images = rng.normal(size=(10000, 3, 8, 8)).astype(np.float32)
        labels = rng.integers(0, 10, size=10000)
        data = LabeledDataset(images, labels, 10, {"test": np.arange(10000)})
        ckpt = MaskedCheckpoint.fresh(vgg([4, "M"], (3, 8, 8), 10), seed=0)
        assert evaluate(ckpt, data, "test") == pytest.approx(0.10, abs=0.02)

    def test_self_agreement(self, tiny_ckpt, tiny_data):
        assert agreement(tiny_ckpt, tiny_ckpt, tiny_data) == 1.0

    def test_agreement_class_mismatch(self, tiny_ckpt, tiny_data):
        other = MaskedCheckpoint.fresh(vgg([4, "M", 8, "M"], (3, 8, 8), 4), seed=0)
        with pytest.raises(ConfigError):
            agreement(tiny_ckpt, other, tiny_data)


class TestDistill:
    def test_student_run(self, tiny_ckpt, tiny_data):
        student_arch = vgg([2, "M", 4, "M"], (3, 8, 8), 3, name="student")
        student, report = distill(student_arch, tiny_ckpt, tiny_data, DistillConfig(0.9, 4.0), SHORT, quiet=True)
        assert student.arch == student_arch
        assert 0.0 <= report.final["agreement"] <= 1.0
        assert student.metrics["agreement"] == report.final["agreement"]

    def test_class_mismatch(self, tiny_ckpt, tiny_data):
        student_arch = vgg([2, "M", 4, "M"], (3, 8, 8), 5)
        with pytest.raises(ConfigError):
            distill(student_arch, tiny_ckpt, tiny_data, DistillConfig(), SHORT, quiet=True)

    def test_alpha_zero_matches_plain_training(self, tiny_ckpt, tiny_data):
        student_arch = vgg([2, "M", 4, "M"], (3, 8, 8), 3, name="student")
        kd, _ = distill(student_arch, tiny_ckpt, tiny_data, DistillConfig(0.0, 4.0), SHORT, quiet=True)
        ce, _ = train(student_arch, tiny_data, SHORT, quiet=True)
        assert all(np.array_equal(kd.params[n], ce.params[n]) for n in ce.params)

    def test_self_distillation_starts_at_teacher_entropy(self, tiny_data, monkeypatch):
        # no BN, so train-mode and eval-mode logits coincide
        arch = vgg([4, "M", 8, "M"], (3, 8, 8), 3, batch_norm=False, name="plain")
        teacher = MaskedCheckpoint.fresh(arch, seed=0)
        calls = []

        def recorded(student_logits, teacher_logits, labels, cfg):
            loss, grad = kd_loss_and_grad(student_logits, teacher_logits, labels, cfg)
            calls.append((loss, teacher_logits))
            return loss, grad

        monkeypatch.setattr(trainer, "kd_loss_and_grad", recorded)
        cfg = TrainConfig(epochs=1, batch_size=16, lr=0.05, lr_drops=(), seed=0)
        distill(arch, teacher, tiny_data, DistillConfig(alpha=1.0, tau=1.0), cfg, init=teacher.copy(), quiet=True)
        loss, teacher_logits = calls[0]
        assert loss == pytest.approx(float(np.mean(label_entropy(softmax(teacher_logits)))), rel=1e-6)
