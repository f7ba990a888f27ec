import json
import math

import numpy as np
import pytest

from helpers import tiny_model_config
from vitgru.data import ImageSample
from vitgru.errors import ConfigError, DataError, LoadError, NumericError, StateError
from vitgru.model import Model, ModelConfig
from vitgru.rng import substream
from vitgru.tensor import Tape, Tensor
from vitgru.train import (
    Adam,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    cosine_lr,
    cross_entropy,
    train,
)


class TestCrossEntropy:
    def test_uniform_logits(self):
        tape = Tape()
        loss = cross_entropy(tape, Tensor(np.zeros((1, 3))), [0])
        assert abs(float(loss.data) - math.log(3)) < 1e-12

    def test_near_one_hot(self):
        loss = cross_entropy(Tape(), Tensor([[30.0, -30.0, -30.0]]), [0])
        assert 0.0 <= float(loss.data) < 1e-6

    def test_batch_is_mean_of_rows(self):
        a = float(cross_entropy(Tape(), Tensor([[0.0, 0.0, 0.0]]), [0]).data)
        b = float(cross_entropy(Tape(), Tensor([[30.0, -30.0, -30.0]]), [0]).data)
        both = float(
            cross_entropy(Tape(), Tensor([[0.0, 0.0, 0.0], [30.0, -30.0, -30.0]]), [0, 0]).data
        )
        assert abs(both - (a + b) / 2) < 1e-12

    def test_nonnegative_on_random_draws(self):
        rng = substream(1, "draws")
        for _ in range(200):
            logits = rng.normal(size=(4, 3)) * 5
            labels = rng.integers(0, 3, size=4)
            loss = float(cross_entropy(Tape(), Tensor(logits), labels).data)
            assert loss >= 0.0

    def test_label_out_of_range_names_row(self):
        with pytest.raises(DataError) as exc:
            cross_entropy(Tape(), Tensor(np.zeros((2, 3))), [0, 5])
        assert "row 1" in str(exc.value)

    def test_gradient_matches_softmax_minus_onehot(self):
        logits = Tensor(np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]]), requires_grad=True)
        tape = Tape()
        loss = cross_entropy(tape, logits, [1, 2])
        tape.backward(loss)
        z = logits.data
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        onehot = np.zeros((2, 3))
        onehot[0, 1] = onehot[1, 2] = 1.0
        np.testing.assert_allclose(logits.grad, (p - onehot) / 2, rtol=1e-10)


class TestCosineSchedule:
    CFG = TrainConfig(epochs=200, lr0=1e-3, lr_min=1e-6)

    def test_endpoints(self):
        assert abs(cosine_lr(0, self.CFG) - 1e-3) < 1e-12 * 1e-3
        assert abs(cosine_lr(200, self.CFG) - 1e-6) < 1e-12 * 1e-6

    def test_midpoint(self):
        assert abs(cosine_lr(100, self.CFG) - 5.005e-4) < 1e-15

    def test_monotone_non_increasing(self):
        values = [cosine_lr(t, self.CFG) for t in range(201)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_clamps_past_the_end(self):
        assert cosine_lr(1000, self.CFG) == self.CFG.lr_min

    def test_negative_index_rejected(self):
        with pytest.raises(ConfigError):
            cosine_lr(-1, self.CFG)

    def test_config_invariants(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr0=1e-6, lr_min=1e-3)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)


def adam_oracle(w0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    # the textbook recurrence, element by element
    w = float(w0)
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        w -= lr * mhat / (math.sqrt(vhat) + eps)
    return w


class TestAdam:
    def _single_param(self, value):
        t = Tensor(np.array([value]), requires_grad=True, name="w")
        opt = Adam({"w": t}, TrainConfig())
        return t, opt

    def test_zero_gradient_leaves_parameter(self):
        t, opt = self._single_param(1.5)
        t.grad = np.zeros(1)
        opt.step(1e-3)
        assert t.data[0] == 1.5

    def test_first_step_approximates_signed_lr(self):
        for g in (0.7, -2.3):
            t, opt = self._single_param(1.0)
            t.grad = np.array([g])
            opt.step(1e-3)
            delta = t.data[0] - 1.0
            assert abs(delta + 1e-3 * math.copysign(1.0, g)) < 1e-6

    def test_matches_hand_recurrence_over_steps(self):
        rng = substream(2, "grads")
        grads = rng.normal(size=7)
        t, opt = self._single_param(0.4)
        for g in grads:
            t.grad = np.array([g])
            opt.step(2e-3)
        expected = adam_oracle(0.4, grads, 2e-3)
        assert abs(t.data[0] - expected) < 1e-12

    def test_missing_grad_names_parameter(self):
        t, opt = self._single_param(1.0)
        with pytest.raises(StateError) as exc:
            opt.step(1e-3)
        assert "w" in str(exc.value)

    def test_step_counter(self):
        t, opt = self._single_param(1.0)
        for _ in range(5):
            t.grad = np.array([0.1])
            opt.step(1e-3)
        assert opt.t == 5

    def test_frozen_params_excluded(self):
        frozen = Tensor(np.array([1.0]), requires_grad=False, name="f")
        opt = Adam({"f": frozen}, TrainConfig())
        assert not opt.params
        opt.step(1e-3)  # no-op


def make_synth_samples(n_per_class, num_classes=3, size=32, seed=0, split="train"):
    rng = substream(seed, "samples")
    samples = []
    for cls in range(num_classes):
        cy = size // 4 + cls * size // 4
        for _ in range(n_per_class):
            yy, xx = np.mgrid[0:size, 0:size]
            blob = np.exp(-((yy - cy) ** 2 + (xx - size // 2) ** 2) / (2 * (size / 6) ** 2))
            img = np.clip(0.2 + 0.6 * blob + rng.normal(0, 0.05, (size, size)), 0, 1)
            samples.append(ImageSample(np.repeat(img[:, :, None], 3, axis=2).astype(np.float32),
                                       cls, split=split))
    return samples


def tiny_float32_model(seed=0):
    return Model(tiny_model_config(dtype="float32"), seed=seed)


class TestTrainLoop:
    def test_zero_lr_changes_nothing(self):
        model = tiny_float32_model()
        before = {n: t.data.copy() for n, t in model.named_parameters().items()}
        cfg = TrainConfig(batch_size=4, epochs=2, lr0=0.0, lr_min=0.0, seed=1)
        train(model, make_synth_samples(2), make_synth_samples(1, split="test"), cfg)
        for name, t in model.named_parameters().items():
            np.testing.assert_array_equal(t.data, before[name], err_msg=name)

    def test_same_seed_same_log(self):
        logs = []
        for _ in range(2):
            model = Model(tiny_model_config(dtype="float64"), seed=3)
            cfg = TrainConfig(batch_size=4, epochs=3, seed=3)
            log = train(model, make_synth_samples(2), make_synth_samples(1, split="test"), cfg)
            logs.append([(r["train_loss"], r["train_top1"], r["test_top1"]) for r in log])
        assert logs[0] == logs[1]

    def test_frozen_tensors_bit_identical_and_loss_moves(self):
        model = tiny_float32_model(seed=4)
        frozen_before = {n: t.data.copy() for n, t in model.frozen_parameters().items()}
        cfg = TrainConfig(batch_size=4, epochs=3, seed=4)
        log = train(model, make_synth_samples(3, seed=4), make_synth_samples(1, seed=5, split="test"), cfg)
        assert len(log) == 3
        for name, t in model.frozen_parameters().items():
            np.testing.assert_array_equal(t.data, frozen_before[name], err_msg=name)
        assert all(math.isfinite(r["train_loss"]) for r in log)
        assert log[0].keys() == {"epoch", "lr", "train_loss", "train_top1",
                                 "test_top1", "test_top2", "wall_ms"}

    def test_log_written_as_jsonl(self, tmp_path):
        model = tiny_float32_model(seed=5)
        cfg = TrainConfig(batch_size=4, epochs=2, seed=5)
        path = tmp_path / "log.jsonl"
        train(model, make_synth_samples(2), make_synth_samples(1, split="test"), cfg, log_path=path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 2
        assert json.loads(lines[0])["epoch"] == 0

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            train(tiny_float32_model(), [], [], TrainConfig(epochs=1))

    def test_non_finite_loss_aborts_with_diagnostic(self):
        model = tiny_float32_model(seed=6)
        model.head_params.cls_w.data[:] = np.inf
        cfg = TrainConfig(batch_size=4, epochs=1, seed=6)
        with np.errstate(invalid="ignore"), pytest.raises(NumericError) as exc:
            train(model, make_synth_samples(2), [], cfg)
        assert "epoch 0" in str(exc.value)

    def test_step_counter_equals_batches(self):
        model = tiny_float32_model(seed=7)
        samples = make_synth_samples(3, seed=7)  # 9 samples, batch 4 -> 3 batches/epoch
        cfg = TrainConfig(batch_size=4, epochs=2, seed=7)
        opt_probe = {}

        orig_step = Adam.step

        def counting_step(self, lr):
            orig_step(self, lr)
            opt_probe["t"] = self.t

        Adam.step = counting_step
        try:
            train(model, samples, [], cfg)
        finally:
            Adam.step = orig_step
        assert opt_probe["t"] == 2 * 3

    def test_oversample_balances_epoch(self):
        model = tiny_float32_model(seed=8)
        samples = make_synth_samples(1, seed=8) + make_synth_samples(3, seed=9)  # imbalanced
        cfg = TrainConfig(batch_size=4, epochs=1, seed=8, oversample_minority=True)
        log = train(model, samples, [], cfg)
        # 3 classes x 4 each once the minority classes are replicated
        counted = log[0]["train_loss"]
        assert math.isfinite(counted)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = tiny_float32_model(seed=9)
        opt = Adam(model.named_parameters(), TrainConfig())
        for t in opt.params.values():
            t.grad = np.ones_like(t.data) * 0.01
        opt.step(1e-3)
        path = tmp_path / "model.ckpt"
        checkpoint_save(model, opt, path, epoch=4, best_test_top1=0.5)

        fresh = tiny_float32_model(seed=10)
        fresh_opt = Adam(fresh.named_parameters(), TrainConfig())
        meta = checkpoint_load(path, fresh, fresh_opt)
        assert meta["epoch"] == 4
        assert fresh_opt.t == 1
        for name, t in model.named_parameters().items():
            np.testing.assert_array_equal(fresh.named_parameters()[name].data, t.data)
        for name in opt.params:
            np.testing.assert_array_equal(fresh_opt.m[name], opt.m[name])
            np.testing.assert_array_equal(fresh_opt.v[name], opt.v[name])

    def test_config_hash_mismatch_rejected(self, tmp_path):
        model = tiny_float32_model(seed=11)
        path = tmp_path / "model.ckpt"
        checkpoint_save(model, None, path)
        other = Model(tiny_model_config(dtype="float32", depth=3), seed=11)
        with pytest.raises(LoadError) as exc:
            checkpoint_load(path, other)
        assert "hash" in str(exc.value)

    def test_resume_continues_epochs(self, tmp_path):
        samples = make_synth_samples(2, seed=12)
        test = make_synth_samples(1, seed=13, split="test")
        path = tmp_path / "resume.ckpt"

        model = tiny_float32_model(seed=12)
        cfg = TrainConfig(batch_size=4, epochs=2, seed=12, checkpoint_path=str(path))
        train(model, samples, test, cfg)

        resumed = tiny_float32_model(seed=99)
        cfg4 = TrainConfig(batch_size=4, epochs=4, seed=12, checkpoint_path=str(path))
        log = train(resumed, samples, test, cfg4, resume_from=path)
        assert [r["epoch"] for r in log][0] >= 1
        assert log[-1]["epoch"] == 3
        assert all(math.isfinite(r["train_loss"]) for r in log)
