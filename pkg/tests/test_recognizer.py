import math

import numpy as np
import pydantic
import pytest

from aroface import recognizer
from aroface.errors import ContractViolation, FileIntegrityError, MissingFileError
from aroface.recognizer import SGD, MarginConfig, ModelSpec, Recognizer, init_params

MARGINS = [
    MarginConfig(variant="softmax"),
    MarginConfig(variant="arcface", margin=0.3),
    MarginConfig(variant="cosface", margin=0.25),
]


def _mlp_spec() -> ModelSpec:
    return ModelSpec(kind="mlp", input_channels=2, height=5, width=4, hidden=6, embedding_dim=3, num_classes=4)


def _loss(params, x, y, margin) -> float:
    return recognizer.backward(params, x, y, margin).loss


def _fd_check(params, x, y, margin, rng, per_array: int = 6):
    result = recognizer.backward(params, x, y, margin)
    h = 1e-6
    for name, analytic in result.grads.items():
        flat = params.arrays()[name].reshape(-1)
        for idx in rng.choice(flat.size, size=min(per_array, flat.size), replace=False):
            plus, minus = params.copy(), params.copy()
            plus.arrays()[name].reshape(-1)[idx] += h
            minus.arrays()[name].reshape(-1)[idx] -= h
            fd = (_loss(plus, x, y, margin) - _loss(minus, x, y, margin)) / (2 * h)
            assert analytic.reshape(-1)[idx] == pytest.approx(fd, rel=1e-4, abs=1e-7), name
    flat_x = x.reshape(-1)
    for idx in rng.choice(flat_x.size, size=per_array, replace=False):
        plus, minus = x.copy(), x.copy()
        plus.reshape(-1)[idx] += h
        minus.reshape(-1)[idx] -= h
        fd = (_loss(params, plus, y, margin) - _loss(params, minus, y, margin)) / (2 * h)
        assert result.grad_input.reshape(-1)[idx] == pytest.approx(fd, rel=1e-4, abs=1e-7)


class TestInit:
    def test_same_seed_same_params(self, tiny_spec):
        a, b = init_params(tiny_spec, seed=3), init_params(tiny_spec, seed=3)
        for name in a.arrays():
            np.testing.assert_array_equal(a.arrays()[name], b.arrays()[name])

    def test_seed_changes_params(self, tiny_spec):
        a, b = init_params(tiny_spec, seed=3), init_params(tiny_spec, seed=4)
        assert not np.array_equal(a.arrays()["conv1.weight"], b.arrays()["conv1.weight"])

    def test_classifier_rows_are_unit(self, tiny_spec):
        w = init_params(tiny_spec, seed=0).classifier
        np.testing.assert_allclose(np.linalg.norm(w, axis=1), 1.0, rtol=1e-12)

    def test_conv_stage_count(self):
        with pytest.raises(pydantic.ValidationError):
            ModelSpec(conv_channels=[4])


class TestEmbedding:
    def test_unit_norm(self, tiny_model, rng):
        z = tiny_model.embed(rng.normal(size=(5, 1, 16, 16)))
        assert z.shape == (5, 4)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, rtol=1e-12)

    def test_single_image_returns_vector(self, tiny_model, rng):
        x = rng.normal(size=(1, 16, 16))
        np.testing.assert_array_equal(tiny_model.embed(x), tiny_model.embed(x[None])[0])

    def test_logits_are_cosines(self, tiny_model, rng):
        logits = tiny_model.logits(rng.normal(size=(6, 1, 16, 16)))
        assert logits.shape == (6, 3)
        assert np.all(np.abs(logits) <= 1.0 + 1e-12)

    def test_rejects_wrong_shape(self, tiny_model):
        with pytest.raises(ContractViolation):
            tiny_model.embed(np.zeros((1, 1, 8, 8)))

    def test_batch_rows_independent(self, tiny_model, rng):
        x = rng.normal(size=(3, 1, 16, 16))
        np.testing.assert_allclose(tiny_model.embed(x)[1], tiny_model.embed(x[1]), rtol=0, atol=1e-14)


class TestMarginLoss:
    def _params(self):
        return init_params(_mlp_spec(), seed=2)

    def test_softmax_is_plain_cross_entropy(self):
        params = self._params()
        z = params.classifier[1] * 0.6 + params.classifier[2] * 0.8
        z = z / np.linalg.norm(z)
        cfg = MarginConfig(variant="softmax", logit_scale=8.0)
        logits = 8.0 * (params.classifier @ z)
        expected = math.log(np.exp(logits).sum()) - logits[1]
        assert recognizer.margin_loss(z, 1, params, cfg) == pytest.approx(expected, rel=1e-12)

    def test_cosface_subtracts_margin_from_target(self):
        params = self._params()
        z = params.classifier[0]
        cfg = MarginConfig(variant="cosface", logit_scale=4.0, margin=0.35)
        logits = 4.0 * (params.classifier @ z)
        logits[0] -= 4.0 * 0.35
        expected = math.log(np.exp(logits).sum()) - logits[0]
        assert recognizer.margin_loss(z, 0, params, cfg) == pytest.approx(expected, rel=1e-12)

    def test_arcface_adds_angle_to_target(self):
        params = self._params()
        z = params.classifier[3] + 0.5 * params.classifier[0]
        z = z / np.linalg.norm(z)
        cfg = MarginConfig(variant="arcface", logit_scale=10.0, margin=0.4)
        cos = params.classifier @ z
        logits = 10.0 * cos
        logits[3] = 10.0 * math.cos(math.acos(cos[3]) + 0.4)
        expected = math.log(np.exp(logits).sum()) - logits[3]
        assert recognizer.margin_loss(z, 3, params, cfg) == pytest.approx(expected, rel=1e-10)

    def test_margins_raise_the_loss(self):
        params = self._params()
        z = params.classifier[2]
        plain = recognizer.margin_loss(z, 2, params, MarginConfig(variant="softmax"))
        for cfg in MARGINS[1:]:
            assert recognizer.margin_loss(z, 2, params, cfg) > plain

    def test_zero_angular_margin_is_softmax(self, rng):
        params = self._params()
        z = rng.normal(size=(4, 3))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        y = [0, 1, 2, 3]
        np.testing.assert_allclose(
            recognizer.margin_losses(z, y, params, MarginConfig(variant="arcface", margin=0.0)),
            recognizer.margin_losses(z, y, params, MarginConfig(variant="softmax")),
        )

    def test_right_angle_margin_rejected(self):
        with pytest.raises(pydantic.ValidationError):
            MarginConfig(variant="arcface", margin=math.pi / 2)

    def test_label_out_of_range(self):
        params = self._params()
        with pytest.raises(ContractViolation):
            recognizer.margin_loss(params.classifier[0], 4, params, MarginConfig())


class TestBackward:
    @pytest.mark.parametrize("margin", MARGINS, ids=lambda m: m.variant)
    def test_conv_gradients_match_finite_differences(self, margin, tiny_spec, rng):
        params = init_params(tiny_spec, seed=11)
        x = rng.normal(size=(2, 1, 16, 16))
        _fd_check(params, x, [0, 2], margin, rng)

    @pytest.mark.parametrize("margin", MARGINS, ids=lambda m: m.variant)
    def test_mlp_gradients_match_finite_differences(self, margin, rng):
        params = init_params(_mlp_spec(), seed=5)
        x = rng.normal(size=(3, 2, 5, 4))
        _fd_check(params, x, [1, 3, 0], margin, rng)

    def test_sum_reduction_scales_mean(self, tiny_model, rng):
        x = rng.normal(size=(4, 1, 16, 16))
        y = [0, 1, 2, 0]
        mean = recognizer.backward(tiny_model.params, x, y, tiny_model.margin)
        total = recognizer.backward(tiny_model.params, x, y, tiny_model.margin, reduction="sum")
        assert total.loss == pytest.approx(4 * mean.loss, rel=1e-12)
        np.testing.assert_allclose(total.grad_input, 4 * mean.grad_input, rtol=1e-10, atol=1e-14)

    def test_loss_and_input_grad_for_one_image(self, tiny_model, rng):
        x = rng.normal(size=(1, 16, 16))
        loss, grad = tiny_model.loss_and_input_grad(x, 1)
        assert loss == pytest.approx(tiny_model.loss(x, 1), rel=1e-12)
        assert grad.shape == x.shape

    def test_label_count_must_match(self, tiny_model, rng):
        with pytest.raises(ContractViolation):
            recognizer.backward(tiny_model.params, rng.normal(size=(2, 1, 16, 16)), [0], tiny_model.margin)


class TestSGD:
    def test_plain_step(self, tiny_spec, rng):
        params = init_params(tiny_spec, seed=1)
        grads = {name: rng.normal(size=w.shape) for name, w in params.arrays().items()}
        out = recognizer.sgd_update(params, grads, lr=0.05, momentum=0.0, weight_decay=0.0)
        np.testing.assert_allclose(out.extractor["conv1.weight"],
                                   params.extractor["conv1.weight"] - 0.05 * grads["conv1.weight"])
        np.testing.assert_allclose(np.linalg.norm(out.classifier, axis=1), 1.0, rtol=1e-12)

    def test_momentum_accumulates(self, tiny_spec):
        params = init_params(tiny_spec, seed=1)
        grads = {name: np.ones_like(w) for name, w in params.arrays().items()}
        opt = SGD(lr=0.1, momentum=0.9, weight_decay=0.0)
        once = opt.step(params, grads)
        twice = opt.step(once, grads)
        np.testing.assert_allclose(twice.extractor["embed.bias"], params.extractor["embed.bias"] - 0.1 * (1 + 1.9))

    def test_weight_decay_skips_classifier(self, tiny_spec):
        params = init_params(tiny_spec, seed=1)
        zero = {name: np.zeros_like(w) for name, w in params.arrays().items()}
        out = recognizer.sgd_update(params, zero, lr=0.1, momentum=0.0, weight_decay=0.5)
        np.testing.assert_allclose(out.extractor["embed.weight"], params.extractor["embed.weight"] * 0.95)
        np.testing.assert_allclose(out.classifier, params.classifier, rtol=1e-12)

    def test_gradient_shape_checked(self, tiny_spec):
        params = init_params(tiny_spec, seed=1)
        grads = {name: np.zeros_like(w) for name, w in params.arrays().items()}
        grads["embed.bias"] = np.zeros(7)
        with pytest.raises(ContractViolation):
            recognizer.sgd_update(params, grads)

    def test_training_steps_reduce_loss(self, tiny_spec, tiny_splits):
        train, _ = tiny_splits
        params = init_params(tiny_spec, seed=2)
        margin = MarginConfig(variant="softmax")
        opt = SGD(lr=0.05, momentum=0.9, weight_decay=0.0)
        first = recognizer.backward(params, train.images(), train.labels(), margin)
        for _ in range(30):
            result = recognizer.backward(params, train.images(), train.labels(), margin)
            params = opt.step(params, result.grads)
        assert recognizer.backward(params, train.images(), train.labels(), margin).loss < first.loss


class TestCheckpoint:
    def test_round_trip(self, tiny_model, tmp_path):
        path = recognizer.save_checkpoint(tiny_model.params, tmp_path / "ckpt" / "model.bin")
        assert path.with_suffix(".shapes.txt").exists()
        loaded = recognizer.load_checkpoint(path)
        assert loaded.spec == tiny_model.params.spec
        for name, w in tiny_model.params.arrays().items():
            np.testing.assert_array_equal(loaded.arrays()[name], w)

    def test_loaded_model_embeds_identically(self, tiny_model, tmp_path, rng):
        path = recognizer.save_checkpoint(tiny_model.params, tmp_path / "model.bin")
        x = rng.normal(size=(2, 1, 16, 16))
        reloaded = Recognizer(recognizer.load_checkpoint(path), tiny_model.margin)
        np.testing.assert_array_equal(reloaded.embed(x), tiny_model.embed(x))

    def test_missing_sidecar(self, tiny_model, tmp_path):
        path = recognizer.save_checkpoint(tiny_model.params, tmp_path / "model.bin")
        path.with_suffix(".shapes.txt").unlink()
        with pytest.raises(MissingFileError):
            recognizer.load_checkpoint(path)

    def test_bad_magic(self, tiny_model, tmp_path):
        path = recognizer.save_checkpoint(tiny_model.params, tmp_path / "model.bin")
        blob = path.read_bytes()
        path.write_bytes(b"NOTACKPT" + blob[8:])
        with pytest.raises(FileIntegrityError):
            recognizer.load_checkpoint(path)

    def test_truncated(self, tiny_model, tmp_path):
        path = recognizer.save_checkpoint(tiny_model.params, tmp_path / "model.bin")
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(FileIntegrityError) as info:
            recognizer.load_checkpoint(path)
        assert info.value.path == str(path)
