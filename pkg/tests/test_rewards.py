import dataclasses

import numpy as np
import pytest

from app.schemas import CriticConfig, RewardKind
from app.services.reward_service import (
    REFERENCE_COMBINED_WEIGHTS,
    CriticTrainingError,
    RewardError,
    build_reward,
    init_critic,
    parse_reward_preset,
    reward_combined,
    reward_critic,
    reward_symmetry,
    reward_tv,
    symmetry_penalty,
    train_critic,
)
from app.utils.datasets import generate_dataset
from app.utils.tensor_core import Tape, Tensor, backward, finite_diff_check


@pytest.fixture
def images(rng):
    return rng.standard_normal((3, 16))


def _mirror(x, side=4):
    return x.reshape(-1, side, side)[:, :, ::-1].reshape(x.shape)


class TestSymmetry:
    def test_symmetric_image_has_zero_penalty(self, images):
        symmetric = (images + _mirror(images)) / 2
        assert symmetry_penalty(Tensor(symmetric)).item() == 0.0

    def test_flip_invariance(self, images):
        assert np.isclose(reward_symmetry(Tensor(images)).item(), reward_symmetry(Tensor(_mirror(images))).item())

    def test_symmetrizing_removes_antisymmetric_energy(self, images):
        antisymmetric = (images - _mirror(images)) / 2
        before = symmetry_penalty(Tensor(images)).item()
        after = symmetry_penalty(Tensor((images + _mirror(images)) / 2)).item()
        assert np.isclose(before - after, 4 * np.mean(antisymmetric ** 2), atol=1e-12)

    def test_non_square_rejected(self, rng):
        with pytest.raises(RewardError):
            reward_symmetry(Tensor(rng.standard_normal((2, 15))))

    def test_explicit_shape(self, rng):
        x = rng.standard_normal((2, 12))
        assert np.isfinite(reward_symmetry(Tensor(x), image_shape=(3, 4)).item())
        with pytest.raises(RewardError):
            reward_symmetry(Tensor(x), image_shape=(4, 4))


class TestTotalVariation:
    def test_constant_image_is_maximal(self):
        assert reward_tv(Tensor(np.full((2, 16), 0.7))).item() == 0.0

    def test_checkerboard_is_worse(self):
        board = np.indices((4, 4)).sum(axis=0) % 2
        assert reward_tv(Tensor(board.reshape(1, 16).astype(float))).item() < 0.0

    def test_flip_and_transpose_invariance(self, images):
        value = reward_tv(Tensor(images)).item()
        square = images.reshape(-1, 4, 4)
        for variant in (square[:, ::-1, :], square[:, :, ::-1], square.transpose(0, 2, 1)):
            assert np.isclose(reward_tv(Tensor(variant.reshape(-1, 16))).item(), value, atol=1e-12)

    def test_smoothing_sensitivity(self, images, monkeypatch):
        from app.services import reward_service

        value = reward_tv(Tensor(images)).item()
        monkeypatch.setattr(reward_service, "TV_EPSILON", reward_service.TV_EPSILON / 2)
        assert abs(reward_tv(Tensor(images)).item() - value) < 1e-3


class TestCritic:
    def test_zero_critic_is_uniform(self, rng):
        critic = init_critic(2, 2, 8)
        value = reward_critic(critic, Tensor(rng.standard_normal((5, 2))), np.zeros(5, dtype=np.int64))
        assert value.item() == pytest.approx(np.log(0.5), abs=1e-15)

    def test_null_condition_rejected(self, rng):
        with pytest.raises(RewardError):
            reward_critic(init_critic(2, 2, 8), Tensor(rng.standard_normal((2, 2))), None)

    def test_class_out_of_range_rejected(self, rng):
        with pytest.raises(RewardError):
            reward_critic(init_critic(2, 2, 8), Tensor(rng.standard_normal((2, 2))), np.array([0, 2]))

    def test_gradient_matches_finite_differences(self, rng):
        critic = init_critic(2, 2, 8, rng).freeze()
        labels = np.array([0, 1, 1])
        error = finite_diff_check(lambda x: reward_critic(critic, x, labels), rng.standard_normal((3, 2)))
        assert error < 1e-4

    def test_trained_critic_separates_blobs(self):
        data = generate_dataset("points2d", 2000, seed=0)
        critic = train_critic(data, CriticConfig(), seed=0)
        assert critic.accuracy >= 0.99
        class0 = data.x[data.y == 0][:10]
        assert reward_critic(critic, Tensor(class0), 0).item() > np.log(0.5)

    def test_shuffled_labels_fail(self):
        data = generate_dataset("points2d", 2000, seed=0)
        shuffled = dataclasses.replace(data, y=np.random.default_rng(0).permutation(data.y))
        with pytest.raises(CriticTrainingError):
            train_critic(shuffled, CriticConfig(steps=300), seed=0)

    def test_critic_training_is_deterministic(self):
        data = generate_dataset("points2d", 500, seed=1)
        a = train_critic(data, CriticConfig(steps=200), seed=5)
        b = train_critic(data, CriticConfig(steps=200), seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.data, pb.data)


class TestCombined:
    def test_single_component_identity(self, images):
        sym = reward_symmetry(Tensor(images))
        tv = reward_tv(Tensor(images))
        value = reward_combined({"symmetry": 1.0, "tv": 0.0}, {"symmetry": sym, "tv": tv})
        assert value.item() == pytest.approx(sym.item(), abs=1e-15)

    def test_zero_weights_give_zero_gradient(self, images):
        x = Tensor.parameter(images, "x")
        with Tape() as tape:
            value = reward_combined({"symmetry": 0.0, "tv": 0.0},
                                    {"symmetry": reward_symmetry(x), "tv": reward_tv(x)})
        assert value.item() == 0.0
        assert not backward(tape, value, [x])["x"].any()

    def test_gradient_is_weighted_sum(self, images):
        def grad_of(build):
            x = Tensor.parameter(images, "x")
            with Tape() as tape:
                out = build(x)
            return backward(tape, out, [x])["x"]

        combined = grad_of(lambda x: reward_combined({"symmetry": 2.0, "tv": 0.5},
                                                     {"symmetry": reward_symmetry(x), "tv": reward_tv(x)}))
        separate = 2.0 * grad_of(reward_symmetry) + 0.5 * grad_of(reward_tv)
        assert np.allclose(combined, separate, atol=1e-10)

    def test_missing_component(self, images):
        with pytest.raises(RewardError):
            reward_combined({"symmetry": 1.0, "tv": 1.0}, {"symmetry": reward_symmetry(Tensor(images))})

    def test_one_weighted_component(self, images):
        sym = reward_symmetry(Tensor(images))
        value = reward_combined({"symmetry": 3.0}, {"symmetry": sym})
        assert value.item() == pytest.approx(3.0 * sym.item(), abs=1e-15)

    def test_needs_a_component(self, images):
        with pytest.raises(RewardError):
            reward_combined({}, {"symmetry": reward_symmetry(Tensor(images))})


class TestPresets:
    @pytest.mark.parametrize("preset, kind", [("symmetry", RewardKind.SYMMETRY), ("critic", RewardKind.CRITIC),
                                              ("tv", RewardKind.TV)])
    def test_single_presets(self, preset, kind):
        assert parse_reward_preset(preset).kind == kind

    def test_reference_preset(self):
        spec = parse_reward_preset("combined:reference")
        assert spec.weights == REFERENCE_COMBINED_WEIGHTS
        assert parse_reward_preset("combined").weights == REFERENCE_COMBINED_WEIGHTS

    def test_custom_weights(self):
        spec = parse_reward_preset("combined:critic=10, symmetry=1")
        assert spec.weights == {"critic": 10.0, "symmetry": 1.0}

    def test_single_weight_preset(self):
        assert parse_reward_preset("combined:symmetry=1").weights == {"symmetry": 1.0}

    @pytest.mark.parametrize("preset", ["aesthetic", "combined:", "combined:symmetry", "combined:tv=x,symmetry=1",
                                        "combined:tv=1,jpeg=2", "combined:tv=nan,symmetry=1"])
    def test_bad_presets(self, preset):
        with pytest.raises(RewardError):
            parse_reward_preset(preset)

    def test_critic_preset_needs_critic(self):
        with pytest.raises(RewardError):
            build_reward(parse_reward_preset("critic"))

    def test_built_reward_is_pure(self, images):
        reward = build_reward(parse_reward_preset("combined:symmetry=1,tv=10"))
        assert reward(Tensor(images), None).item() == reward(Tensor(images), None).item()

    def test_minimized_reward_is_negated(self, images):
        spec = parse_reward_preset("symmetry").model_copy(update={"maximize": False})
        value = build_reward(spec)(Tensor(images), None).item()
        assert value == pytest.approx(-reward_symmetry(Tensor(images)).item())