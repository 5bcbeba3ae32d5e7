"""
Differentiable rewards on generated samples and the frozen critic they may use
"""
import logging
import math
import re
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from app.models.denoiser import Condition, Linear
from app.schemas import CriticConfig, RewardKind, RewardSpec
from app.utils.datasets import LabeledDataset, split
from app.utils.optim import AdamW
from app.utils.rng import stream
from app.utils.tensor_core import (
    Tape,
    Tensor,
    add,
    affine,
    backward,
    hflip,
    log_softmax,
    mean,
    mul,
    reshape,
    silu,
    sqrt,
    square,
    sub,
    sum_,
    slice_,
)

logger = logging.getLogger(__name__)

TV_EPSILON = 1e-6
REFERENCE_COMBINED_WEIGHTS = {"critic": 10.0, "symmetry": 2.0, "tv": 0.05}

RewardFn = Callable[[Tensor, Condition], Tensor]


class RewardError(ValueError):
    """Reward cannot be evaluated for this input"""


class CriticTrainingError(ValueError):
    """Critic did not reach the required held-out accuracy"""


# ---------------------------------------------------------------------------
# Critic
# ---------------------------------------------------------------------------

@dataclass
class CriticParams:
    layers: List[Linear]
    data_dim: int
    num_classes: int
    accuracy: float = float("nan")

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def freeze(self) -> "CriticParams":
        for param in self.parameters():
            param.requires_grad = False
        return self

    def state(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for param in self.parameters():
            param.data = np.array(state[param.name], dtype=param.data.dtype)


def init_critic(data_dim: int, num_classes: int, hidden: int, rng: Optional[np.random.Generator] = None) -> CriticParams:
    """MLP classifier; rng None gives all-zero weights (uniform logits)"""
    widths = [data_dim, hidden, hidden, num_classes]
    layers = []
    for i, (d_in, d_out) in enumerate(zip(widths, widths[1:])):
        weight = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in) if rng is not None else np.zeros((d_in, d_out))
        layers.append(Linear(
            weight=Tensor.parameter(weight, f"critic.layer{i}.weight"),
            bias=Tensor.parameter(np.zeros(d_out), f"critic.layer{i}.bias")
        ))
    return CriticParams(layers=layers, data_dim=data_dim, num_classes=num_classes)


def critic_log_probs(critic: CriticParams, x: Tensor) -> Tensor:
    h = x
    for i, layer in enumerate(critic.layers):
        h = affine(h, layer.weight, layer.bias)
        if i < len(critic.layers) - 1:
            h = silu(h)
    return log_softmax(h, axis=1)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]


def critic_accuracy(critic: CriticParams, dataset: LabeledDataset) -> float:
    logits = critic_log_probs(critic, Tensor(dataset.x)).data
    return float(np.mean(np.argmax(logits, axis=1) == dataset.y))


def train_critic(dataset: LabeledDataset, config: CriticConfig, seed: int, progress: bool = False) -> CriticParams:
    """
    Fit the classifier used by the critic reward, then freeze it

    Args:
        dataset: Labeled training data
        config: Critic hyperparameters
        seed: Experiment seed
        progress: Show a tqdm progress bar

    Returns:
        Frozen CriticParams with held-out accuracy
    """
    train, heldout = split(dataset, config.holdout_fraction)
    critic = init_critic(dataset.data_dim, dataset.num_classes, config.hidden, stream(seed, "init", lane=1))
    optimizer = AdamW(critic.parameters(), lr=config.lr)

    for step in tqdm(range(config.steps), desc="critic", disable=not progress):
        rng = stream(seed, "critic", step)
        idx = rng.integers(0, len(train), size=config.batch_size)
        with Tape() as tape:
            logp = critic_log_probs(critic, Tensor(train.x[idx]))
            loss = mul(mean(sum_(mul(logp, _one_hot(train.y[idx], dataset.num_classes)), axis=1)), -1.0)
        optimizer.step(backward(tape, loss, critic.parameters()))

    critic.accuracy = critic_accuracy(critic, heldout)
    logger.info("critic held-out accuracy %.3f", critic.accuracy)
    if critic.accuracy < config.min_accuracy:
        raise CriticTrainingError(
            f"Critic accuracy {critic.accuracy:.3f} below required {config.min_accuracy}"
        )
    return critic.freeze()


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------

def _as_images(x: Tensor, image_shape: Optional[Tuple[int, int]]) -> Tensor:
    batch, dim = x.shape
    if image_shape is None:
        side = math.isqrt(dim)
        if side * side != dim:
            raise RewardError(f"Sample of dimension {dim} cannot be reshaped into a square image")
        image_shape = (side, side)
    if image_shape[0] * image_shape[1] != dim:
        raise RewardError(f"Sample of dimension {dim} does not match image shape {image_shape}")
    return reshape(x, (batch,) + tuple(image_shape))


def symmetry_penalty(x: Tensor, image_shape: Optional[Tuple[int, int]] = None) -> Tensor:
    """Mean squared difference between each image and its horizontal mirror"""
    images = _as_images(x, image_shape)
    return mean(square(sub(images, hflip(images))))


def reward_symmetry(x: Tensor, condition: Condition = None, image_shape: Optional[Tuple[int, int]] = None) -> Tensor:
    return mul(symmetry_penalty(x, image_shape), -1.0)


def reward_tv(x: Tensor, condition: Condition = None, image_shape: Optional[Tuple[int, int]] = None) -> Tensor:
    """
    Negative smoothed total variation

    Each neighbor difference d contributes sqrt(d^2 + eps^2) - eps, so a
    constant image scores exactly 0.
    """
    images = _as_images(x, image_shape)
    height, width = images.shape[1], images.shape[2]
    dh = sub(slice_(images, (slice(None), slice(1, None), slice(None))),
             slice_(images, (slice(None), slice(0, height - 1), slice(None))))
    dw = sub(slice_(images, (slice(None), slice(None), slice(1, None))),
             slice_(images, (slice(None), slice(None), slice(0, width - 1))))
    eps2 = TV_EPSILON * TV_EPSILON
    tv_h = mean(sub(sqrt(add(square(dh), eps2)), TV_EPSILON))
    tv_w = mean(sub(sqrt(add(square(dw), eps2)), TV_EPSILON))
    return mul(add(tv_h, tv_w), -1.0)


def reward_critic(critic: CriticParams, x: Tensor, condition: Condition) -> Tensor:
    """Mean log-probability the critic assigns to the requested class"""
    if condition is None:
        raise RewardError("critic reward needs a class condition")
    labels = np.asarray(condition, dtype=np.int64)
    if labels.ndim == 0:
        labels = np.full(x.shape[0], int(labels), dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= critic.num_classes):
        raise RewardError(f"critic reward got a class outside [0, {critic.num_classes})")
    logp = critic_log_probs(critic, x)
    return mean(sum_(mul(logp, _one_hot(labels, critic.num_classes)), axis=1))


def reward_combined(weights: Dict[str, float], components: Dict[str, Tensor]) -> Tensor:
    """Weighted sum of already evaluated component rewards"""
    if not weights:
        raise RewardError("combined reward needs at least one component")
    total = None
    for name in sorted(weights):
        weight = weights[name]
        if not np.isfinite(weight):
            raise RewardError(f"Weight for {name} is not finite")
        if name not in components:
            raise RewardError(f"Missing reward component: {name}")
        term = mul(components[name], weight)
        total = term if total is None else add(total, term)
    return total


_PRESET_PATTERN = re.compile(r"^combined:(.+)$")


def parse_reward_preset(preset: str) -> RewardSpec:
    """
    Parse 'symmetry', 'critic', 'tv', 'combined:reference' or
    'combined:critic=10,symmetry=1' into a RewardSpec
    """
    preset = preset.strip()
    match = _PRESET_PATTERN.match(preset)
    if match is None:
        try:
            kind = RewardKind(preset)
        except ValueError:
            raise RewardError(f"Unknown reward preset: {preset}") from None
        if kind == RewardKind.COMBINED:
            return RewardSpec(kind=kind, weights=dict(REFERENCE_COMBINED_WEIGHTS))
        return RewardSpec(kind=kind)

    body = match.group(1)
    if body == "reference":
        return RewardSpec(kind=RewardKind.COMBINED, weights=dict(REFERENCE_COMBINED_WEIGHTS))
    weights = {}
    for part in body.split(","):
        name, sep, value = part.partition("=")
        if not sep:
            raise RewardError(f"Malformed combined component: {part!r}")
        try:
            weights[name.strip()] = float(value)
        except ValueError:
            raise RewardError(f"Weight for {name.strip()} is not a number") from None
    try:
        return RewardSpec(kind=RewardKind.COMBINED, weights=weights)
    except ValueError as e:
        raise RewardError(str(e)) from None


def build_reward(
    spec: RewardSpec,
    image_shape: Optional[Tuple[int, int]] = None,
    critic: Optional[CriticParams] = None
) -> RewardFn:
    """
    Bind a RewardSpec to a callable J(x0, condition) -> scalar Tensor

    Args:
        spec: Reward kind and weights
        image_shape: (H, W) for image rewards; square inferred when None
        critic: Trained critic, required by critic-based rewards

    Returns:
        Reward function (maximized by fine-tuning)
    """
    names = sorted(spec.weights) if spec.kind == RewardKind.COMBINED else [spec.kind.value]
    if "critic" in names and critic is None:
        raise RewardError("critic reward requested without a trained critic")

    def component(name: str, x: Tensor, condition: Condition) -> Tensor:
        if name == RewardKind.SYMMETRY.value:
            return reward_symmetry(x, condition, image_shape)
        if name == RewardKind.TV.value:
            return reward_tv(x, condition, image_shape)
        if name == RewardKind.CRITIC.value:
            return reward_critic(critic, x, condition)
        raise RewardError(f"Unknown reward component: {name}")

    def reward(x: Tensor, condition: Condition) -> Tensor:
        if spec.kind != RewardKind.COMBINED:
            value = component(spec.kind.value, x, condition)
        else:
            value = reward_combined(spec.weights, {name: component(name, x, condition) for name in names})
        return value if spec.maximize else mul(value, -1.0)

    return reward
