"""
Class-conditional MLP noise predictor with classifier-free guidance.

Input is [x, sinusoidal timestep embedding, class embedding]; the class table
has one extra row used as the null (unconditional) condition. Hidden to
hidden layers are the ones LoRA adapters attach to.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.models.lora import LoraAdapter, LoraStack, lora_forward
from app.schemas import ModelConfig
from app.utils.tensor_core import Tensor, add, affine, concat, mul, silu, sub, take_rows

logger = logging.getLogger(__name__)

Condition = Optional[np.ndarray]


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor


@dataclass
class DenoiserParams:
    """Weights of one MLP denoiser (also used for the shortcut student)"""
    layers: List[Linear]
    class_table: Tensor
    data_dim: int
    num_classes: int
    time_dim: int
    class_dim: int
    hidden: int

    @property
    def null_class(self) -> int:
        return self.num_classes

    @property
    def adapted_layers(self) -> Tuple[int, ...]:
        """Indices of the hidden -> hidden layers"""
        return tuple(range(1, len(self.layers) - 1))

    def lora_layer_dims(self) -> Dict[int, Tuple[int, int]]:
        return {i: tuple(self.layers[i].weight.shape) for i in self.adapted_layers}

    def parameters(self) -> List[Tensor]:
        params = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
        params.append(self.class_table)
        return params

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def freeze(self) -> "DenoiserParams":
        for param in self.parameters():
            param.requires_grad = False
        return self

    def state(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for param in self.parameters():
            if param.name not in state:
                raise KeyError(f"Missing denoiser tensor {param.name}")
            if tuple(state[param.name].shape) != param.shape:
                raise ValueError(f"Shape mismatch for {param.name}: {state[param.name].shape} vs {param.shape}")
            param.data = np.array(state[param.name], dtype=param.data.dtype)


def init_denoiser(
    data_dim: int,
    num_classes: int,
    config: ModelConfig,
    rng: np.random.Generator,
    prefix: str = "denoiser"
) -> DenoiserParams:
    """
    Randomly initialize an MLP denoiser

    Weights are N(0, 1/fan_in), biases zero, class table N(0, 1).

    Args:
        data_dim: Dimension d of x
        num_classes: Number of real classes (the table gets one extra null row)
        config: Architecture hyperparameters
        rng: Generator for the weights
        prefix: Parameter name prefix

    Returns:
        DenoiserParams
    """
    widths = [data_dim + config.time_dim + config.class_dim] + [config.hidden] * config.depth + [data_dim]
    layers = []
    for i, (d_in, d_out) in enumerate(zip(widths, widths[1:])):
        layers.append(Linear(
            weight=Tensor.parameter(rng.standard_normal((d_in, d_out)) / np.sqrt(d_in), f"{prefix}.layer{i}.weight"),
            bias=Tensor.parameter(np.zeros(d_out), f"{prefix}.layer{i}.bias")
        ))
    class_table = Tensor.parameter(rng.standard_normal((num_classes + 1, config.class_dim)), f"{prefix}.class_table")
    return DenoiserParams(
        layers=layers,
        class_table=class_table,
        data_dim=data_dim,
        num_classes=num_classes,
        time_dim=config.time_dim,
        class_dim=config.class_dim,
        hidden=config.hidden
    )


def timestep_embedding(t: Union[int, np.ndarray], dim: int, batch: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (batch, dim)"""
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((batch, 1))], axis=1)
    return emb


def network_forward(
    params: DenoiserParams,
    x: Tensor,
    t: Union[int, np.ndarray],
    class_ids: np.ndarray,
    adapters: Sequence[LoraAdapter] = ()
) -> Tensor:
    """
    Raw noise prediction for given class ids (null id = params.null_class)

    Args:
        params: Network weights
        x: Noisy input (batch, d)
        t: Timestep, scalar or per row
        class_ids: Integer class per row
        adapters: Active LoRA adapters, in stack order

    Returns:
        Predicted noise (batch, d)
    """
    batch = x.shape[0]
    temb = timestep_embedding(t, params.time_dim, batch)
    cemb = take_rows(params.class_table, class_ids)
    h = concat([x, temb, cemb], axis=1)
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        branches = [a.branches[i] for a in adapters if i in a.branches]
        if branches:
            h = lora_forward(layer.weight, branches, h, bias=layer.bias)
        else:
            h = affine(h, layer.weight, layer.bias)
        if i < last:
            h = silu(h)
    return h


def _class_ids(condition: Condition, batch: int, null: int) -> np.ndarray:
    if condition is None:
        return np.full(batch, null, dtype=np.int64)
    ids = np.asarray(condition, dtype=np.int64)
    if ids.ndim == 0:
        ids = np.full(batch, int(ids), dtype=np.int64)
    if ids.shape != (batch,):
        raise ValueError(f"Condition has shape {ids.shape}, expected ({batch},)")
    if np.any(ids < 0) or np.any(ids > null):
        raise ValueError(f"Class ids must lie in [0, {null}]")
    return ids


def denoise_eps(
    params: DenoiserParams,
    x_t: Tensor,
    t: int,
    condition: Condition,
    guidance_scale: float,
    stack: Optional[LoraStack] = None,
    active: Iterable[int] = ()
) -> Tensor:
    """
    Guided noise prediction eps_u + w (eps_c - eps_u)

    A None condition returns the unconditional branch. With w = 0 the result
    is the unconditional branch exactly.

    Args:
        params: Base network (frozen during fine-tuning)
        x_t: Noisy input (batch, d)
        t: Timestep
        condition: Class ids or None
        guidance_scale: CFG scale w
        stack: LoRA stack
        active: 1-based adapter indices; must be a contiguous prefix

    Returns:
        Guided noise prediction
    """
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    adapters: List[LoraAdapter] = []
    active = tuple(active)
    if active:
        if stack is None:
            raise ValueError("Adapters requested without a LoRA stack")
        adapters = stack.select(active)

    batch = x_t.shape[0]
    eps_u = network_forward(params, x_t, t, _class_ids(None, batch, params.null_class), adapters)
    if condition is None or guidance_scale == 0.0:
        return eps_u
    eps_c = network_forward(params, x_t, t, _class_ids(condition, batch, params.null_class), adapters)
    return add(eps_u, mul(sub(eps_c, eps_u), guidance_scale))
