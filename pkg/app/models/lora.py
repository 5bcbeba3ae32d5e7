"""
Low-rank adapters and their stacking rules.

Row-vector convention throughout: a layer computes h = x @ W + b with W of
shape (d_in, d_out). An adapter branch holds a down projection (d_in, r) and
an up projection (r, d_out), so its delta x @ down @ up is the transpose of
the column-form B A x.
"""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.utils.tensor_core import Tensor, add, affine, matmul, mul


class AdapterStackError(ValueError):
    """Requested adapter combination is not a contiguous stack prefix"""


@dataclass
class LoraBranch:
    """One adapter's low-rank pair for one layer"""
    down: Tensor
    up: Tensor
    scale: float = 1.0


@dataclass
class LoraAdapter:
    """LoRA i: one branch per adapted layer"""
    index: int
    rank: int
    scale: float
    branches: Dict[int, LoraBranch]
    trainable: bool = True

    def parameters(self) -> List[Tensor]:
        params = []
        for layer in sorted(self.branches):
            params.append(self.branches[layer].down)
            params.append(self.branches[layer].up)
        return params


@dataclass
class LoraStack:
    """Ordered adapters LoRA 1 ... LoRA k"""
    adapters: List[LoraAdapter] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.adapters)

    def validate(self, active: Iterable[int]) -> Tuple[int, ...]:
        """
        Check that the active indices form a stack prefix {1..j}

        Args:
            active: 1-based adapter indices

        Returns:
            Sorted tuple of indices
        """
        indices = tuple(sorted(set(active)))
        if indices and indices != tuple(range(1, indices[-1] + 1)):
            raise AdapterStackError(f"Adapters {indices} are not a contiguous stack prefix")
        if indices and indices[-1] > len(self.adapters):
            raise AdapterStackError(f"Adapter {indices[-1]} does not exist in a stack of {len(self.adapters)}")
        return indices

    def select(self, active: Iterable[int]) -> List[LoraAdapter]:
        return [self.adapters[i - 1] for i in self.validate(active)]

    def set_trainable(self, indices: Iterable[int]) -> None:
        wanted = set(indices)
        for adapter in self.adapters:
            adapter.trainable = adapter.index in wanted
            for param in adapter.parameters():
                param.requires_grad = adapter.trainable

    def parameters(self) -> List[Tensor]:
        return [p for adapter in self.adapters for p in adapter.parameters()]

    def trainable_parameters(self) -> List[Tensor]:
        return [p for adapter in self.adapters if adapter.trainable for p in adapter.parameters()]

    def state(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for param in self.parameters():
            if param.name not in state:
                raise KeyError(f"Missing adapter tensor {param.name}")
            param.data = np.array(state[param.name], dtype=param.data.dtype)


def init_adapter(
    index: int,
    layer_dims: Dict[int, Tuple[int, int]],
    rank: int,
    scale: float,
    init_std: float,
    rng: np.random.Generator,
    prefix: str = "lora"
) -> LoraAdapter:
    """
    Create one adapter with Gaussian down projections and zero up projections

    Args:
        index: 1-based position in the stack
        layer_dims: Adapted layer index -> (d_in, d_out)
        rank: Low rank r
        scale: Scaling factor applied to the delta
        init_std: Std of the down projection init
        rng: Generator for the down projection
        prefix: Parameter name prefix

    Returns:
        LoraAdapter whose delta is exactly zero
    """
    branches = {}
    for layer in sorted(layer_dims):
        d_in, d_out = layer_dims[layer]
        if rank >= min(d_in, d_out):
            raise ValueError(f"LoRA rank {rank} must be below layer width {min(d_in, d_out)}")
        branches[layer] = LoraBranch(
            down=Tensor.parameter(init_std * rng.standard_normal((d_in, rank)), f"{prefix}.{index}.layer{layer}.down"),
            up=Tensor.parameter(np.zeros((rank, d_out)), f"{prefix}.{index}.layer{layer}.up"),
            scale=scale
        )
    return LoraAdapter(index=index, rank=rank, scale=scale, branches=branches)


def init_stack(
    count: int,
    layer_dims: Dict[int, Tuple[int, int]],
    rank: int,
    scale: float,
    init_std: float,
    rng_for: "callable",
    prefix: str = "lora"
) -> LoraStack:
    """Stack of `count` adapters; rng_for(i) supplies the generator of adapter i"""
    return LoraStack([init_adapter(i, layer_dims, rank, scale, init_std, rng_for(i), prefix) for i in range(1, count + 1)])


def lora_forward(weight: Tensor, branches: Sequence[LoraBranch], x: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    h = x W (+ b) + sum over active branches of scale * x down up

    Args:
        weight: Frozen base weight (d_in, d_out)
        branches: Active branches for this layer, in stack order
        x: Input rows (n, d_in)
        bias: Optional base bias

    Returns:
        Layer output
    """
    if bias is not None:
        h = affine(x, weight, bias)
    else:
        h = matmul(x, weight)
    for branch in branches:
        delta = matmul(matmul(x, branch.down), branch.up)
        if branch.scale != 1.0:
            delta = mul(delta, branch.scale)
        h = add(h, delta)
    return h


def merge_lora(weight: np.ndarray, branches: Sequence[LoraBranch]) -> np.ndarray:
    """Fold active branches into the base weight: W + sum scale * down up"""
    merged = np.array(weight, dtype=np.float64)
    for branch in branches:
        merged = merged + branch.scale * (branch.down.data @ branch.up.data)
    return merged
