"""
Finite-difference verification of the tape gradients used in training
"""
import logging
from typing import List

import numpy as np

from app.models.denoiser import init_denoiser, network_forward
from app.models.lora import init_stack
from app.models.segment_plan import build_segment_plan
from app.schemas import GradcheckRow, ModelConfig, Strategy
from app.services.align_service import build_chain, run_chain
from app.services.diffusion_service import build_schedule
from app.services.reward_service import init_critic, reward_critic
from app.utils.rng import stream
from app.utils.tensor_core import Tensor, check_parameters, mean, square

logger = logging.getLogger(__name__)

NETWORK_THRESHOLD = 1e-4
CHAIN_THRESHOLD = 1e-3
# smaller gradients sit below the resolution of central differences at epsilon 1e-5
GRADIENT_FLOOR = 1e-6


def _randomize(params, rng: np.random.Generator, std: float) -> None:
    for param in params:
        param.data = std * rng.standard_normal(param.shape)


def check_random_networks(seed: int, networks: int = 20, coords: int = 10) -> GradcheckRow:
    """Small random denoisers with non-zero adapters; objective mean(eps^2)"""
    worst = 0.0
    for n in range(networks):
        rng = stream(seed, "gradcheck", step=n)
        data_dim = int(rng.integers(2, 6))
        config = ModelConfig(hidden=int(rng.integers(6, 12)), depth=int(rng.integers(2, 4)),
                             time_dim=4, class_dim=3, lora_rank=2)
        params = init_denoiser(data_dim, 2, config, rng)
        stack = init_stack(2, params.lora_layer_dims(), config.lora_rank, 1.0, 0.1, lambda i: rng)
        _randomize([p for p in stack.parameters() if p.name.endswith(".up")], rng, 0.1)

        x = rng.standard_normal((3, data_dim)) + 0.5
        t = int(rng.integers(1, 1000))
        labels = rng.integers(0, 3, size=3)

        def objective():
            return mean(square(network_forward(params, Tensor(x), t, labels, stack.adapters)))

        error = check_parameters(objective, params.parameters() + stack.parameters(),
                                 coords=coords, rng=stream(seed, "gradcheck", step=n, lane=1), floor=GRADIENT_FLOOR)
        worst = max(worst, error)
    return GradcheckRow(check="random_networks", max_rel_error=worst, threshold=NETWORK_THRESHOLD,
                        passed=worst < NETWORK_THRESHOLD)


def check_shortft_objective(seed: int, coords: int = 10) -> GradcheckRow:
    """Stage-1 ShortFT reward objective on a 2-D toy w.r.t. the LoRA stack"""
    rng = stream(seed, "gradcheck", step=1000)
    config = ModelConfig(hidden=16, depth=3, time_dim=8, class_dim=4, lora_rank=2)
    schedule = build_schedule(1000, "linear", 50)
    plan = build_segment_plan(schedule.T, schedule.step_list, 4)
    denoiser = init_denoiser(2, 2, config, rng).freeze()
    student = init_denoiser(2, 2, config, rng, prefix="student").freeze()
    stack = init_stack(plan.k, denoiser.lora_layer_dims(), config.lora_rank, 1.0, 0.1, lambda i: rng)
    _randomize([p for p in stack.parameters() if p.name.endswith(".up")], rng, 0.1)
    critic = init_critic(2, 2, 8, rng).freeze()

    # whole prefix taped so the analytic gradient is the exact one
    chain = build_chain(plan, Strategy.SHORTFT, stage=1, K=len(schedule.step_list))
    x_T = rng.standard_normal((4, 2))
    labels = np.array([0, 1, 0, 1])

    def objective():
        x0 = run_chain(chain, denoiser, stack, student, schedule, plan, Tensor(x_T), labels, 2.0)
        return reward_critic(critic, x0, labels)

    error = check_parameters(objective, stack.parameters(), coords=coords,
                             rng=stream(seed, "gradcheck", step=1000, lane=1), floor=GRADIENT_FLOOR)
    return GradcheckRow(check="shortft_stage1_objective", max_rel_error=error, threshold=CHAIN_THRESHOLD,
                        passed=error < CHAIN_THRESHOLD)


def run_gradcheck(seed: int, networks: int = 20, coords: int = 10) -> List[GradcheckRow]:
    rows = [check_random_networks(seed, networks, coords), check_shortft_objective(seed, coords)]
    for row in rows:
        log = logger.info if row.passed else logger.error
        log("gradcheck %s: max relative error %.2e (threshold %.0e)", row.check, row.max_rel_error, row.threshold)
    return rows
