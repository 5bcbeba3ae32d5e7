"""
Reward fine-tuning of the LoRA stack through denoising chains.

build_chain() describes the pass each strategy backpropagates through:

    vanilla   every DDIM step carries gradient
    draft_k   only the last K steps carry gradient
    stopgrad  every step carries gradient, but the network never sees a
              differentiable x_t, so dx_{t-1}/dx_t reduces to a_t
    shortft   teacher steps down to LoRA i's timestep, then shortcut jumps
              interleaved with single LoRA-timestep teacher steps
"""
import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from app.models.denoiser import Condition, DenoiserParams, denoise_eps
from app.models.lora import LoraStack
from app.models.segment_plan import SegmentPlan, active_adapters
from app.schemas import (
    ActivationMode,
    ChainSpec,
    InferenceActivation,
    RunMetricsRow,
    ShortcutJump,
    Strategy,
    StrategyConfig,
    TeacherStep,
)
from app.services.diffusion_service import NoiseSchedule, ddim_coefficients, ddim_step
from app.services.reward_service import RewardFn
from app.services.shortcut_service import shortcut_jump
from app.utils.optim import AdamW
from app.utils.rng import stream
from app.utils.tensor_core import (
    GradMap,
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    grad_norm,
    no_grad,
    stop_gradient,
)

logger = logging.getLogger(__name__)


class ChainError(ValueError):
    """Strategy, stage and plan do not describe a valid chain"""


class TrainingDivergedError(ValueError):
    """Every step of a fine-tuning run was skipped"""


@dataclass(frozen=True)
class StageState:
    stage: int
    trainable: Tuple[int, ...]
    frozen: Tuple[int, ...]
    steps: int


def progressive_schedule(k: int, steps_per_stage: int, weights: Optional[List[float]] = None) -> List[StageState]:
    """
    Stage i trains LoRA {i..k}; LoRA {1..i-1} stay frozen

    Args:
        k: Number of adapters / stages
        steps_per_stage: Steps per stage when unweighted
        weights: Optional relative stage lengths; total steps stay k * steps_per_stage

    Returns:
        One StageState per stage, in order
    """
    if k < 1:
        raise ChainError("k must be at least 1")
    steps = [steps_per_stage] * k
    if weights is not None:
        if len(weights) != k or any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ChainError(f"stage_weights must be {k} non-negative numbers with a positive sum")
        total = steps_per_stage * k
        steps = [int(round(total * w / sum(weights))) for w in weights]
    return [
        StageState(stage=i, trainable=tuple(range(i, k + 1)), frozen=tuple(range(1, i)), steps=steps[i - 1])
        for i in range(1, k + 1)
    ]


def _inference_adapters(plan: SegmentPlan, t: int, inference_activation: InferenceActivation) -> Tuple[int, ...]:
    return active_adapters(plan, t, ActivationMode.INFERENCE, inference_activation)


def _suffix_flags(count: int, enabled: int) -> List[bool]:
    enabled = max(0, min(count, enabled))
    return [False] * (count - enabled) + [True] * enabled


def inference_chain(
    plan: SegmentPlan,
    inference_activation: InferenceActivation = InferenceActivation.SEGMENT
) -> ChainSpec:
    """Teacher-only chain used for sampling and evaluation (no gradient)"""
    chain = plan.step_list + (0,)
    nodes = tuple(
        TeacherStep(t_from=t, t_to=t_next, adapters=_inference_adapters(plan, t, inference_activation), grad_enabled=False)
        for t, t_next in zip(chain, chain[1:])
    )
    return ChainSpec(strategy=Strategy.VANILLA, stage=None, nodes=nodes)


def _baseline_chain(plan: SegmentPlan, strategy: Strategy, K: int,
                    inference_activation: InferenceActivation) -> ChainSpec:
    chain = plan.step_list + (0,)
    pairs = list(zip(chain, chain[1:]))
    enabled = len(pairs) if strategy != Strategy.DRAFT_K else K
    flags = _suffix_flags(len(pairs), enabled)
    nodes = tuple(
        TeacherStep(
            t_from=t,
            t_to=t_next,
            adapters=_inference_adapters(plan, t, inference_activation),
            grad_enabled=flag,
            stop_eps_input=strategy == Strategy.STOPGRAD
        )
        for (t, t_next), flag in zip(pairs, flags)
    )
    return ChainSpec(strategy=strategy, stage=None, nodes=nodes)


def _shortft_chain(plan: SegmentPlan, stage: int, K: int, inference_activation: InferenceActivation) -> ChainSpec:
    lora_i = plan.lora_timestep(stage)
    chain = plan.step_list + (0,)
    end = chain.index(plan.successor(lora_i))
    prefix = [
        TeacherStep(t_from=t, t_to=t_next, adapters=_inference_adapters(plan, t, inference_activation))
        for t, t_next in zip(chain[:end], chain[1:end + 1])
    ]
    flags = _suffix_flags(len(prefix), K)
    nodes: list = [node.model_copy(update={"grad_enabled": flag}) for node, flag in zip(prefix, flags)]

    for j in range(stage, plan.k):
        start = plan.successor(plan.lora_timestep(j))
        lora_next = plan.lora_timestep(j + 1)
        if start > lora_next:
            nodes.append(ShortcutJump(t_from=start, t_to=lora_next))
        nodes.append(TeacherStep(
            t_from=lora_next,
            t_to=plan.successor(lora_next),
            adapters=active_adapters(plan, lora_next, ActivationMode.TRAIN_CHAIN)
        ))
    return ChainSpec(strategy=Strategy.SHORTFT, stage=stage, nodes=tuple(nodes))


def build_chain(
    plan: SegmentPlan,
    strategy: Strategy,
    stage: Optional[int] = None,
    K: int = 1,
    inference_activation: InferenceActivation = InferenceActivation.SEGMENT
) -> ChainSpec:
    """
    Describe the denoising pass a strategy trains through

    Args:
        plan: Segment plan
        strategy: Fine-tuning strategy
        stage: ShortFT stage in [1, k]; must be None for the baselines
        K: Truncation depth for draft_k and the ShortFT prefix
        inference_activation: Adapter rule for non-LoRA teacher steps

    Returns:
        ChainSpec
    """
    strategy = Strategy(strategy)
    if K < 1:
        raise ChainError("K must be at least 1")
    if strategy != Strategy.SHORTFT:
        if stage is not None:
            raise ChainError(f"{strategy.value} has no stages")
        return _baseline_chain(plan, strategy, K, inference_activation)
    if stage is None or not 1 <= stage <= plan.k:
        raise ChainError(f"stage must lie in [1, {plan.k}], got {stage}")
    return _shortft_chain(plan, stage, K, inference_activation)


def run_chain(
    chain: ChainSpec,
    denoiser: DenoiserParams,
    stack: LoraStack,
    student: Optional[DenoiserParams],
    schedule: NoiseSchedule,
    plan: SegmentPlan,
    x_T: Tensor,
    condition: Condition,
    guidance_scale: float
) -> Tensor:
    """
    Execute a chain; nodes without gradient run untaped

    Returns:
        x_0
    """
    x = x_T if isinstance(x_T, Tensor) else Tensor(x_T)
    for node in chain.nodes:
        with nullcontext() if node.grad_enabled else no_grad():
            if isinstance(node, ShortcutJump):
                if student is None:
                    raise ChainError("chain contains shortcut jumps but no student was given")
                x = shortcut_jump(student, x, node.t_from, node.t_to, condition, plan, schedule)
            else:
                x_in = stop_gradient(x) if node.stop_eps_input else x
                eps = denoise_eps(denoiser, x_in, node.t_from, condition, guidance_scale,
                                  stack=stack, active=node.adapters)
                x = ddim_step(x, eps, ddim_coefficients(schedule, node.t_from, node.t_to, 0.0))
    return x


@dataclass
class ObjectiveResult:
    J: float
    grads: GradMap
    taped_nodes: int
    saved_bytes: int


def reward_objective(
    chain: ChainSpec,
    denoiser: DenoiserParams,
    stack: LoraStack,
    student: Optional[DenoiserParams],
    schedule: NoiseSchedule,
    plan: SegmentPlan,
    reward_fn: RewardFn,
    x_T: np.ndarray,
    condition: Condition,
    guidance_scale: float
) -> ObjectiveResult:
    """
    J = reward(chain(x_T)) and its gradient w.r.t. the trainable adapters

    Frozen adapters, the base model and the student receive nothing.
    """
    with Tape() as tape:
        x0 = run_chain(chain, denoiser, stack, student, schedule, plan, Tensor(x_T), condition, guidance_scale)
        J = reward_fn(x0, condition)
    params = stack.trainable_parameters()
    if J._tape is tape:
        grads = backward(tape, J, params)
    else:
        grads = {p.name: np.zeros(p.shape) for p in params}
    return ObjectiveResult(J=J.item(), grads=grads, taped_nodes=len(tape.nodes), saved_bytes=tape.saved_bytes)


@dataclass
class FinetuneResult:
    rows: List[RunMetricsRow] = field(default_factory=list)
    explosion_events: int = 0
    steps_done: int = 0
    stopped_early: bool = False


class AlignmentService:
    """
    Runs one fine-tuning strategy on a LoRA stack

    The base model and the student stay frozen; only the adapters of the
    current stage are updated, by AdamW ascent on the reward.
    """

    def __init__(
        self,
        denoiser: DenoiserParams,
        stack: LoraStack,
        student: Optional[DenoiserParams],
        schedule: NoiseSchedule,
        plan: SegmentPlan,
        reward_fn: RewardFn,
        config: StrategyConfig,
        inference_activation: InferenceActivation = InferenceActivation.SEGMENT,
        record_wallclock: bool = False
    ):
        self.denoiser = denoiser
        self.stack = stack
        self.student = student
        self.schedule = schedule
        self.plan = plan
        self.reward_fn = reward_fn
        self.config = config
        self.inference_activation = inference_activation
        self.record_wallclock = record_wallclock

    def stages(self) -> List[StageState]:
        """Stages to run, with the trainable adapter indices of each"""
        cfg = self.config
        k = self.plan.k
        total = cfg.steps_per_stage * k
        all_adapters = tuple(range(1, len(self.stack) + 1))

        if cfg.strategy != Strategy.SHORTFT:
            return [StageState(stage=1, trainable=all_adapters, frozen=(), steps=total)]

        if cfg.stages is not None and cfg.stages != k:
            raise ChainError(f"stages = {cfg.stages} does not match the plan's k = {k}")
        stages = progressive_schedule(k, cfg.steps_per_stage, cfg.stage_weights)
        if not cfg.progressive:
            chosen = cfg.single_stage if cfg.single_stage is not None else k
            if not 1 <= chosen <= k:
                raise ChainError(f"single_stage must lie in [1, {k}]")
            stages = [StageState(stage=chosen, trainable=stages[chosen - 1].trainable,
                                 frozen=stages[chosen - 1].frozen, steps=total)]
        if not self.plan.timestep_aware:
            stages = [StageState(stage=s.stage, trainable=(1,), frozen=(), steps=s.steps) for s in stages]
        return stages

    def chain_for(self, stage: StageState) -> ChainSpec:
        if self.config.strategy == Strategy.SHORTFT:
            return build_chain(self.plan, Strategy.SHORTFT, stage.stage, self.config.K, self.inference_activation)
        return build_chain(self.plan, self.config.strategy, None, self.config.K, self.inference_activation)

    def _stage_budgets(self, stages: List[StageState]) -> List[Optional[float]]:
        budget = self.config.budget_seconds
        if budget is None:
            return [None] * len(stages)
        total = sum(s.steps for s in stages) or 1
        return [budget * s.steps / total for s in stages]

    def finetune(
        self,
        seed: int,
        num_classes: int,
        on_row: Optional[Callable[[RunMetricsRow], None]] = None
    ) -> FinetuneResult:
        """
        Run every stage

        Args:
            seed: Experiment seed; draws come from the finetune stream
            num_classes: Conditions are drawn uniformly from [0, num_classes)
            on_row: Called with each metrics row as it is produced

        Returns:
            FinetuneResult
        """
        cfg = self.config
        result = FinetuneResult()
        optimizer = AdamW(self.stack.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                          weight_decay=cfg.weight_decay)
        stages = self.stages()
        norms: List[float] = []
        started = time.perf_counter()
        global_step = 0
        attempted = 0

        for stage, budget in zip(stages, self._stage_budgets(stages)):
            chain = self.chain_for(stage)
            self.stack.set_trainable(stage.trainable)
            stage_started = time.perf_counter()
            logger.info("%s stage %d: training LoRA %s through %d nodes (%d with gradient)",
                        cfg.strategy.value, stage.stage, list(stage.trainable), len(chain.nodes),
                        chain.grad_enabled_count)

            for _ in range(stage.steps):
                if budget is not None and time.perf_counter() - stage_started >= budget:
                    logger.info("stage %d budget exhausted after %d steps", stage.stage, global_step)
                    result.stopped_early = True
                    break

                rng = stream(seed, "finetune", global_step)
                global_step += 1
                attempted += 1
                condition = rng.integers(0, num_classes, size=cfg.batch_size)
                x_T = rng.standard_normal((cfg.batch_size, self.denoiser.data_dim))

                try:
                    objective = reward_objective(chain, self.denoiser, self.stack, self.student, self.schedule,
                                                 self.plan, self.reward_fn, x_T, condition, cfg.guidance_scale)
                    norm = grad_norm(objective.grads)
                    if not np.isfinite(norm):
                        raise NonFiniteError("grad_norm")
                except NonFiniteError as e:
                    result.explosion_events += 1
                    logger.warning("step %d skipped: %s", global_step, e)
                    self._emit(result, on_row, global_step, stage, float("nan"), float("nan"), chain, started)
                    continue

                grads = objective.grads
                if norms:
                    threshold = cfg.explosion_factor * float(np.median(norms))
                    if threshold > 0 and norm > threshold:
                        result.explosion_events += 1
                        logger.warning("step %d gradient norm %.3e clipped to %.3e", global_step, norm, threshold)
                        grads = {name: g * (threshold / norm) for name, g in grads.items()}
                norms.append(norm)

                # ascent on J
                optimizer.step({name: -g for name, g in grads.items()})
                result.steps_done += 1
                self._emit(result, on_row, global_step, stage, objective.J, norm, chain, started)
                if global_step % cfg.log_every == 0:
                    logger.info("step %d stage %d J %.5f |g| %.3e", global_step, stage.stage, objective.J, norm)

        if attempted and result.steps_done == 0:
            raise TrainingDivergedError(f"All {attempted} fine-tuning steps were skipped as non-finite")
        return result

    def _emit(self, result, on_row, step, stage, J, norm, chain, started) -> None:
        row = RunMetricsRow(
            step=step,
            stage=stage.stage,
            strategy=self.config.strategy.value,
            J=J,
            grad_norm=norm,
            nodes_grad_enabled=chain.grad_enabled_count,
            wallclock_ms=(time.perf_counter() - started) * 1000.0 if self.record_wallclock else 0.0,
            explosion_events=result.explosion_events
        )
        result.rows.append(row)
        if on_row is not None:
            on_row(row)
