from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union
from enum import Enum


class Task(str, Enum):
    POINTS2D = "points2d"  # Two Gaussian blobs in 2-D
    BARS16 = "bars16"  # 16x16 horizontal / vertical bar images


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    COSINE = "cosine"


class Strategy(str, Enum):
    VANILLA = "vanilla"  # Full backprop through every step
    DRAFT_K = "draft_k"  # Gradient only through the last K steps
    STOPGRAD = "stopgrad"  # Gradient only through the a_t * x_t carry
    SHORTFT = "shortft"  # Shortcut-based chain, progressive stages


class ActivationMode(str, Enum):
    TRAIN_CHAIN = "train_chain"
    INFERENCE = "inference"


class InferenceActivation(str, Enum):
    SEGMENT = "segment"  # Segment j uses adapters {1..j} at all its timesteps
    ASSIGNED_STEP_ONLY = "assigned_step_only"  # Adapters only at their LoRA timestep


class RewardKind(str, Enum):
    SYMMETRY = "symmetry"
    CRITIC = "critic"
    TV = "tv"
    COMBINED = "combined"


class Phase(str, Enum):
    TRAIN_BASE = "train-base"
    CRITIC = "critic"
    DISTILL = "distill"
    FINETUNE = "finetune"
    EVAL = "eval"


# ---------------------------------------------------------------------------
# Experiment configuration sections
# ---------------------------------------------------------------------------

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ExperimentSection(_Section):
    task: Task = Task.POINTS2D
    seed: int = Field(default=0, ge=0)


class ScheduleConfig(_Section):
    T: int = Field(default=1000, ge=2)
    kind: ScheduleKind = ScheduleKind.LINEAR
    step_count: int = Field(default=50, ge=2)


class ModelConfig(_Section):
    hidden: int = Field(default=128, ge=1)
    depth: int = Field(default=4, ge=2, description="Number of hidden layers")
    time_dim: int = Field(default=32, ge=2)
    class_dim: int = Field(default=16, ge=1)
    lora_rank: int = Field(default=4, ge=1)
    lora_scale: float = 1.0
    lora_init_std: float = 0.01


class PlanConfig(_Section):
    k: int = Field(default=4, ge=2)
    inference_activation: InferenceActivation = InferenceActivation.SEGMENT
    timestep_aware: bool = Field(default=True, description="False: one shared adapter at every step")


class BaseTrainingConfig(_Section):
    steps: int = Field(default=20000, ge=0)
    batch_size: int = Field(default=256, ge=1)
    lr: float = 1e-3
    weight_decay: float = 0.0
    cond_dropout: float = Field(default=0.1, ge=0.0, le=1.0)
    dataset_size: int = Field(default=10000, ge=1)
    log_every: int = Field(default=500, ge=1)


class CriticConfig(_Section):
    steps: int = Field(default=1500, ge=0)
    batch_size: int = Field(default=128, ge=1)
    lr: float = 1e-2
    hidden: int = Field(default=64, ge=1)
    holdout_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    min_accuracy: float = 0.8


class DistillConfig(_Section):
    epochs: int = Field(default=40, ge=0)
    steps_per_epoch: int = Field(default=100, ge=1)
    batch_size: int = Field(default=128, ge=1)
    lr: float = 1e-3
    probes: int = Field(default=200, ge=1)
    probe_seed: int = Field(default=1234, ge=0)
    teacher_loss_threshold: float = Field(default=0.5, description="Base loss above this is flagged")
    fidelity_timesteps: List[int] = Field(default_factory=list, description="Empty: every shortcut span start")


class StrategyConfig(_Section):
    strategy: Strategy = Strategy.SHORTFT
    K: int = Field(default=1, ge=1)
    stages: Optional[int] = Field(default=None, ge=1, description="Defaults to plan k")
    steps_per_stage: int = Field(default=100, ge=0)
    stage_weights: Optional[List[float]] = None
    progressive: bool = True
    single_stage: Optional[int] = Field(default=None, ge=1, description="Stage trained when progressive is off")
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.1
    batch_size: int = Field(default=16, ge=1)
    guidance_scale: float = 2.0
    budget_seconds: Optional[float] = Field(default=None, gt=0)
    explosion_factor: float = 1e3
    log_every: int = Field(default=10, ge=1)


class RewardSpec(_Section):
    kind: RewardKind = RewardKind.SYMMETRY
    weights: Dict[str, float] = Field(default_factory=dict)
    maximize: bool = True

    @model_validator(mode="after")
    def _check_weights(self) -> "RewardSpec":
        if self.kind == RewardKind.COMBINED:
            if not self.weights:
                raise ValueError("combined reward needs at least one weighted component")
            for name, weight in self.weights.items():
                if name not in {k.value for k in RewardKind if k != RewardKind.COMBINED}:
                    raise ValueError(f"Unknown reward component: {name}")
                if weight != weight or weight in (float("inf"), float("-inf")):
                    raise ValueError(f"Weight for {name} is not finite")
        return self


class RewardSection(_Section):
    preset: str = "symmetry"


class EvaluateConfig(_Section):
    n_eval: int = Field(default=256, ge=0)
    seed: int = Field(default=4242, ge=0)
    rewards: List[str] = Field(default_factory=list, description="Empty: the [reward] preset")


class HarnessConfig(_Section):
    record_wallclock: bool = False
    precision: Literal["float64", "float32"] = "float64"
    flush_every: int = Field(default=20, ge=1)


class ExperimentConfig(_Section):
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    plan: PlanConfig = Field(default_factory=PlanConfig)
    base: BaseTrainingConfig = Field(default_factory=BaseTrainingConfig)
    critic: CriticConfig = Field(default_factory=CriticConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    finetune: StrategyConfig = Field(default_factory=StrategyConfig)
    reward: RewardSection = Field(default_factory=RewardSection)
    evaluate: EvaluateConfig = Field(default_factory=EvaluateConfig)
    harness: HarnessConfig = Field(default_factory=HarnessConfig)


# ---------------------------------------------------------------------------
# Chain description
# ---------------------------------------------------------------------------

class TeacherStep(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["teacher"] = "teacher"
    t_from: int
    t_to: int
    adapters: Tuple[int, ...] = ()
    grad_enabled: bool = True
    stop_eps_input: bool = False


class ShortcutJump(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["shortcut"] = "shortcut"
    t_from: int
    t_to: int
    grad_enabled: bool = True


ChainNode = Annotated[Union[TeacherStep, ShortcutJump], Field(discriminator="kind")]


class ChainSpec(BaseModel):
    """Ordered description of one denoising pass"""
    model_config = ConfigDict(frozen=True)

    strategy: Strategy
    stage: Optional[int] = None
    nodes: Tuple[ChainNode, ...]

    @model_validator(mode="after")
    def _check_chain(self) -> "ChainSpec":
        if not self.nodes:
            raise ValueError("chain has no nodes")
        for prev, node in zip(self.nodes, self.nodes[1:]):
            if prev.t_to != node.t_from:
                raise ValueError(f"chain not contiguous: {prev.t_to} != {node.t_from}")
        for node in self.nodes:
            if node.t_from <= node.t_to:
                raise ValueError(f"node {node.t_from}->{node.t_to} does not descend")
        if self.nodes[-1].t_to != 0:
            raise ValueError("chain must end at t = 0")
        enabled = [node.grad_enabled for node in self.nodes]
        if True in enabled and not all(enabled[enabled.index(True):]):
            raise ValueError("grad_enabled must be suffix-closed")
        return self

    @property
    def grad_enabled_count(self) -> int:
        return sum(1 for node in self.nodes if node.grad_enabled)

    @property
    def jump_count(self) -> int:
        return sum(1 for node in self.nodes if node.kind == "shortcut")

    @property
    def teacher_count(self) -> int:
        return sum(1 for node in self.nodes if node.kind == "teacher")

    def layout(self) -> List[Tuple[str, int, int]]:
        """(kind, t_from, t_to) per node; ignores gradient flags"""
        return [(node.kind, node.t_from, node.t_to) for node in self.nodes]


class ChainSummary(BaseModel):
    chain: ChainSpec
    nodes_total: int
    nodes_grad_enabled: int
    jumps: int


# ---------------------------------------------------------------------------
# CSV rows and checkpoint manifest
# ---------------------------------------------------------------------------

class RunMetricsRow(BaseModel):
    step: int
    stage: int
    strategy: str
    J: float
    grad_norm: float
    nodes_grad_enabled: int
    wallclock_ms: float
    explosion_events: int


class DistillRow(BaseModel):
    epoch: int
    loss: float
    heldout_mse_per_segment: str
    probes: int


class FidelityRow(BaseModel):
    timestep: int
    shortcut_mse: float
    one_step_mse: float
    probes: int


class EvalRow(BaseModel):
    checkpoint: str
    reward: str
    mean: float
    std: float
    n: int


class CompareRow(BaseModel):
    variant: str
    seed: int
    reward: str
    mean: float
    std: float
    steps: int
    explosion_events: int


class TensorEntry(BaseModel):
    name: str
    shape: List[int]


class CheckpointManifest(BaseModel):
    format_version: int = 1
    kind: str
    dtype: str = "<f4"
    tensors: List[TensorEntry]
    hyperparameters: Dict[str, Any] = Field(default_factory=dict)
    parameter_hash: str


class BaseLossRow(BaseModel):
    step: int
    loss: float


class GradcheckRow(BaseModel):
    check: str
    max_rel_error: float
    threshold: float
    passed: bool
