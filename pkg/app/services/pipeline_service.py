"""
Experiment harness: runs the phases against one output directory

    out/config.json
    out/base/       checkpoint + loss.csv
    out/critic/     checkpoint
    out/distill/    student checkpoint + distill.csv + fidelity.csv
    out/finetune/   LoRA checkpoint + metrics.csv
    out/eval.csv
    out/compare/<variant>/ and out/compare.csv
"""
import json
import logging
import shutil
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.models.denoiser import DenoiserParams, init_denoiser
from app.models.lora import LoraStack, init_stack
from app.models.segment_plan import SegmentPlan, active_adapters, build_segment_plan
from app.repositories.checkpoint_repository import CheckpointRepository
from app.repositories.metrics_repository import MetricsRepository
from app.schemas import (
    ActivationMode,
    BaseLossRow,
    CompareRow,
    DistillRow,
    EvalRow,
    ExperimentConfig,
    FidelityRow,
    GradcheckRow,
    ModelConfig,
    Phase,
    RewardKind,
    RunMetricsRow,
    Strategy,
    StrategyConfig,
)
from app.services.align_service import AlignmentService, FinetuneResult
from app.services.diffusion_service import DiffusionTrainer, NoiseSchedule, sample, schedule_from_config
from app.services.gradcheck_service import run_gradcheck
from app.services.reward_service import (
    CriticParams,
    RewardFn,
    build_reward,
    init_critic,
    parse_reward_preset,
    train_critic,
)
from app.services.shortcut_service import ShortcutDistiller
from app.utils.datasets import LabeledDataset, generate_dataset
from app.utils.rng import stream
from app.utils.tensor_core import Tensor, configure_precision, no_grad

logger = logging.getLogger(__name__)

PHASE_DIRS = {
    Phase.TRAIN_BASE: "base",
    Phase.CRITIC: "critic",
    Phase.DISTILL: "distill",
    Phase.FINETUNE: "finetune",
}
COMPARE_VARIANTS = ("vanilla", "draft_k", "stopgrad", "shortft")
ABLATION_VARIANTS = ("shortft_shared_lora", "shortft_single_stage")


class MissingPhaseError(ValueError):
    """A phase's prerequisite output is not present"""

    def __init__(self, phase: Phase, directory: Path):
        self.phase = phase
        super().__init__(f"Missing output of phase '{phase.value}' in {directory}; run it first")


class OutputExistsError(ValueError):
    """Refusing to overwrite an existing output without force"""


class ExperimentPipeline:
    """
    Runs and chains the experiment phases for one config and output directory

    Every phase writes only under its own subdirectory and refuses to
    overwrite existing output unless force is set.
    """

    def __init__(self, config: ExperimentConfig, out_dir: Path, force: bool = False, progress: bool = False):
        self.config = config
        self.out_dir = Path(out_dir)
        self.force = force
        self.progress = progress
        self.seed = config.experiment.seed

        configure_precision(config.harness.precision)
        self.schedule: NoiseSchedule = schedule_from_config(config.schedule)
        self.plan: SegmentPlan = self.build_plan(config.plan.timestep_aware)
        self.dataset: LabeledDataset = generate_dataset(config.experiment.task, config.base.dataset_size, self.seed)

    # ------------------------------------------------------------------
    # output layout
    # ------------------------------------------------------------------

    def build_plan(self, timestep_aware: bool) -> SegmentPlan:
        return build_segment_plan(self.schedule.T, self.schedule.step_list, self.config.plan.k, timestep_aware)

    def phase_dir(self, phase: Phase) -> Path:
        return self.out_dir / PHASE_DIRS[phase]

    def _claim(self, path: Path) -> Path:
        """Make a fresh output location, honoring force"""
        if path.exists():
            if not self.force:
                raise OutputExistsError(f"{path} already exists; pass --force to overwrite")
            if path.is_dir():
                shutil.rmtree(path)
            else:
                path.unlink()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._write_config()
        return path

    def _write_config(self) -> None:
        payload = self.config.model_dump(mode="json")
        (self.out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def _hyperparameters(self, **extra) -> Dict:
        return {
            "model": self.config.model.model_dump(mode="json"),
            "task": self.config.experiment.task.value,
            "data_dim": self.dataset.data_dim,
            "num_classes": self.dataset.num_classes,
            "seed": self.seed,
            **extra,
        }

    def _repository(self, phase: Phase) -> CheckpointRepository:
        repository = CheckpointRepository(self.phase_dir(phase))
        if not repository.exists():
            raise MissingPhaseError(phase, self.out_dir)
        return repository

    def _metrics(self, path: Path, row_model) -> MetricsRepository:
        return MetricsRepository(path, row_model, flush_every=self.config.harness.flush_every)

    # ------------------------------------------------------------------
    # model construction / loading
    # ------------------------------------------------------------------

    def _empty_denoiser(self, model: ModelConfig, prefix: str) -> DenoiserParams:
        lane = 0 if prefix == "denoiser" else 2
        return init_denoiser(self.dataset.data_dim, self.dataset.num_classes, model,
                             stream(self.seed, "init", lane=lane), prefix=prefix)

    def new_stack(self, denoiser: DenoiserParams, plan: SegmentPlan) -> LoraStack:
        """Zero-delta LoRA stack: k adapters, or one shared adapter"""
        model = self.config.model
        count = plan.k if plan.timestep_aware else 1
        return init_stack(count, denoiser.lora_layer_dims(), model.lora_rank, model.lora_scale,
                          model.lora_init_std, lambda i: stream(self.seed, "init", lane=10 + i))

    def load_base(self) -> Tuple[DenoiserParams, Dict]:
        manifest, tensors = self._repository(Phase.TRAIN_BASE).load(kind="base")
        model = ModelConfig.model_validate(manifest.hyperparameters["model"])
        denoiser = self._empty_denoiser(model, "denoiser")
        denoiser.load_state(tensors)
        return denoiser.freeze(), manifest.hyperparameters

    def load_critic(self) -> CriticParams:
        manifest, tensors = self._repository(Phase.CRITIC).load(kind="critic")
        critic = init_critic(self.dataset.data_dim, self.dataset.num_classes, manifest.hyperparameters["hidden"])
        critic.load_state(tensors)
        critic.accuracy = manifest.hyperparameters.get("accuracy", float("nan"))
        return critic.freeze()

    def load_student(self) -> DenoiserParams:
        manifest, tensors = self._repository(Phase.DISTILL).load(kind="student")
        model = ModelConfig.model_validate(manifest.hyperparameters["model"])
        student = self._empty_denoiser(model, "student")
        student.load_state(tensors)
        return student.freeze()

    def load_stack(self, directory: Path, denoiser: DenoiserParams) -> Tuple[LoraStack, SegmentPlan]:
        repository = CheckpointRepository(directory)
        if not repository.exists():
            raise MissingPhaseError(Phase.FINETUNE, self.out_dir)
        manifest, tensors = repository.load(kind="lora")
        plan = self.build_plan(bool(manifest.hyperparameters.get("timestep_aware", True)))
        stack = self.new_stack(denoiser, plan)
        stack.load_state(tensors)
        return stack, plan

    def reward_fn(self, preset: Optional[str] = None) -> Tuple[str, RewardFn]:
        preset = preset or self.config.reward.preset
        spec = parse_reward_preset(preset)
        names = spec.weights if spec.kind == RewardKind.COMBINED else [spec.kind.value]
        critic = self.load_critic() if "critic" in names else None
        return preset, build_reward(spec, self.dataset.image_shape, critic)

    # ------------------------------------------------------------------
    # phases
    # ------------------------------------------------------------------

    def train_base(self):
        directory = self._claim(self.phase_dir(Phase.TRAIN_BASE))
        trainer = DiffusionTrainer(self.schedule, self.config.model, self.config.base, self.seed)
        result = trainer.train(self.dataset, progress=self.progress)
        CheckpointRepository(directory).save(
            "base", result.params.state(), self._hyperparameters(final_loss=result.final_loss)
        )
        with self._metrics(directory / "loss.csv", BaseLossRow) as losses:
            losses.extend([BaseLossRow(step=i + 1, loss=v) for i, v in enumerate(result.losses)])
        logger.info("train-base done: final loss %.5f", result.final_loss)
        return result

    def train_critic(self) -> CriticParams:
        directory = self._claim(self.phase_dir(Phase.CRITIC))
        critic = train_critic(self.dataset, self.config.critic, self.seed, progress=self.progress)
        CheckpointRepository(directory).save(
            "critic", critic.state(), self._hyperparameters(hidden=self.config.critic.hidden, accuracy=critic.accuracy)
        )
        return critic

    def distill(self):
        teacher, base_meta = self.load_base()
        directory = self._claim(self.phase_dir(Phase.DISTILL))
        distiller = ShortcutDistiller(teacher, self.schedule, self.plan, self.config.model, self.config.distill,
                                      self.config.finetune.guidance_scale, self.seed)
        student, report = distiller.distill(self.dataset, teacher_loss=base_meta.get("final_loss"),
                                            progress=self.progress)
        CheckpointRepository(directory).save("student", student.state(), self._hyperparameters())
        with self._metrics(directory / "distill.csv", DistillRow) as rows:
            rows.extend(report.rows())
        with self._metrics(directory / "fidelity.csv", FidelityRow) as rows:
            rows.extend(distiller.fidelity(student, self.config.distill.fidelity_timesteps,
                                           probes=self.config.distill.probes))
        return student, report

    def finetune(self, strategy: Optional[StrategyConfig] = None, directory: Optional[Path] = None,
                 timestep_aware: Optional[bool] = None) -> FinetuneResult:
        """
        Fine-tune a fresh LoRA stack on the frozen base model

        Args:
            strategy: Strategy settings (defaults to [finetune])
            directory: Output directory (defaults to out/finetune)
            timestep_aware: Override of [plan] timestep_aware

        Returns:
            FinetuneResult
        """
        strategy = strategy or self.config.finetune
        aware = self.config.plan.timestep_aware if timestep_aware is None else timestep_aware
        plan = self.build_plan(aware)
        denoiser, _ = self.load_base()
        student = self.load_student() if strategy.strategy == Strategy.SHORTFT else None
        _, reward = self.reward_fn()
        directory = self._claim(Path(directory) if directory is not None else self.phase_dir(Phase.FINETUNE))

        stack = self.new_stack(denoiser, plan)
        service = AlignmentService(denoiser, stack, student, self.schedule, plan, reward, strategy,
                                   self.config.plan.inference_activation, self.config.harness.record_wallclock)
        with self._metrics(directory / "metrics.csv", RunMetricsRow) as metrics:
            result = service.finetune(self.seed, self.dataset.num_classes, on_row=metrics.append)

        CheckpointRepository(directory).save(
            "lora", stack.state(),
            self._hyperparameters(strategy=strategy.model_dump(mode="json"), timestep_aware=aware)
        )
        logger.info("finetune (%s) done: %d steps, %d explosion events", strategy.strategy.value,
                    result.steps_done, result.explosion_events)
        return result

    def sample_final(self, denoiser: DenoiserParams, stack: Optional[LoraStack], plan: SegmentPlan,
                     n: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        """Deterministic samples from the full inference chain, class ids cycling"""
        rng = stream(seed, "eval")
        x_T = rng.standard_normal((n, denoiser.data_dim))
        condition = np.arange(n) % self.dataset.num_classes
        activation = None
        if stack is not None:
            def activation(t: int):
                return active_adapters(plan, t, ActivationMode.INFERENCE, self.config.plan.inference_activation)
        with no_grad():
            x0 = sample(denoiser, condition, x_T, self.schedule, self.config.finetune.guidance_scale,
                        eta=0.0, seed=seed, stack=stack, activation=activation)
        return x0.data, condition

    def evaluate_directory(self, directory: Optional[Path], label: str, rewards: List[str],
                           n_eval: int, seed: int) -> List[EvalRow]:
        denoiser, _ = self.load_base()
        stack, plan = (None, self.plan) if directory is None else self.load_stack(directory, denoiser)
        if n_eval == 0:
            return []
        x0, condition = self.sample_final(denoiser, stack, plan, n_eval, seed)
        rows = []
        for preset in rewards:
            name, reward = self.reward_fn(preset)
            with no_grad():
                values = np.array([reward(Tensor(x0[i:i + 1]), condition[i:i + 1]).item() for i in range(n_eval)])
            rows.append(EvalRow(checkpoint=label, reward=name, mean=float(values.mean()),
                                std=float(values.std()), n=n_eval))
        return rows

    def evaluate(self, checkpoint: str = "finetune", rewards: Optional[List[str]] = None,
                 n_eval: Optional[int] = None) -> List[EvalRow]:
        """
        Score samples of a checkpoint ('finetune' or 'base') and write eval.csv
        """
        cfg = self.config.evaluate
        rewards = rewards or cfg.rewards or [self.config.reward.preset]
        n_eval = cfg.n_eval if n_eval is None else n_eval
        directory = None if checkpoint == "base" else self.phase_dir(Phase.FINETUNE)
        path = self._claim(self.out_dir / "eval.csv")
        rows = self.evaluate_directory(directory, checkpoint, rewards, n_eval, cfg.seed)
        with self._metrics(path, EvalRow) as out:
            out.extend(rows)
        return rows

    def compare(self, budget_seconds: Optional[float] = None, ablations: bool = False) -> List[CompareRow]:
        """
        Fine-tune every strategy under the same budget and tabulate their rewards

        Args:
            budget_seconds: Wall-clock budget per variant
            ablations: Also run ShortFT with one shared adapter and single-stage

        Returns:
            One CompareRow per variant
        """
        variants = list(COMPARE_VARIANTS) + (list(ABLATION_VARIANTS) if ablations else [])
        path = self._claim(self.out_dir / "compare.csv")
        compare_root = self._claim(self.out_dir / "compare")
        preset = self.config.reward.preset
        rows = []
        for variant in variants:
            strategy, aware = self._variant(variant, budget_seconds)
            directory = compare_root / variant
            result = self.finetune(strategy, directory=directory, timestep_aware=aware)
            scores = self.evaluate_directory(directory, variant, [preset], self.config.evaluate.n_eval,
                                             self.config.evaluate.seed)
            mean, std = (scores[0].mean, scores[0].std) if scores else (0.0, 0.0)
            rows.append(CompareRow(variant=variant, seed=self.seed, reward=preset, mean=mean, std=std,
                                   steps=result.steps_done, explosion_events=result.explosion_events))
            logger.info("compare %s: reward %.5f +- %.5f after %d steps", variant, mean, std, result.steps_done)
        with self._metrics(path, CompareRow) as out:
            out.extend(rows)
        return rows

    def _variant(self, variant: str, budget_seconds: Optional[float]) -> Tuple[StrategyConfig, Optional[bool]]:
        update = {"budget_seconds": budget_seconds} if budget_seconds is not None else {}
        base = self.config.finetune
        if variant in COMPARE_VARIANTS:
            return base.model_copy(update={**update, "strategy": Strategy(variant)}), None
        if variant == "shortft_shared_lora":
            return base.model_copy(update={**update, "strategy": Strategy.SHORTFT}), False
        if variant == "shortft_single_stage":
            return base.model_copy(update={**update, "strategy": Strategy.SHORTFT, "progressive": False,
                                           "single_stage": 1}), None
        raise ValueError(f"Unknown compare variant: {variant}")

    def gradcheck(self) -> List[GradcheckRow]:
        rows = run_gradcheck(self.seed)
        path = self._claim(self.out_dir / "gradcheck.csv")
        with self._metrics(path, GradcheckRow) as out:
            out.extend(rows)
        return rows

    def run(self, phase: Phase, **options):
        """Dispatch one phase by name"""
        handlers = {
            Phase.TRAIN_BASE: self.train_base,
            Phase.CRITIC: self.train_critic,
            Phase.DISTILL: self.distill,
            Phase.FINETUNE: self.finetune,
            Phase.EVAL: self.evaluate,
        }
        return handlers[Phase(phase)](**options)
