"""
Shortcut student: a frozen one-jump map from a segment's timesteps to that
segment's LoRA timestep (or to 0 from the last segment), distilled from the base
model's guided DDIM sub-chains.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from app.models.denoiser import Condition, DenoiserParams, denoise_eps, init_denoiser, network_forward
from app.models.segment_plan import SegmentPlan
from app.schemas import DistillConfig, DistillRow, FidelityRow, ModelConfig
from app.services.diffusion_service import (
    NoiseSchedule,
    ddim_coefficients,
    ddim_step,
    forward_diffuse,
    run_ddim,
)
from app.utils.datasets import LabeledDataset, split
from app.utils.optim import AdamW
from app.utils.rng import stream
from app.utils.tensor_core import Tape, Tensor, backward, mean, mul, no_grad, square, sub

logger = logging.getLogger(__name__)

PROBE_HOLDOUT_FRACTION = 0.1
MIN_FIDELITY_PROBES = 100


class SpanError(ValueError):
    """Shortcut jump requested outside the plan's spans"""


def _student_ids(student: DenoiserParams, condition: Condition, batch: int) -> np.ndarray:
    if condition is None:
        return np.full(batch, student.null_class, dtype=np.int64)
    ids = np.asarray(condition, dtype=np.int64)
    return np.full(batch, int(ids), dtype=np.int64) if ids.ndim == 0 else ids


def shortcut_predict(
    student: DenoiserParams,
    x: Tensor,
    t_from: int,
    t_to: int,
    condition: Condition,
    schedule: NoiseSchedule
) -> Tensor:
    """Unvalidated student jump: a(t_from, t_to) x + b(t_from, t_to) eps_student"""
    x = x if isinstance(x, Tensor) else Tensor(x)
    coeffs = ddim_coefficients(schedule, t_from, t_to, 0.0)
    eps = network_forward(student, x, t_from, _student_ids(student, condition, x.shape[0]))
    return ddim_step(x, eps, coeffs)


def shortcut_jump(
    student: DenoiserParams,
    x_t: Tensor,
    t_from: int,
    t_to: int,
    condition: Condition,
    plan: SegmentPlan,
    schedule: NoiseSchedule
) -> Tensor:
    """
    One student jump along a plan span (or from the last segment to 0)

    The student's parameters are frozen; gradients flow to x_t only.

    Args:
        student: Distilled student
        x_t: Sample at t_from
        t_from: Span start
        t_to: Span end
        condition: Class ids
        plan: Segment plan
        schedule: Noise schedule

    Returns:
        Sample at t_to
    """
    if not (plan.is_span(t_from, t_to) or plan.is_terminal_jump(t_from, t_to)):
        raise SpanError(f"({t_from}, {t_to}) is not a shortcut span of the plan")
    return shortcut_predict(student, x_t, t_from, t_to, condition, schedule)


def shortcut_to_zero(
    student: DenoiserParams,
    teacher: DenoiserParams,
    x_t: Tensor,
    t: int,
    condition: Condition,
    plan: SegmentPlan,
    schedule: NoiseSchedule,
    guidance_scale: float
) -> Tensor:
    """
    Reach t = 0 from any chain timestep using jumps where the plan allows

    Every timestep jumps to its segment's LoRA timestep (0 from the last
    segment); a teacher DDIM step without adapters moves from each LoRA
    timestep into the next segment. From 741 under the default plan this
    is 741->501, 501->481, 481->261, 261->241, 241->0.
    """
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    while t > 0:
        target = plan.distill_target(t)
        if target != t:
            x = shortcut_predict(student, x, t, target, condition, schedule)
            t = target
        else:
            t_next = plan.successor(t)
            eps = denoise_eps(teacher, x, t, condition, guidance_scale)
            x = ddim_step(x, eps, ddim_coefficients(schedule, t, t_next, 0.0))
            t = t_next
    return x


def predict_x0_one_step(
    teacher: DenoiserParams,
    x_t: Tensor,
    t: int,
    condition: Condition,
    schedule: NoiseSchedule,
    guidance_scale: float
) -> Tensor:
    """x0 estimate (x_t - sqrt(1 - ab) eps) / sqrt(ab) from a single teacher evaluation"""
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    ab = float(schedule.alpha_bar[t])
    eps = denoise_eps(teacher, x, t, condition, guidance_scale)
    return mul(sub(x, mul(eps, np.sqrt(1.0 - ab))), 1.0 / np.sqrt(ab))


@dataclass
class DistillReport:
    probes: int = 0
    epoch_losses: List[float] = field(default_factory=list)
    heldout_mse: List[Dict[int, float]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def final_heldout(self) -> Dict[int, float]:
        return self.heldout_mse[-1] if self.heldout_mse else {}

    def rows(self) -> List[DistillRow]:
        return [
            DistillRow(
                epoch=epoch,
                loss=loss,
                heldout_mse_per_segment=json.dumps({str(j): v for j, v in mse.items()}, sort_keys=True),
                probes=self.probes
            )
            for epoch, (loss, mse) in enumerate(zip(self.epoch_losses, self.heldout_mse), start=1)
        ]


class ShortcutDistiller:
    """
    Regresses the student's jump onto the teacher's guided sub-chain

    Each step picks one segment and one of its DDIM timesteps t, noises
    training data to x_t, runs the teacher (no adapters, CFG scale w) from t
    to the segment's target and fits the student's one-jump prediction.
    """

    def __init__(
        self,
        teacher: DenoiserParams,
        schedule: NoiseSchedule,
        plan: SegmentPlan,
        model_config: ModelConfig,
        config: DistillConfig,
        guidance_scale: float,
        seed: int
    ):
        self.teacher = teacher
        self.schedule = schedule
        self.plan = plan
        self.model_config = model_config
        self.config = config
        self.guidance_scale = guidance_scale
        self.seed = seed

    def _teacher_target(self, x_t: np.ndarray, t: int, target: int, labels: np.ndarray) -> np.ndarray:
        with no_grad():
            out = run_ddim(self.teacher, Tensor(x_t), t, target, self.schedule, labels, self.guidance_scale)
        return out.data

    def _probe_set(self, heldout: LabeledDataset):
        rng = stream(self.config.probe_seed, "probe")
        idx = rng.integers(0, len(heldout), size=self.config.probes)
        return heldout.x[idx], heldout.y[idx], rng

    def heldout_mse(self, student: DenoiserParams, heldout: LabeledDataset) -> Dict[int, float]:
        """Mean squared endpoint error per segment on held-out probes"""
        x0, labels, rng = self._probe_set(heldout)
        result = {}
        for j in range(1, self.plan.k + 1):
            errors = []
            for t in self.plan.segment_timesteps(j):
                target = self.plan.distill_target(t)
                if target == t:
                    continue
                noise = rng.standard_normal(x0.shape)
                x_t = forward_diffuse(x0, t, noise, self.schedule)
                expected = self._teacher_target(x_t, t, target, labels)
                with no_grad():
                    got = shortcut_predict(student, Tensor(x_t), t, target, labels, self.schedule).data
                errors.append(float(np.mean((got - expected) ** 2)))
            result[j] = float(np.mean(errors)) if errors else 0.0
        return result

    def distill(
        self,
        dataset: LabeledDataset,
        teacher_loss: Optional[float] = None,
        progress: bool = False
    ) -> tuple:
        """
        Train a fresh student

        Args:
            dataset: Normalized data; a tail slice is held out for probes
            teacher_loss: Final base training loss, flagged when too high
            progress: Show a tqdm progress bar

        Returns:
            Tuple of (frozen student, DistillReport)
        """
        report = DistillReport(probes=self.config.probes)
        if teacher_loss is not None and teacher_loss > self.config.teacher_loss_threshold:
            message = f"Base model loss {teacher_loss:.4f} above {self.config.teacher_loss_threshold}; teacher may be unconverged"
            logger.warning(message)
            report.warnings.append(message)

        train, heldout = split(dataset, PROBE_HOLDOUT_FRACTION)
        student = init_denoiser(dataset.data_dim, dataset.num_classes, self.model_config,
                                stream(self.seed, "init", lane=2), prefix="student")
        optimizer = AdamW(student.parameters(), lr=self.config.lr)
        segments = [self.plan.segment_timesteps(j) for j in range(1, self.plan.k + 1)]

        step = 0
        for epoch in tqdm(range(self.config.epochs), desc="distill", disable=not progress):
            losses = []
            for _ in range(self.config.steps_per_epoch):
                rng = stream(self.seed, "distill", step)
                step += 1
                timesteps = segments[int(rng.integers(0, len(segments)))]
                t = int(timesteps[int(rng.integers(0, len(timesteps)))])
                target = self.plan.distill_target(t)
                idx = rng.integers(0, len(train), size=self.config.batch_size)
                labels = train.y[idx]
                x_t = forward_diffuse(train.x[idx], t, rng.standard_normal((len(idx), train.data_dim)), self.schedule)
                expected = self._teacher_target(x_t, t, target, labels)

                with Tape() as tape:
                    pred = shortcut_predict(student, Tensor(x_t), t, target, labels, self.schedule)
                    loss = mean(square(sub(pred, expected)))
                if target != t:
                    optimizer.step(backward(tape, loss, student.parameters()))
                losses.append(loss.item())

            report.epoch_losses.append(float(np.mean(losses)))
            report.heldout_mse.append(self.heldout_mse(student, heldout))
            logger.info("distill epoch %d loss %.5f heldout %s", epoch + 1, report.epoch_losses[-1],
                        report.heldout_mse[-1])

        return student.freeze(), report

    def fidelity(
        self,
        student: DenoiserParams,
        timesteps: Sequence[int] = (),
        probes: Optional[int] = None
    ) -> List[FidelityRow]:
        """
        Compare shortcut_to_zero and the one-step x0 estimate against the full teacher chain

        Probes start from x_T and follow the teacher trajectory down to each
        tested timestep before branching. The probe count defaults to
        [distill] probes.
        """
        probes = probes if probes is not None else self.config.probes
        if probes < MIN_FIDELITY_PROBES:
            logger.warning("fidelity over %d probes, below the %d needed for a stable ordering",
                           probes, MIN_FIDELITY_PROBES)
        tested = list(timesteps) or list(self.plan.span_starts)
        rng = stream(self.config.probe_seed, "probe", lane=1)
        x_T = rng.standard_normal((probes, self.teacher.data_dim))
        labels = rng.integers(0, self.teacher.num_classes, size=probes)
        rows = []
        with no_grad():
            for t in sorted(tested, reverse=True):
                x_t = run_ddim(self.teacher, Tensor(x_T), self.schedule.step_list[0], t, self.schedule,
                               labels, self.guidance_scale)
                oracle = run_ddim(self.teacher, x_t, t, 0, self.schedule, labels, self.guidance_scale).data
                jumped = shortcut_to_zero(student, self.teacher, x_t, t, labels, self.plan, self.schedule,
                                          self.guidance_scale).data
                one_step = predict_x0_one_step(self.teacher, x_t, t, labels, self.schedule,
                                               self.guidance_scale).data
                rows.append(FidelityRow(
                    timestep=t,
                    shortcut_mse=float(np.mean((jumped - oracle) ** 2)),
                    one_step_mse=float(np.mean((one_step - oracle) ** 2)),
                    probes=probes
                ))
        return rows
