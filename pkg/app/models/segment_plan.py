"""
Segment plan: how the DDIM chain is split into k segments, which timestep
owns each LoRA adapter, and where the shortcut student jumps.

Segment j covers (m_j, m_{j-1}] with m_j = T - j * floor(T / k); the last
segment always extends down to 0.
"""
from typing import List, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, model_validator

from app.schemas import ActivationMode, InferenceActivation


class PlanError(ValueError):
    """Segment plan cannot be built or queried as requested"""


class SegmentPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    T: int
    k: int
    delta_t: int
    boundaries: Tuple[int, ...]
    step_list: Tuple[int, ...]
    lora_timesteps: Tuple[int, ...]
    shortcut_spans: Tuple[Tuple[int, int], ...]
    timestep_aware: bool = True

    @model_validator(mode="after")
    def _check(self) -> "SegmentPlan":
        if len(self.boundaries) != self.k or len(self.lora_timesteps) != self.k:
            raise PlanError("boundaries and LoRA timesteps must have one entry per segment")
        if list(self.lora_timesteps) != sorted(self.lora_timesteps, reverse=True):
            raise PlanError("LoRA timesteps must decrease with the segment index")
        return self

    def lower_bound(self, j: int) -> int:
        return 0 if j == self.k else self.boundaries[j - 1]

    def upper_bound(self, j: int) -> int:
        return self.T if j == 1 else self.boundaries[j - 2]

    def segment_of(self, t: int) -> int:
        """1-based segment containing timestep t (0 < t <= T)"""
        if not 0 < t <= self.T:
            raise PlanError(f"Timestep {t} lies outside (0, {self.T}]")
        for j in range(1, self.k + 1):
            if self.lower_bound(j) < t <= self.upper_bound(j):
                return j
        raise PlanError(f"Timestep {t} is not covered by any segment")

    def segment_timesteps(self, j: int) -> List[int]:
        return [t for t in self.step_list if self.lower_bound(j) < t <= self.upper_bound(j)]

    def lora_timestep(self, j: int) -> int:
        if not 1 <= j <= self.k:
            raise PlanError(f"Segment {j} outside [1, {self.k}]")
        return self.lora_timesteps[j - 1]

    def successor(self, t: int) -> int:
        """Next timestep on the DDIM chain; 0 after the last step"""
        try:
            i = self.step_list.index(t)
        except ValueError:
            raise PlanError(f"Timestep {t} is not on the DDIM chain") from None
        return self.step_list[i + 1] if i + 1 < len(self.step_list) else 0

    def distill_target(self, t: int) -> int:
        """Where the student jumps from t: its segment's LoRA timestep, or 0 in the last segment"""
        j = self.segment_of(t)
        return self.lora_timestep(j) if j < self.k else 0

    @property
    def span_starts(self) -> Tuple[int, ...]:
        return tuple(start for start, _ in self.shortcut_spans)

    def is_span(self, t_from: int, t_to: int) -> bool:
        return (t_from, t_to) in self.shortcut_spans

    def is_terminal_jump(self, t_from: int, t_to: int) -> bool:
        return t_to == 0 and t_from in self.segment_timesteps(self.k)


def build_segment_plan(T: int, step_list: Sequence[int], k: int, timestep_aware: bool = True) -> SegmentPlan:
    """
    Split a DDIM timestep list into k segments

    Args:
        T: Diffusion horizon
        step_list: DDIM timesteps, strictly descending
        k: Number of segments / LoRA adapters
        timestep_aware: False shares one adapter over every step

    Returns:
        SegmentPlan
    """
    if k < 1:
        raise PlanError("k must be at least 1")
    steps = tuple(int(t) for t in step_list)
    if list(steps) != sorted(set(steps), reverse=True):
        raise PlanError("step_list must be strictly descending")
    delta_t = T // k
    if delta_t < 1:
        raise PlanError(f"k = {k} leaves empty segments for T = {T}")
    boundaries = tuple(T - j * delta_t for j in range(1, k + 1))

    lora_timesteps = []
    for j in range(1, k + 1):
        lower = 0 if j == k else boundaries[j - 1]
        upper = T if j == 1 else boundaries[j - 2]
        members = [t for t in steps if lower < t <= upper]
        if not members:
            raise PlanError(f"Segment {j} ({lower}, {upper}] contains no DDIM timestep")
        lora_timesteps.append(min(members))

    spans = []
    for j in range(1, k):
        i = steps.index(lora_timesteps[j - 1])
        start = steps[i + 1]
        end = lora_timesteps[j]
        if start > end:
            spans.append((start, end))

    return SegmentPlan(
        T=T,
        k=k,
        delta_t=delta_t,
        boundaries=boundaries,
        step_list=steps,
        lora_timesteps=tuple(lora_timesteps),
        shortcut_spans=tuple(spans),
        timestep_aware=timestep_aware
    )


def active_adapters(
    plan: SegmentPlan,
    t: int,
    mode: ActivationMode,
    inference_activation: InferenceActivation = InferenceActivation.SEGMENT
) -> Tuple[int, ...]:
    """
    Adapter indices active at teacher timestep t

    train_chain: segment 1 shares LoRA 1 at every step; later segments only
    activate {1..j} at their LoRA timestep. inference: segment j uses
    {1..j} at all its steps (segment mode) or only at the LoRA timestep
    (assigned_step_only mode).

    Args:
        plan: Segment plan
        t: Timestep on the DDIM chain
        mode: Training chain or inference
        inference_activation: Inference rule

    Returns:
        Sorted tuple of 1-based indices, always a stack prefix
    """
    if t == 0:
        return ()
    if t not in plan.step_list:
        raise PlanError(f"Timestep {t} is not on the DDIM chain")
    if not plan.timestep_aware:
        return (1,)
    j = plan.segment_of(t)
    prefix = tuple(range(1, j + 1))
    if j == 1:
        return prefix
    if mode == ActivationMode.INFERENCE and inference_activation == InferenceActivation.SEGMENT:
        return prefix
    return prefix if t == plan.lora_timestep(j) else ()
