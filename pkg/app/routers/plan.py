from typing import Optional

from fastapi import APIRouter, HTTPException, Query

from app.models.segment_plan import SegmentPlan, build_segment_plan
from app.schemas import ChainSummary, InferenceActivation, ScheduleKind, Strategy
from app.services.align_service import build_chain
from app.services.diffusion_service import build_schedule

router = APIRouter(prefix="/api", tags=["Segment plans and chains"])


def _plan(T: int, step_count: int, kind: ScheduleKind, k: int, timestep_aware: bool) -> SegmentPlan:
    schedule = build_schedule(T, kind, step_count)
    return build_segment_plan(schedule.T, schedule.step_list, k, timestep_aware)


@router.get("/plan", response_model=SegmentPlan)
async def get_plan(
    T: int = Query(1000, ge=2),
    step_count: int = Query(50, ge=2),
    kind: ScheduleKind = ScheduleKind.LINEAR,
    k: int = Query(4, ge=1),
    timestep_aware: bool = True
):
    """
    Segment plan for a schedule

    - **T**: Diffusion horizon
    - **step_count**: Number of DDIM steps
    - **k**: Number of segments / LoRA adapters

    Returns boundaries, LoRA timesteps and shortcut spans
    """
    try:
        return _plan(T, step_count, kind, k, timestep_aware)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))


@router.get("/chain", response_model=ChainSummary)
async def get_chain(
    strategy: Strategy = Strategy.SHORTFT,
    stage: Optional[int] = None,
    K: int = Query(1, ge=1),
    T: int = Query(1000, ge=2),
    step_count: int = Query(50, ge=2),
    kind: ScheduleKind = ScheduleKind.LINEAR,
    k: int = Query(4, ge=1),
    inference_activation: InferenceActivation = InferenceActivation.SEGMENT
):
    """
    Node layout of the chain a strategy backpropagates through

    - **strategy**: vanilla, draft_k, stopgrad or shortft
    - **stage**: ShortFT stage (defaults to 1 for shortft)
    - **K**: Truncation depth
    """
    try:
        plan = _plan(T, step_count, kind, k, True)
        if strategy == Strategy.SHORTFT and stage is None:
            stage = 1
        chain = build_chain(plan, strategy, stage, K, inference_activation)
        return ChainSummary(
            chain=chain,
            nodes_total=len(chain.nodes),
            nodes_grad_enabled=chain.grad_enabled_count,
            jumps=chain.jump_count
        )
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
