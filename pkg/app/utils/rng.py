"""
Counter-based random streams keyed by (seed, phase, step, lane)

Every draw in the pipeline comes from a Philox generator whose key is derived
from the tuple, so results do not depend on call order or on how work is
fanned out.
"""
import numpy as np

PHASES = {
    "data": 0,
    "init": 1,
    "base": 2,
    "critic": 3,
    "distill": 4,
    "finetune": 5,
    "eval": 6,
    "sample": 7,
    "probe": 8,
    "gradcheck": 9,
}


def stream(seed: int, phase: str, step: int = 0, lane: int = 0) -> np.random.Generator:
    """
    Independent generator for one (seed, phase, step, lane) cell

    Args:
        seed: Experiment seed
        phase: Pipeline phase name (see PHASES)
        step: Step counter inside the phase
        lane: Sub-stream inside a step (batch member, adapter index, ...)

    Returns:
        numpy Generator backed by Philox
    """
    if phase not in PHASES:
        raise ValueError(f"Unknown RNG phase: {phase}")
    if seed < 0 or step < 0 or lane < 0:
        raise ValueError("seed, step and lane must be non-negative")
    key = np.random.SeedSequence(entropy=seed, spawn_key=(PHASES[phase], step, lane))
    return np.random.Generator(np.random.Philox(key))
