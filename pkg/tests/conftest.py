import numpy as np
import pytest

from app.models.denoiser import init_denoiser
from app.models.lora import init_stack
from app.models.segment_plan import build_segment_plan
from app.schemas import ModelConfig
from app.services.diffusion_service import build_schedule
from app.utils.tensor_core import configure_precision


@pytest.fixture(autouse=True)
def float64_storage():
    configure_precision("float64")
    yield
    configure_precision("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def schedule():
    return build_schedule(1000, "linear", 50)


@pytest.fixture
def plan(schedule):
    return build_segment_plan(schedule.T, schedule.step_list, 4)


@pytest.fixture
def tiny_model():
    return ModelConfig(hidden=16, depth=3, time_dim=8, class_dim=4, lora_rank=2)


@pytest.fixture
def denoiser(tiny_model, rng):
    return init_denoiser(2, 2, tiny_model, rng).freeze()


@pytest.fixture
def student(tiny_model, rng):
    return init_denoiser(2, 2, tiny_model, rng, prefix="student").freeze()


@pytest.fixture
def stack(denoiser, plan, tiny_model, rng):
    return init_stack(plan.k, denoiser.lora_layer_dims(), tiny_model.lora_rank, 1.0, 0.01, lambda i: rng)


@pytest.fixture
def nonzero_stack(stack, rng):
    """Stack whose adapters all have a non-zero delta"""
    for param in stack.parameters():
        if param.name.endswith(".up"):
            param.data = 0.1 * rng.standard_normal(param.shape)
    return stack
