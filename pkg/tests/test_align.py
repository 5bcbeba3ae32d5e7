import numpy as np
import pytest

from app.models.denoiser import init_denoiser
from app.models.lora import init_stack
from app.models.segment_plan import active_adapters, build_segment_plan
from app.repositories.checkpoint_repository import CheckpointRepository
from app.schemas import ActivationMode, ChainSpec, InferenceActivation, Strategy, StrategyConfig, TeacherStep
from app.services.align_service import (
    AlignmentService,
    ChainError,
    TrainingDivergedError,
    build_chain,
    inference_chain,
    progressive_schedule,
    reward_objective,
    run_chain,
)
from app.services.diffusion_service import build_schedule, ddim_coefficients, run_ddim, sample
from app.services.reward_service import build_reward, init_critic, parse_reward_preset, reward_critic
from app.utils.tensor_core import (
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    check_parameters,
    mean,
    mul,
    no_grad,
    square,
    sum_,
)


def _constant_reward(x, condition):
    return mul(sum_(x), 0.0)


def _neg_energy(x, condition):
    return mul(mean(sum_(square(x), axis=1)), -1.0)


class TestProgressiveSchedule:
    def test_four_stages(self):
        stages = progressive_schedule(4, 10)
        assert [s.trainable for s in stages] == [(1, 2, 3, 4), (2, 3, 4), (3, 4), (4,)]
        assert [s.frozen for s in stages] == [(), (1,), (1, 2), (1, 2, 3)]
        for s in stages:
            assert set(s.trainable) | set(s.frozen) == {1, 2, 3, 4}
            assert not set(s.trainable) & set(s.frozen)

    def test_single_stage(self):
        stages = progressive_schedule(1, 5)
        assert len(stages) == 1
        assert stages[0].trainable == (1,)

    def test_weighted_stage_lengths(self):
        stages = progressive_schedule(4, 10, [1, 1, 1, 5])
        assert [s.steps for s in stages] == [5, 5, 5, 25]

    def test_bad_weights(self):
        with pytest.raises(ChainError):
            progressive_schedule(4, 10, [1, 1])


class TestBuildChain:
    def test_shortft_stage_one_layout(self, plan):
        chain = build_chain(plan, Strategy.SHORTFT, stage=1, K=1)
        prefix = [("teacher", t, t - 20) for t in range(981, 760, -20)]
        assert chain.layout() == prefix + [
            ("shortcut", 741, 501), ("teacher", 501, 481),
            ("shortcut", 481, 261), ("teacher", 261, 241),
            ("shortcut", 241, 1), ("teacher", 1, 0),
        ]
        assert chain.grad_enabled_count == 7
        assert chain.jump_count == 3

    def test_shortft_adapters(self, plan):
        chain = build_chain(plan, Strategy.SHORTFT, stage=1, K=1)
        teacher = {node.t_from: node.adapters for node in chain.nodes if node.kind == "teacher"}
        assert teacher[981] == (1,)
        assert teacher[501] == (1, 2)
        assert teacher[261] == (1, 2, 3)
        assert teacher[1] == (1, 2, 3, 4)

    def test_shortft_stage_two(self, plan):
        chain = build_chain(plan, Strategy.SHORTFT, stage=2, K=1)
        assert chain.layout()[-5:] == [
            ("teacher", 501, 481), ("shortcut", 481, 261), ("teacher", 261, 241),
            ("shortcut", 241, 1), ("teacher", 1, 0),
        ]
        assert ("teacher", 741, 721) in chain.layout()
        assert chain.jump_count == 2
        assert chain.grad_enabled_count == 5

    def test_last_stage_is_inference_chain(self, plan):
        chain = build_chain(plan, Strategy.SHORTFT, stage=plan.k, K=1)
        assert chain.layout() == inference_chain(plan).layout()
        assert chain.jump_count == 0

    def test_graph_size_stays_below_vanilla(self, plan):
        vanilla = build_chain(plan, Strategy.VANILLA).grad_enabled_count
        counts = [build_chain(plan, Strategy.SHORTFT, stage=i, K=1).grad_enabled_count for i in range(1, 5)]
        assert counts == [7, 5, 3, 1]
        assert all(c < vanilla for c in counts)

    def test_retained_chain_grows_with_stage(self, plan):
        chains = [build_chain(plan, Strategy.SHORTFT, stage=i, K=50) for i in range(1, 5)]
        assert [len(c.nodes) for c in chains] == [18, 29, 39, 50]
        enabled = [c.grad_enabled_count for c in chains]
        assert enabled == sorted(enabled)
        assert enabled[-1] == build_chain(plan, Strategy.VANILLA).grad_enabled_count

    def test_vanilla(self, plan):
        chain = build_chain(plan, Strategy.VANILLA)
        assert len(chain.nodes) == 50
        assert chain.grad_enabled_count == 50
        assert chain.jump_count == 0

    def test_draft_k(self, plan):
        chain = build_chain(plan, Strategy.DRAFT_K, K=1)
        assert chain.grad_enabled_count == 1
        last = chain.nodes[-1]
        assert (last.t_from, last.t_to, last.grad_enabled) == (1, 0, True)

    def test_stopgrad(self, plan):
        chain = build_chain(plan, Strategy.STOPGRAD)
        assert chain.grad_enabled_count == 50
        assert all(node.stop_eps_input for node in chain.nodes)

    def test_invalid_requests(self, plan):
        with pytest.raises(ChainError):
            build_chain(plan, Strategy.SHORTFT, stage=5)
        with pytest.raises(ChainError):
            build_chain(plan, Strategy.SHORTFT)
        with pytest.raises(ChainError):
            build_chain(plan, Strategy.VANILLA, stage=1)
        with pytest.raises(ChainError):
            build_chain(plan, Strategy.DRAFT_K, K=0)

    def test_assigned_step_only_inference(self, plan):
        chain = inference_chain(plan, InferenceActivation.ASSIGNED_STEP_ONLY)
        adapters = {node.t_from: node.adapters for node in chain.nodes}
        assert adapters[601] == ()
        assert adapters[501] == (1, 2)


class TestRunChain:
    def test_inference_chain_matches_sampler(self, denoiser, stack, plan, schedule, rng):
        x_T = rng.standard_normal((4, 2))
        labels = np.array([0, 1, 0, 1])
        with no_grad():
            via_chain = run_chain(inference_chain(plan), denoiser, stack, None, schedule, plan, x_T, labels, 2.0)
            via_sample = sample(denoiser, labels, x_T, schedule, 2.0)
        assert np.allclose(via_chain.data, via_sample.data, atol=1e-12)

    def test_jumps_need_student(self, denoiser, stack, plan, schedule, rng):
        chain = build_chain(plan, Strategy.SHORTFT, stage=1)
        with pytest.raises(ChainError):
            run_chain(chain, denoiser, stack, None, schedule, plan, rng.standard_normal((2, 2)), None, 0.0)

    def test_stopgrad_step_jacobian_is_carry(self, denoiser, plan, schedule, rng):
        chain = ChainSpec(strategy=Strategy.STOPGRAD, nodes=(TeacherStep(t_from=1, t_to=0, stop_eps_input=True),))
        x = Tensor.parameter(rng.standard_normal((3, 2)), "x")
        with Tape() as tape:
            out = sum_(run_chain(chain, denoiser, None, None, schedule, plan, x, np.array([0, 1, 0]), 2.0))
        assert np.allclose(backward(tape, out, [x])["x"], ddim_coefficients(schedule, 1, 0).a, atol=1e-12)


class TestRewardObjective:
    def test_constant_reward_gives_zero_gradients(self, denoiser, nonzero_stack, student, plan, schedule, rng):
        chain = build_chain(plan, Strategy.SHORTFT, stage=1)
        result = reward_objective(chain, denoiser, nonzero_stack, student, schedule, plan, _constant_reward,
                                  rng.standard_normal((3, 2)), np.array([0, 1, 0]), 2.0)
        assert result.J == 0.0
        assert all(not g.any() for g in result.grads.values())

    def test_frozen_adapters_get_no_entry(self, denoiser, nonzero_stack, student, plan, schedule, rng):
        nonzero_stack.set_trainable([3, 4])
        chain = build_chain(plan, Strategy.SHORTFT, stage=3)
        result = reward_objective(chain, denoiser, nonzero_stack, student, schedule, plan, _neg_energy,
                                  rng.standard_normal((3, 2)), np.array([0, 1, 0]), 2.0)
        assert result.grads
        assert all(name.startswith(("lora.3.", "lora.4.")) for name in result.grads)
        assert result.taped_nodes > 0

    def test_draft_k_sees_only_the_last_step(self, denoiser, nonzero_stack, plan, schedule, rng):
        x_T = rng.standard_normal((3, 2))
        labels = np.array([0, 1, 0])
        truncated = reward_objective(build_chain(plan, Strategy.DRAFT_K, K=1), denoiser, nonzero_stack, None,
                                     schedule, plan, _neg_energy, x_T, labels, 2.0)

        with no_grad():
            x_1 = run_ddim(denoiser, x_T, schedule.step_list[0], 1, schedule, labels, 2.0, stack=nonzero_stack,
                           activation=lambda t: active_adapters(plan, t, ActivationMode.INFERENCE))
        last = ChainSpec(strategy=Strategy.DRAFT_K, nodes=(TeacherStep(t_from=1, t_to=0, adapters=(1, 2, 3, 4)),))
        alone = reward_objective(last, denoiser, nonzero_stack, None, schedule, plan, _neg_energy,
                                 x_1.data, labels, 2.0)
        assert truncated.J == pytest.approx(alone.J, abs=1e-12)
        for name, g in truncated.grads.items():
            assert np.allclose(g, alone.grads[name], atol=1e-12)

    def test_one_step_chain_gradient(self, denoiser, nonzero_stack, plan, schedule, rng):
        chain = ChainSpec(strategy=Strategy.DRAFT_K, nodes=(TeacherStep(t_from=1, t_to=0, adapters=(1, 2, 3, 4)),))
        assert ddim_coefficients(schedule, 1, 0, 0.0).a == pytest.approx(1.0, abs=1e-3)
        x_T = rng.standard_normal((4, 2))

        def objective():
            return _neg_energy(run_chain(chain, denoiser, nonzero_stack, None, schedule, plan, Tensor(x_T), None, 0.0),
                               None)

        params = [p for p in nonzero_stack.parameters() if p.name.startswith("lora.4.")]
        assert check_parameters(objective, params, rng=rng, floor=1e-6) < 1e-3

    def test_shortft_objective_gradient(self, denoiser, nonzero_stack, student, plan, schedule, rng):
        critic = init_critic(2, 2, 8, rng).freeze()
        chain = build_chain(plan, Strategy.SHORTFT, stage=1, K=len(schedule.step_list))
        x_T = rng.standard_normal((4, 2))
        labels = np.array([0, 1, 0, 1])

        def objective():
            x0 = run_chain(chain, denoiser, nonzero_stack, student, schedule, plan, Tensor(x_T), labels, 2.0)
            return reward_critic(critic, x0, labels)

        assert check_parameters(objective, nonzero_stack.parameters(), coords=10, rng=rng) < 1e-3


class TestFinetune:
    def _service(self, denoiser, stack, student, schedule, plan, reward_fn, **overrides):
        config = StrategyConfig(**{"steps_per_stage": 2, "batch_size": 4, "lr": 1e-2, **overrides})
        return AlignmentService(denoiser, stack, student, schedule, plan, reward_fn, config)

    def test_progressive_run_logs_every_step(self, denoiser, stack, student, schedule, plan):
        service = self._service(denoiser, stack, student, schedule, plan, _neg_energy)
        seen = []
        result = service.finetune(seed=0, num_classes=2, on_row=seen.append)
        assert result.steps_done == 8
        assert [r.stage for r in result.rows] == [1, 1, 2, 2, 3, 3, 4, 4]
        assert seen == result.rows
        assert all(r.wallclock_ms == 0.0 for r in result.rows)
        assert result.rows[0].nodes_grad_enabled == 7

    def test_frozen_adapters_stay_put(self, denoiser, stack, student, schedule, plan):
        service = self._service(denoiser, stack, student, schedule, plan, _neg_energy,
                                progressive=False, single_stage=3)
        before = {n: v.copy() for n, v in stack.state().items()}
        service.finetune(seed=0, num_classes=2)
        after = stack.state()
        assert all(np.array_equal(before[n], after[n]) for n in before if n.startswith(("lora.1.", "lora.2.")))
        assert any(not np.array_equal(before[n], after[n]) for n in before if n.startswith("lora.3."))

    def test_base_and_student_are_never_updated(self, denoiser, stack, student, schedule, plan, tmp_path):
        def hashes(tag):
            return (CheckpointRepository(tmp_path / tag / "base").save("base", denoiser.state()).parameter_hash,
                    CheckpointRepository(tmp_path / tag / "student").save("student", student.state()).parameter_hash)

        before = hashes("before")
        result = self._service(denoiser, stack, student, schedule, plan, _neg_energy).finetune(seed=0, num_classes=2)
        assert result.steps_done == 8
        assert hashes("after") == before

    def test_zero_steps_leave_stack_unchanged(self, denoiser, stack, student, schedule, plan):
        before = {n: v.copy() for n, v in stack.state().items()}
        result = self._service(denoiser, stack, student, schedule, plan, _neg_energy,
                               steps_per_stage=0).finetune(seed=0, num_classes=2)
        assert result.steps_done == 0
        assert all(np.array_equal(before[n], v) for n, v in stack.state().items())

    def test_finetune_is_deterministic(self, denoiser, student, schedule, plan, tiny_model):
        def run():
            stack = init_stack(plan.k, denoiser.lora_layer_dims(), tiny_model.lora_rank, 1.0, 0.01,
                               lambda i: np.random.default_rng(i))
            rows = self._service(denoiser, stack, student, schedule, plan, _neg_energy).finetune(0, 2).rows
            return [r.J for r in rows], stack.state()

        (j_a, state_a), (j_b, state_b) = run(), run()
        assert j_a == j_b
        assert all(np.array_equal(state_a[n], state_b[n]) for n in state_a)

    def test_baseline_trains_all_adapters_in_one_stage(self, denoiser, stack, schedule, plan):
        service = self._service(denoiser, stack, None, schedule, plan, _neg_energy, strategy=Strategy.DRAFT_K)
        stages = service.stages()
        assert len(stages) == 1
        assert stages[0].trainable == (1, 2, 3, 4)
        assert stages[0].steps == 8

    def test_stage_count_must_match_plan(self, denoiser, stack, student, schedule, plan):
        service = self._service(denoiser, stack, student, schedule, plan, _neg_energy, stages=3)
        with pytest.raises(ChainError):
            service.stages()

    def test_shared_adapter_ablation(self, denoiser, stack, student, schedule):
        shared = build_segment_plan(schedule.T, schedule.step_list, 4, timestep_aware=False)
        service = self._service(denoiser, stack, student, schedule, shared, _neg_energy)
        assert all(s.trainable == (1,) for s in service.stages())

    def test_every_step_non_finite_aborts(self, denoiser, stack, student, schedule, plan):
        def exploding(x, condition):
            raise NonFiniteError("reward")

        service = self._service(denoiser, stack, student, schedule, plan, exploding)
        with pytest.raises(TrainingDivergedError):
            service.finetune(seed=0, num_classes=2)

    def test_explosions_are_counted_and_skipped(self, denoiser, stack, student, schedule, plan):
        calls = {"n": 0}

        def flaky(x, condition):
            calls["n"] += 1
            if calls["n"] == 2:
                raise NonFiniteError("reward")
            return _neg_energy(x, condition)

        result = self._service(denoiser, stack, student, schedule, plan, flaky).finetune(seed=0, num_classes=2)
        assert result.explosion_events == 1
        assert result.steps_done == 7
        assert np.isnan(result.rows[1].J)

    def test_symmetry_reward_improves(self, tiny_model):
        schedule = build_schedule(100, "linear", 10)
        plan = build_segment_plan(schedule.T, schedule.step_list, 2)
        rng = np.random.default_rng(0)
        denoiser = init_denoiser(4, 2, tiny_model, rng).freeze()
        student = init_denoiser(4, 2, tiny_model, rng, prefix="student").freeze()
        stack = init_stack(2, denoiser.lora_layer_dims(), tiny_model.lora_rank, 1.0, 0.1, lambda i: rng)
        reward = build_reward(parse_reward_preset("symmetry"), image_shape=(2, 2))
        service = self._service(denoiser, stack, student, schedule, plan, reward,
                                progressive=False, single_stage=1, steps_per_stage=30, batch_size=32, lr=2e-2)

        chain = service.chain_for(service.stages()[0])
        x_T = np.random.default_rng(7).standard_normal((256, 4))
        labels = np.arange(256) % 2

        def evaluate():
            with no_grad():
                x0 = run_chain(chain, denoiser, stack, student, schedule, plan, x_T, labels, 2.0)
                return reward(x0, labels).item()

        before = evaluate()
        service.finetune(seed=1, num_classes=2)
        assert evaluate() > before
