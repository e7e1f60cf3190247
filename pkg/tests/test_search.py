"""Tests for the REINFORCE topology search."""

import math

import numpy as np
import pytest

from vitgauge.artifacts import ArtifactWriter
from vitgauge.complexity import REWARD_METRICS, EvalProtocol, ProxyEvaluator
from vitgauge.search import (
    Policy,
    RewardHistory,
    SearchError,
    checkpoint_document,
    load_checkpoint,
    metric_evaluator,
    normalize_reward,
    policy_entropy,
    rescore_top,
    run_search,
    search_step,
)
from vitgauge.topology import SEED_TOPOLOGY, ScaleSpec, SearchSpace, space_size

KERNELS = SearchSpace({"K1": (4, 5, 6)})
PAIR = SearchSpace({"K1": (4, 5)})


def _kernel_evaluator(spec):
    """L^E grows with the first kernel; the NTK condition number is flat."""
    return float(spec.to_choices()["K1"]), 1.0


def _pair_evaluator(spec):
    """The second kernel wins on both metrics."""
    return (2.0, 1.0) if spec.to_choices()["K1"] == 5 else (1.0, 2.0)


def _history(le, kappa=None) -> RewardHistory:
    kappa = kappa if kappa is not None else [1.0] * len(le)
    return RewardHistory(LE=list(le), kappa_theta=list(kappa))


class TestPolicy:
    def test_uniform_entropy_is_log_space_size(self):
        policy = Policy.uniform(SearchSpace())
        assert policy_entropy(policy) == pytest.approx(math.log(space_size(SearchSpace())), abs=0.01)
        assert policy_entropy(policy) == pytest.approx(15.33, abs=0.01)

    def test_single_dimension_entropy(self):
        assert policy_entropy(Policy.uniform(KERNELS)) == pytest.approx(math.log(3))

    def test_one_hot_policy_has_zero_entropy(self):
        policy = Policy.uniform(KERNELS)
        policy.logits["K1"] = np.array([0.0, 800.0, 0.0])
        assert policy_entropy(policy) == pytest.approx(0.0, abs=1e-12)

    def test_absent_dimensions_take_seed_values(self):
        policy = Policy.uniform(KERNELS)
        spec = policy.topology({"K1": 2})
        assert spec.to_choices()["K1"] == 6
        assert spec.expansions == SEED_TOPOLOGY.expansions

    def test_document_round_trip_keeps_state(self):
        policy = Policy.uniform(KERNELS)
        policy.logits["K1"] = np.array([0.1, -0.2, 0.3])
        policy.t, policy.baseline = 4, 0.25
        restored = Policy.from_document(policy.to_document())
        assert restored.t == 4
        assert restored.baseline == 0.25
        assert np.array_equal(restored.logits["K1"], policy.logits["K1"])

    def test_malformed_document_raises(self):
        with pytest.raises(SearchError, match="Malformed"):
            Policy.from_document({"t": 0})


class TestNormalizeReward:
    def test_first_step_is_zero(self):
        assert normalize_reward(_history([10.0]), 1) == (0.0, 0.0)

    def test_full_range_increase(self):
        le_hat, kappa_hat = normalize_reward(_history([10.0, 20.0]), 2)
        assert le_hat == pytest.approx(1.0)
        assert kappa_hat == 0.0

    def test_range_includes_earlier_steps(self):
        le_hat, _ = normalize_reward(_history([10.0, 20.0, 15.0]), 3)
        assert le_hat == pytest.approx(-0.5)

    def test_kappa_increase_is_penalized(self):
        _, kappa_hat = normalize_reward(_history([1.0, 1.0], [100.0, 300.0]), 2)
        assert kappa_hat == pytest.approx(1.0)

    def test_step_outside_history_raises(self):
        with pytest.raises(SearchError, match="outside"):
            normalize_reward(_history([1.0]), 2)


class TestSearchStep:
    def test_zero_reward_leaves_logits_unchanged(self):
        policy = Policy.uniform(KERNELS)
        updated, _, r = search_step(policy, _kernel_evaluator, RewardHistory(), np.random.default_rng(0))
        assert r == 0.0
        assert updated.t == 1
        assert np.array_equal(updated.logits["K1"], policy.logits["K1"])

    def test_positive_reward_raises_sampled_logit(self):
        policy = Policy.uniform(KERNELS)
        history = _history([4.0])
        rng = np.random.default_rng(0)
        updated, spec, r = search_step(policy, _kernel_evaluator, history, rng, learning_rate=1.0)
        chosen = KERNELS.choices["K1"].index(spec.to_choices()["K1"])
        if r > 0:
            assert updated.logits["K1"][chosen] > 0
        assert updated.logits["K1"].sum() == pytest.approx(0.0, abs=1e-12)

    def test_failed_evaluation_skips_update(self):
        def failing(spec):
            raise SearchError("no memory")

        policy = Policy.uniform(KERNELS)
        history = RewardHistory()
        updated, _, r = search_step(policy, failing, history, np.random.default_rng(0))
        assert r is None
        assert updated.t == 1
        assert len(history) == 0
        assert np.array_equal(updated.logits["K1"], policy.logits["K1"])

    def test_non_finite_metrics_count_as_failure(self):
        history = RewardHistory()
        _, _, r = search_step(Policy.uniform(KERNELS), lambda spec: (float("nan"), 1.0), history,
                              np.random.default_rng(0))
        assert r is None
        assert len(history) == 0


class TestRunSearch:
    def test_converges_to_longest_kernel(self):
        result = run_search(KERNELS, _kernel_evaluator, steps=200, seed=1, learning_rate=0.5)
        assert result.best.to_choices()["K1"] == 6
        assert result.policy.probabilities("K1")[2] > 0.8
        assert result.trajectory["entropy"].iloc[-1] < math.log(3)

    @pytest.mark.parametrize("seed", range(5))
    def test_two_choices_settle_at_default_rate(self, seed):
        result = run_search(PAIR, _pair_evaluator, steps=300, seed=seed)
        assert result.policy.probabilities("K1")[1] > 0.99
        assert result.best.to_choices()["K1"] == 5

    @pytest.mark.slow
    def test_desk_search_lowers_entropy(self):
        protocol = EvalProtocol(samples=4, seeds=1, ntk_batch=3, metrics=REWARD_METRICS)
        evaluator = metric_evaluator(ProxyEvaluator(protocol), ScaleSpec((1, 1, 1, 1), 8))
        result = run_search(SearchSpace(), evaluator, steps=500, seed=0, log_every=0)
        assert (result.trajectory["status"] == "ok").mean() > 0.9
        assert result.trajectory["entropy"].iloc[-1] < policy_entropy(Policy.uniform(SearchSpace())) - 0.5

    def test_trajectory_columns(self):
        result = run_search(KERNELS, _kernel_evaluator, steps=5)
        assert list(result.trajectory.columns) == [
            "t", "spec_hash", "K1", "LE", "kappa_theta", "reward", "entropy", "status"
        ]
        assert result.trajectory["t"].tolist() == [1, 2, 3, 4, 5]
        assert (result.trajectory["status"] == "ok").all()

    def test_same_seed_same_trajectory(self):
        a = run_search(KERNELS, _kernel_evaluator, steps=20, seed=3)
        b = run_search(KERNELS, _kernel_evaluator, steps=20, seed=3)
        assert a.trajectory["spec_hash"].tolist() == b.trajectory["spec_hash"].tolist()

    def test_failed_steps_are_recorded(self):
        def picky(spec):
            if spec.to_choices()["K1"] == 5:
                raise SearchError("unsupported kernel")
            return _kernel_evaluator(spec)

        result = run_search(KERNELS, picky, steps=30, seed=0)
        failed = result.trajectory[result.trajectory["status"] == "failed"]
        assert len(failed) > 0
        assert failed["reward"].isna().all()
        assert len(result.history) == 30 - len(failed)

    def test_all_failures_raise(self):
        def failing(spec):
            raise SearchError("down")

        with pytest.raises(SearchError, match="All 3"):
            run_search(KERNELS, failing, steps=3)

    def test_zero_steps_raises(self):
        with pytest.raises(SearchError, match="steps"):
            run_search(KERNELS, _kernel_evaluator, steps=0)

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        straight = run_search(KERNELS, _kernel_evaluator, steps=12, seed=5, learning_rate=0.5)

        first = run_search(KERNELS, _kernel_evaluator, steps=7, seed=5, learning_rate=0.5)
        path = ArtifactWriter(tmp_path, {"seed": 5}, "search").write_json(
            "policy.json", checkpoint_document(first.policy, first.history)
        )
        policy, history = load_checkpoint(path)
        second = run_search(KERNELS, _kernel_evaluator, steps=5, seed=5, learning_rate=0.5,
                            policy=policy, history=history)

        assert second.policy.t == 12
        assert np.allclose(second.policy.logits["K1"], straight.policy.logits["K1"])
        resumed = first.trajectory["spec_hash"].tolist() + second.trajectory["spec_hash"].tolist()
        assert resumed == straight.trajectory["spec_hash"].tolist()

    def test_unreadable_checkpoint_raises(self, tmp_path):
        path = tmp_path / "policy.json"
        path.write_text("{}", encoding="utf-8")
        with pytest.raises(SearchError, match="Cannot load"):
            load_checkpoint(path)


class TestRescoreTop:
    def test_best_candidates_are_rescored(self):
        result = run_search(KERNELS, _kernel_evaluator, steps=30, seed=2)
        calls = []

        def fuller(spec):
            calls.append(spec)
            return _kernel_evaluator(spec)

        rescored = rescore_top(result.trajectory, fuller, k=2)
        assert len(rescored) == len(calls) == 2
        assert rescored["K1"].iloc[0] == 6
        assert rescored["spec_hash"].is_unique

    def test_empty_trajectory(self):
        result = run_search(KERNELS, _kernel_evaluator, steps=2)
        failed = result.trajectory.assign(status="failed")
        assert rescore_top(failed, _kernel_evaluator).empty
