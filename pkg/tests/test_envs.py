"""Environment dynamics, scripted policies, calibration, datasets, splits."""

import math

import numpy as np
import pytest

from promptdt import envs
from promptdt.errors import ContractError, EpisodeDone


def task_of(family, index=0, n=6):
    return envs.canonical_tasks(family, n)[index]


class TestDynamics:
    def test_dir_reset_is_origin(self):
        t = task_of("point-dir-2d")
        np.testing.assert_array_equal(envs.env_reset(t, seed=123), np.zeros(4))

    def test_vel_reset_zero(self):
        t = task_of("point-vel-1d")
        np.testing.assert_array_equal(envs.env_reset(t, seed=5), np.zeros(2))

    def test_reach_reset_seeded_deterministic(self):
        t = task_of("point-reach-2d")
        a = envs.env_reset(t, seed=9)
        b = envs.env_reset(t, seed=9)
        np.testing.assert_array_equal(a, b)
        assert np.all(np.abs(a) <= 1.0)

    def test_vel_zero_error_zero_reward(self):
        t = envs.TaskSpec("point-vel-1d", (1.0,), 0, 100)
        state = np.array([1.0, 0.0])
        _, r = envs.env_step(t, state, np.array([0.0]))
        assert r == 0.0

    def test_reach_at_goal_zero_reward(self):
        t = envs.TaskSpec("point-reach-2d", (0.3, -0.2), 0, 50)
        state = np.array([0.3, -0.2])
        nxt, r = envs.env_step(t, state, np.array([0.0, 0.0]))
        np.testing.assert_array_equal(nxt, state)
        assert r == 0.0

    def test_dir_unit_velocity_along_goal(self):
        t = envs.TaskSpec("point-dir-2d", (0.0,), 0, 100)
        state = np.array([0.0, 0.0, 1.0, 0.0])
        _, r = envs.env_step(t, state, np.array([0.0, 0.0]))
        assert r == pytest.approx(1.0)

    def test_reward_bounds(self):
        rng = np.random.default_rng(0)
        bounds = {"point-dir-2d": 2.0, "point-vel-1d": 3.5, "point-reach-2d": 4 * math.sqrt(2)}
        for family, bound in bounds.items():
            t = task_of(family, 1)
            env = envs.Env(t)
            env.reset(seed=3)
            for _ in range(t.horizon):
                tr = env.step(rng.uniform(-1, 1, t.info.d_a))
                assert abs(tr.reward) <= bound + 1e-12

    def test_episode_done_signal(self):
        t = task_of("point-vel-1d")
        env = envs.Env(t)
        env.reset(seed=0)
        for _ in range(t.horizon):
            env.step(np.array([0.5]))
        with pytest.raises(EpisodeDone):
            env.step(np.array([0.5]))

    def test_velocity_invariants(self):
        rng = np.random.default_rng(1)
        t = task_of("point-dir-2d", 2)
        env = envs.Env(t)
        env.reset(seed=1)
        for _ in range(t.horizon):
            tr = env.step(rng.uniform(-1, 1, 2))
            assert np.linalg.norm(tr.next_state[2:]) <= 2.0 + 1e-12
        tv = task_of("point-vel-1d", 3)
        env = envs.Env(tv)
        env.reset(seed=1)
        for _ in range(tv.horizon):
            tr = env.step(rng.uniform(-1, 1, 1))
            assert 0.0 <= tr.next_state[0] <= 3.5


class TestPolicies:
    def test_expert_vel_clipped_proportional(self):
        t = envs.TaskSpec("point-vel-1d", (1.0,), 0, 100)
        a = envs.scripted_policy("expert", t, np.array([0.0, 0.0]), np.random.default_rng(0))
        np.testing.assert_allclose(a, [1.0])

    def test_random_mean_near_zero(self):
        t = task_of("point-dir-2d")
        rng = np.random.default_rng(7)
        draws = np.stack([envs.scripted_policy("random", t, np.zeros(4), rng) for _ in range(10_000)])
        assert np.all(np.abs(draws.mean(axis=0)) < 0.02)

    @pytest.mark.parametrize("family", envs.FAMILIES)
    def test_medium_calibration_fraction(self, family):
        """Medium return lands at ~1/3 of expert on the random..expert scale."""
        tasks = envs.canonical_tasks(family, 6)
        exp = np.mean([envs.scripted_mean_return(t, "expert", 25, 11) for t in tasks])
        med = np.mean([envs.scripted_mean_return(t, "medium", 25, 11) for t in tasks])
        rnd = np.mean([envs.scripted_mean_return(t, "random", 25, 11) for t in tasks])
        frac = (med - rnd) / (exp - rnd)
        assert 0.23 <= frac <= 0.43

    @pytest.mark.parametrize("family", envs.FAMILIES)
    def test_quality_strict_ordering_per_task(self, family):
        for t in envs.canonical_tasks(family, 4):
            exp = envs.scripted_mean_return(t, "expert", 20, 21)
            med = envs.scripted_mean_return(t, "medium", 20, 21)
            rnd = envs.scripted_mean_return(t, "random", 20, 21)
            assert exp > med > rnd, (t.family, t.task_index, exp, med, rnd)


class TestDatasets:
    def test_gradient_mix_tags(self):
        t = task_of("point-vel-1d", 1)
        ds = envs.generate_dataset(t, "gradient", n_episodes=30, seed=4)
        tags = [e.quality for e in ds]
        assert tags[:10] == ["random"] * 10
        assert tags[-10:] == ["expert"] * 10
        assert tags[10:20] == ["medium"] * 10

    def test_same_seed_identical(self):
        t = task_of("point-reach-2d", 2)
        a = envs.generate_dataset(t, "gradient", 9, seed=77)
        b = envs.generate_dataset(t, "gradient", 9, seed=77)
        assert a == b

    @pytest.mark.parametrize("family", envs.FAMILIES)
    def test_expert_slice_beats_random_slice(self, family):
        t = task_of(family, 1)
        ds = envs.generate_dataset(t, "gradient", 30, seed=3)
        mean = lambda eps: np.mean([e.episode_return for e in eps])
        expert = [e for e in ds if e.quality == "expert"]
        random_ = [e for e in ds if e.quality == "random"]
        assert mean(expert) > mean(random_)

    def test_episode_reproducible_from_stored_seed(self):
        t = task_of("point-reach-2d", 0)
        ds = envs.generate_dataset(t, "medium", 3, seed=5)
        ep = ds[1]
        again = envs.rollout_scripted(t, ep.quality, ep.seed)
        assert ep == again


class TestSplits:
    def test_vel_8_2_convention(self):
        train, test = envs.split_tasks("point-vel-1d", 8, 2)
        assert [t.task_index for t in test] == [2, 7]
        params = [t.task_param[0] for t in train] + [t.task_param[0] for t in test]
        np.testing.assert_allclose(sorted(params), np.linspace(0, 3, 10))

    def test_disjoint(self):
        train, test = envs.split_tasks("point-reach-2d", 4, 2)
        assert not ({t.task_index for t in train} & {t.task_index for t in test})

    def test_dir_two_tasks_forward_backward(self):
        train, _ = envs.split_tasks("point-dir-2d", 2, 0)
        assert [t.task_param[0] for t in train] == [0.0, math.pi]

    def test_task_validation(self):
        with pytest.raises(ContractError):
            envs.TaskSpec("point-vel-1d", (3.5,), 0, 100)
        with pytest.raises(ContractError):
            envs.TaskSpec("no-such-family", (0.0,), 0, 100)
