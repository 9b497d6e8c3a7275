"""Evaluation harness: normalization, baselines, determinism, ablation rows."""

import numpy as np
import pytest

from promptdt import dtmodel, envs, evaluation, pretrain, trajdata as td, zorank
from promptdt.errors import DegenerateBaselineError


class TestNormalization:
    def test_anchors(self):
        b = evaluation.family_baseline("point-vel-1d")
        assert evaluation.normalized_score(b.random_return, "point-vel-1d") == 0.0
        assert evaluation.normalized_score(b.expert_return, "point-vel-1d") == pytest.approx(100.0)

    def test_affine_order_preserving(self):
        b = evaluation.family_baseline("point-reach-2d")
        xs = np.linspace(b.random_return, b.expert_return, 7)
        scores = [evaluation.normalized_score(float(x), "point-reach-2d") for x in xs]
        assert all(s2 > s1 for s1, s2 in zip(scores, scores[1:]))
        # affine: equal spacing preserved
        diffs = np.diff(scores)
        np.testing.assert_allclose(diffs, diffs[0])

    def test_degenerate_baseline(self):
        entry = evaluation.BaselineEntry("point-vel-1d", -3.0, -3.0, 10, 0)
        with pytest.raises(DegenerateBaselineError):
            evaluation.normalized_score(1.0, "point-vel-1d", entry)

    def test_baseline_table_round_trip(self, tmp_path):
        entries = [evaluation.family_baseline(f) for f in envs.FAMILIES]
        path = tmp_path / "baselines.json"
        evaluation.save_baselines(path, entries)
        loaded = evaluation.load_baselines(path)
        for e in entries:
            assert loaded[e.family] == e


@pytest.fixture(scope="module")
def eval_setup():
    task = envs.canonical_tasks("point-vel-1d", 6)[1]
    data = envs.generate_dataset(task, "gradient", 9, seed=80)
    cfg = dtmodel.config_for_family("point-vel-1d", rtg_scale=15.8,
                                    d_embed=16, n_layers=1, k_star=3, context_k=6)
    model = dtmodel.Model.create(cfg, seed=8)
    prompt = td.sample_prompt(data, task.task_index, 3, rng=np.random.default_rng(0))
    return model, prompt, task, data


class TestEvaluate:
    def test_deterministic_env_zero_std(self, eval_setup):
        model, prompt, task, _ = eval_setup
        res = evaluation.evaluate(model, prompt, task, n_episodes=5, seed=3)
        assert res.std == 0.0
        assert res.n_episodes == 5

    def test_episode_count_contract(self, eval_setup):
        model, prompt, task, _ = eval_setup
        res = evaluation.evaluate(model, prompt, task, n_episodes=50, seed=4)
        assert res.n_episodes == 50

    def test_reproducible(self, eval_setup):
        model, prompt, task, _ = eval_setup
        a = evaluation.evaluate(model, prompt, task, n_episodes=4, seed=9)
        b = evaluation.evaluate(model, prompt, task, n_episodes=4, seed=9)
        np.testing.assert_array_equal(a.returns, b.returns)


def test_stateful_env_cross_checks_batched_rollout():
    """Independent oracle: stepping the stateful Env one action at a time
    reproduces the batch-generated episode's rewards exactly."""
    task = envs.canonical_tasks("point-reach-2d", 6)[3]
    ds = envs.generate_dataset(task, "expert", 2, seed=90)
    ep = ds[0]
    env = envs.Env(task)
    state = env.reset(seed=None)
    env._state = ep.states[0].copy()  # align the seeded start
    total = 0.0
    for t in range(ep.length):
        tr = env.step(ep.actions[t])
        total += tr.reward
        np.testing.assert_allclose(tr.reward, ep.rewards[t], atol=1e-12)
        np.testing.assert_allclose(tr.next_state,
                                   ep.states[t + 1] if t + 1 < ep.length else tr.next_state,
                                   atol=1e-12)
    assert total == pytest.approx(ep.episode_return)


@pytest.fixture(scope="module")
def ablation_setup():
    task = envs.canonical_tasks("point-vel-1d", 6)[2]
    data = envs.generate_dataset(task, "gradient", 12, seed=81)
    cfg = dtmodel.config_for_family("point-vel-1d", rtg_scale=15.8,
                                    d_embed=16, n_layers=1, k_star=3, context_k=6)
    model = dtmodel.Model.create(cfg, seed=9)
    tune_cfg = zorank.TunerConfig(iterations=2, n_candidates=3, top_k=3,
                                  steps_per_value=1, batch_size=4)
    return model, task, data, tune_cfg


class TestAblationHarness:
    def test_samples_budget_equality(self, ablation_setup):
        model, task, data, tune_cfg = ablation_setup
        rows = evaluation.ablate_samples(model, task, data, sizes=[4, "full"],
                                         seeds=[0], tune_cfg=tune_cfg,
                                         ft_steps=2, n_eval_episodes=1)
        assert len(rows) == 4  # 2 sizes x 2 methods
        by_size = {}
        for r in rows:
            by_size.setdefault(r["size"], set()).add(r["n_samples"])
        for size, budgets in by_size.items():
            assert len(budgets) == 1  # both methods log identical n_samples

    def test_prompt_init_grid_shape(self, ablation_setup):
        model, task, data, tune_cfg = ablation_setup
        rows = evaluation.ablate_prompt_init(model, task, data, seeds=[0],
                                             tune_cfg=tune_cfg, n_samples=4,
                                             ft_steps=1, n_eval_episodes=1)
        assert len(rows) == 18  # 3x3 grid x 2 methods
        for method in ("ptdt-offline", "prompt-dt-ft"):
            cells = {(r["prompt_quality"], r["dataset_quality"])
                     for r in rows if r["method"] == method}
            assert len(cells) == 9

    def test_prompt_length_dx_scaling(self, ablation_setup):
        model, task, data, tune_cfg = ablation_setup
        train_cfg = pretrain.TrainConfig(iterations=1, steps_per_iteration=1,
                                         batch_size=4, seed=0)
        rows = evaluation.ablate_prompt_length(
            "point-vel-1d", k_stars=[2, 5], seeds=[0],
            model_overrides=dict(d_embed=16, n_layers=1, context_k=6),
            train_cfg=train_cfg, tune_cfg=tune_cfg,
            episodes_per_task=6, n_samples=4, n_eval_episodes=1)
        d_x = {r["k_star"]: r["d_x"] for r in rows}
        assert d_x[2] * 5 == d_x[5] * 2  # d_x linear in K*


class TestPlots:
    def test_plot_each_kind(self, tmp_path):
        rows = []
        for seed in (0, 1):
            for size in (4, 8):
                for method in ("ptdt-offline", "prompt-dt-ft"):
                    rows.append({"kind": "samples", "method": method, "n_samples": size,
                                 "seed": seed, "normalized": 50.0 + size + seed})
        for pq in envs.QUALITIES:
            for dq in envs.QUALITIES:
                for method in ("ptdt-offline", "prompt-dt-ft"):
                    rows.append({"kind": "prompt-init", "method": method,
                                 "prompt_quality": pq, "dataset_quality": dq,
                                 "normalized": 40.0})
        for k in (2, 5, 10):
            for method in ("prompt-dt", "ptdt-offline"):
                rows.append({"kind": "prompt-length", "method": method,
                             "k_star": k, "normalized": 60.0 + k})
        for kind in ("samples", "prompt-init", "prompt-length"):
            out = evaluation.plot_results(rows, kind, tmp_path / f"{kind}.svg")
            assert out.exists()
            assert out.read_text().lstrip().startswith("<?xml")
