"""Pretraining loop and full-model fine-tuning baseline."""

import json

import numpy as np
import pytest

from promptdt import dtmodel, envs, pretrain, trajdata as td
from promptdt.errors import DataError


@pytest.fixture(scope="module")
def vel_task():
    return envs.canonical_tasks("point-vel-1d", 6)[2]


@pytest.fixture(scope="module")
def expert_data(vel_task):
    return envs.generate_dataset(vel_task, "expert", 8, seed=70)


def small_model_cfg(**kw):
    base = dict(d_embed=16, n_layers=1, k_star=3, context_k=8)
    base.update(kw)
    return dtmodel.config_for_family("point-vel-1d", rtg_scale=15.8, **base)


class TestTrainMultitask:
    def test_loss_halves_in_200_steps(self, vel_task, expert_data):
        cfg_m = small_model_cfg(d_embed=32)
        model0 = dtmodel.Model.create(cfg_m, seed=1)
        rng = np.random.default_rng(0)
        probe = pretrain._draw_batch(cfg_m, expert_data, vel_task.task_index,
                                     pretrain.TrainConfig(batch_size=32, seed=1), rng)
        init_loss = dtmodel.dt_loss(model0, probe).item()

        tcfg = pretrain.TrainConfig(iterations=20, steps_per_iteration=10,
                                    batch_size=16, lr=1e-3, seed=1)
        model, rows = pretrain.train_multitask(cfg_m, {vel_task.task_index: expert_data},
                                               [vel_task], tcfg)
        final_loss = dtmodel.dt_loss(model, probe).item()
        assert final_loss < 0.5 * init_loss
        assert len(rows) == 20

    def test_moving_average_loss_non_increasing(self, vel_task, expert_data):
        tcfg = pretrain.TrainConfig(iterations=30, steps_per_iteration=5,
                                    batch_size=8, lr=1e-3, seed=2)
        _, rows = pretrain.train_multitask(small_model_cfg(), {vel_task.task_index: expert_data},
                                           [vel_task], tcfg)
        losses = np.array([r["loss"][str(vel_task.task_index)] for r in rows])
        assert np.all(np.isfinite(losses))
        window = 10
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        assert smooth[-1] <= smooth[0]

    def test_identical_seed_identical_checkpoint_hash(self, vel_task, expert_data):
        tcfg = pretrain.TrainConfig(iterations=3, steps_per_iteration=2,
                                    batch_size=4, seed=33)
        datasets = {vel_task.task_index: expert_data}
        m1, _ = pretrain.train_multitask(small_model_cfg(), datasets, [vel_task], tcfg)
        m2, _ = pretrain.train_multitask(small_model_cfg(), datasets, [vel_task], tcfg)
        assert pretrain.checkpoint_hash(m1) == pretrain.checkpoint_hash(m2)

    def test_empty_dataset_rejected(self, vel_task):
        tcfg = pretrain.TrainConfig(iterations=1, seed=0)
        with pytest.raises(DataError):
            pretrain.train_multitask(small_model_cfg(), {vel_task.task_index: td.EpisodeSet()},
                                     [vel_task], tcfg)

    def test_log_file_is_jsonl(self, vel_task, expert_data, tmp_path):
        log = tmp_path / "train.jsonl"
        tcfg = pretrain.TrainConfig(iterations=2, steps_per_iteration=1,
                                    batch_size=4, seed=3)
        pretrain.train_multitask(small_model_cfg(), {vel_task.task_index: expert_data},
                                 [vel_task], tcfg, log_path=log)
        rows = [json.loads(l) for l in log.read_text().splitlines()]
        assert len(rows) == 2
        assert {"iteration", "loss", "wall_time", "seed"} <= set(rows[0])


class TestFinetuneFull:
    def _model(self, vel_task, expert_data):
        tcfg = pretrain.TrainConfig(iterations=2, steps_per_iteration=2,
                                    batch_size=4, seed=5)
        model, _ = pretrain.train_multitask(small_model_cfg(), {vel_task.task_index: expert_data},
                                            [vel_task], tcfg)
        return model

    def test_zero_steps_is_identity(self, vel_task, expert_data):
        model = self._model(vel_task, expert_data)
        prompt = td.sample_prompt(expert_data, vel_task.task_index, 3,
                                  rng=np.random.default_rng(0))
        tuned = pretrain.finetune_full(model, expert_data, vel_task.task_index,
                                       n_samples=8, steps=0, prompt=prompt)
        assert pretrain.checkpoint_hash(tuned) == pretrain.checkpoint_hash(model)

    def test_finetune_changes_params_not_input_model(self, vel_task, expert_data):
        model = self._model(vel_task, expert_data)
        before = pretrain.checkpoint_hash(model)
        prompt = td.sample_prompt(expert_data, vel_task.task_index, 3,
                                  rng=np.random.default_rng(1))
        tuned = pretrain.finetune_full(model, expert_data, vel_task.task_index,
                                       n_samples=8, steps=5, prompt=prompt, lr=1e-3)
        assert pretrain.checkpoint_hash(model) == before
        assert pretrain.checkpoint_hash(tuned) != before

    def test_sample_restriction_distinct_windows(self, vel_task, expert_data):
        rng = np.random.default_rng(2)
        refs = pretrain.sample_distinct_window_refs(expert_data, vel_task.task_index,
                                                    8, 32, rng)
        assert len(refs) == 32
        assert len({(r.episode, r.start) for r in refs}) == 32

    def test_budget_larger_than_pool_rejected(self, vel_task, expert_data):
        total = pretrain.total_windows(expert_data, vel_task.task_index, 8)
        with pytest.raises(DataError):
            pretrain.sample_distinct_window_refs(expert_data, vel_task.task_index,
                                                 8, total + 1, np.random.default_rng(0))
