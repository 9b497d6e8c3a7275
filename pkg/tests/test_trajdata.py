"""Trajectory data model: rtg, prompt sampling, assembly, flattening, IO."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptdt import envs, trajdata as td
from promptdt.errors import ContractError, DataError, ParseError


@pytest.fixture(scope="module")
def vel_dataset():
    task = envs.canonical_tasks("point-vel-1d", 6)[2]
    return envs.generate_dataset(task, "gradient", 12, seed=101)


class TestRtg:
    def test_suffix_sum(self):
        np.testing.assert_array_equal(td.compute_rtg([1.0, 2.0, 3.0]), [6.0, 5.0, 3.0])

    def test_zeros(self):
        np.testing.assert_array_equal(td.compute_rtg([0.0, 0.0]), [0.0, 0.0])

    def test_empty(self):
        assert td.compute_rtg([]).shape == (0,)

    @given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=50))
    def test_recurrence_property(self, rewards):
        rtg = td.compute_rtg(rewards)
        assert rtg[-1] == rewards[-1]
        for t in range(len(rewards) - 1):
            assert rtg[t] == rewards[t] + rtg[t + 1]


class TestPromptSampling:
    def test_window_in_bounds(self, vel_dataset):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = td.sample_prompt(vel_dataset, 2, 5, rng=rng)
            assert p.k_star == 5
            assert 0 <= p.timesteps[0] <= 95
            np.testing.assert_array_equal(p.timesteps, np.arange(p.timesteps[0], p.timesteps[0] + 5))

    def test_quality_filter(self, vel_dataset):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = td.sample_prompt(vel_dataset, 2, 5, quality_filter="expert", rng=rng)
            assert vel_dataset[p.source_episode].quality == "expert"

    def test_seeded_determinism(self, vel_dataset):
        a = td.sample_prompt(vel_dataset, 2, 5, rng=np.random.default_rng(42))
        b = td.sample_prompt(vel_dataset, 2, 5, rng=np.random.default_rng(42))
        assert a == b

    def test_no_qualifying_episode(self, vel_dataset):
        with pytest.raises(DataError):
            td.sample_prompt(vel_dataset, 99, 5, rng=np.random.default_rng(0))

    def test_prompt_rtg_comes_from_episode(self, vel_dataset):
        rng = np.random.default_rng(3)
        p = td.sample_prompt(vel_dataset, 2, 4, rng=rng)
        ep = vel_dataset[p.source_episode]
        start = int(p.timesteps[0])
        np.testing.assert_array_equal(p.rtg, ep.rtg[start : start + 4])


class TestAssembly:
    def _prompt(self, k_star=5, d_s=2, d_a=1):
        rng = np.random.default_rng(5)
        return td.PromptSegment(
            rtg=rng.standard_normal(k_star),
            states=rng.standard_normal((k_star, d_s)),
            actions=rng.standard_normal((k_star, d_a)),
            timesteps=np.arange(10, 10 + k_star, dtype=np.int64),
            source_episode=0,
        )

    def _history(self, h, d_s=2, d_a=1, drop_last_action=False):
        rng = np.random.default_rng(6)
        return td.History(
            states=rng.standard_normal((h, d_s)),
            actions=rng.standard_normal((h - 1 if drop_last_action else h, d_a)),
            rtg=rng.standard_normal(h),
            timesteps=np.arange(h, dtype=np.int64),
        )

    def test_full_history_token_count(self):
        batch = td.assemble_input(self._prompt(), self._history(20), context_k=20)
        assert batch.n_steps == 25  # 3 * 25 = 75 tokens
        assert batch.step_mask.sum() == 25

    def test_short_history_left_padded(self):
        batch = td.assemble_input(self._prompt(), self._history(1), context_k=20)
        assert batch.step_mask.sum() == 6  # 5 prompt + 1 history -> 18 real tokens
        # padding occupies the start of the history block
        np.testing.assert_array_equal(batch.step_mask[0, 5:24], np.zeros(19))
        assert batch.step_mask[0, 24] == 1.0

    def test_prompt_precedes_history(self):
        p = self._prompt()
        batch = td.assemble_input(p, self._history(20), context_k=20)
        np.testing.assert_allclose(batch.rtg[0, :5], p.rtg.astype(np.float32))
        np.testing.assert_allclose(batch.states[0, :5], p.states.astype(np.float32))

    def test_loss_mask_excludes_prompt_and_padding(self):
        batch = td.assemble_input(self._prompt(), self._history(3), context_k=20)
        assert batch.loss_mask[0, :5].sum() == 0
        assert batch.loss_mask.sum() == 3

    def test_empty_history_rejected(self):
        with pytest.raises(ContractError):
            td.assemble_input(self._prompt(), self._history(1).__class__(
                states=np.zeros((0, 2)), actions=np.zeros((0, 1)),
                rtg=np.zeros(0), timesteps=np.zeros(0, dtype=np.int64)), context_k=20)

    def test_absent_final_action_zero_filled(self):
        batch = td.assemble_input(self._prompt(), self._history(4, drop_last_action=True), context_k=20)
        np.testing.assert_array_equal(batch.actions[0, -1], np.zeros(1, dtype=np.float32))
        assert batch.step_mask[0, -1] == 1.0

    def test_promptless_assembly(self):
        batch = td.assemble_input(None, self._history(4), context_k=20)
        assert batch.n_steps == 20
        assert batch.k_star == 0

    def test_deterministic(self):
        a = td.assemble_input(self._prompt(), self._history(7), context_k=20)
        b = td.assemble_input(self._prompt(), self._history(7), context_k=20)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.loss_mask, b.loss_mask)


class TestFlatten:
    def _prompt_for(self, family, k_star, seed=0):
        d_s, d_a = envs.family_dims(family)
        rng = np.random.default_rng(seed)
        return td.PromptSegment(
            rtg=rng.standard_normal(k_star),
            states=rng.standard_normal((k_star, d_s)),
            actions=rng.standard_normal((k_star, d_a)),
            timesteps=np.arange(k_star, dtype=np.int64),
            source_episode=3,
        )

    def test_dx_formula(self):
        p = self._prompt_for("point-dir-2d", 5)  # d_r=1, d_s=4, d_a=2
        flat = td.flatten_prompt(p)
        assert flat.layout.d_x == (1 + 4 + 2) * 5 == len(flat.x)

    def test_order_rtg_first_action_last(self):
        p = self._prompt_for("point-vel-1d", 3)
        flat = td.flatten_prompt(p)
        assert flat.x[0] == p.rtg[0]
        assert flat.x[-1] == p.actions[-1, -1]
        # second step's rtg sits right after the first step's action block
        assert flat.x[1 + 2 + 1] == p.rtg[1]

    @pytest.mark.parametrize("family", envs.FAMILIES)
    @pytest.mark.parametrize("k_star", [2, 5, 10])
    def test_bijection_all_layouts(self, family, k_star):
        p = self._prompt_for(family, k_star, seed=k_star)
        roundtrip = td.unflatten_prompt(td.flatten_prompt(p))
        assert roundtrip == p

    @given(st.integers(0, 2), st.integers(1, 8), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_bijection_property(self, fam_idx, k_star, seed):
        p = self._prompt_for(envs.FAMILIES[fam_idx], k_star, seed=seed)
        assert td.unflatten_prompt(td.flatten_prompt(p)) == p

    def test_length_mismatch(self):
        p = self._prompt_for("point-vel-1d", 2)
        flat = td.flatten_prompt(p)
        from promptdt.errors import ShapeError
        with pytest.raises(ShapeError):
            td.FlatPrompt(flat.x[:-1], flat.layout, flat.timesteps, flat.source_episode)


class TestIO:
    def test_round_trip(self, vel_dataset, tmp_path):
        path = tmp_path / "data.jsonl"
        td.save_episodes(path, vel_dataset)
        loaded = td.load_episodes(path)
        assert loaded.episodes == vel_dataset.episodes
        # byte-identical on re-save
        td.save_episodes(tmp_path / "again.jsonl", loaded)
        assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()

    def test_truncated_line_reports_position(self, vel_dataset, tmp_path):
        path = tmp_path / "data.jsonl"
        td.save_episodes(path, vel_dataset)
        text = path.read_text().splitlines()
        (tmp_path / "broken.jsonl").write_text("\n".join(text[:3]) + "\n" + text[3][: len(text[3]) // 2])
        with pytest.raises(ParseError) as exc:
            td.load_episodes(tmp_path / "broken.jsonl")
        assert exc.value.line_no == 4

    def test_empty_file_is_empty_set(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert len(td.load_episodes(path)) == 0

    def test_missing_field(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"task_index": 0, "family": "point-vel-1d"}\n')
        with pytest.raises(ParseError):
            td.load_episodes(path)

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "old.jsonl"
        path.write_text('{"kind": "episodeset", "format_version": 99}\n')
        with pytest.raises(ParseError):
            td.load_episodes(path)
