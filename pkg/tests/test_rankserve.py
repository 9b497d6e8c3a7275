"""Ranking service: API contract, state machine, resume, and the protocol
round trip against the automatic online oracle."""

import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from promptdt import dtmodel, envs, rankserve, trajdata as td, zorank


def wait_for_state(session, state, timeout=60.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if session.session_view()["state"] == state:
            return True
        time.sleep(0.02)
    return False


@pytest.fixture()
def setup():
    task = envs.canonical_tasks("point-reach-2d", 6)[1]
    data = envs.generate_dataset(task, "gradient", 9, seed=60)
    cfg = dtmodel.config_for_family("point-reach-2d", rtg_scale=6.0,
                                    d_embed=16, n_layers=1, k_star=3, context_k=5)
    model = dtmodel.Model.create(cfg, seed=6)
    prompt = td.sample_prompt(data, task.task_index, 3, rng=np.random.default_rng(2))
    return model, task, prompt


def make_session(setup, tmp_path, **overrides):
    model, task, prompt = setup
    kwargs = dict(iterations=2, n_candidates=4, top_k=4, mu=0.05, eta=0.03,
                  seed=21, episodes_per_candidate=2, reveal_returns=True)
    kwargs.update(overrides)
    return rankserve.RankingSession(
        model=model, task=task, initial_prompt=prompt, target_rtg=-5.0,
        session_dir=tmp_path / "session", config=rankserve.SessionConfig(**kwargs),
    )


def rank_by_return(candidates):
    order = sorted(candidates, key=lambda c: (-c["mean_return"], c["index"]))
    return [c["index"] for c in order]


class TestApiContract:
    def test_session_metadata(self, setup, tmp_path):
        session = make_session(setup, tmp_path)
        client = TestClient(rankserve.create_app(session))
        doc = client.get("/api/session").json()
        assert doc["state"] == "idle"
        assert doc["n_candidates"] == 4 and doc["top_k"] == 4
        assert doc["total_iterations"] == 2
        assert doc["task"]["family"] == "point-reach-2d"
        assert "goal_position" in doc["task"]

    def test_candidates_404_when_idle(self, setup, tmp_path):
        session = make_session(setup, tmp_path)
        client = TestClient(rankserve.create_app(session))
        assert client.get("/api/candidates").status_code == 404

    def test_ranking_409_when_idle(self, setup, tmp_path):
        session = make_session(setup, tmp_path)
        client = TestClient(rankserve.create_app(session))
        assert client.post("/api/ranking", json=[0, 1, 2, 3]).status_code == 409

    def test_full_session_flow(self, setup, tmp_path):
        session = make_session(setup, tmp_path)
        client = TestClient(rankserve.create_app(session))
        session.start()
        try:
            for expected_iter in (1, 2):
                assert wait_for_state(session, "awaiting_ranking")
                doc = client.get("/api/candidates").json()
                assert doc["iteration"] == expected_iter
                cands = doc["candidates"]
                assert len(cands) == 4
                assert all(len(c["trajectories"]) == 2 for c in cands)  # episodes
                # duplicate index -> 400, nothing consumed
                assert client.post("/api/ranking", json=[0, 0, 1, 2]).status_code == 400
                # out of range -> 400
                assert client.post("/api/ranking", json=[0, 1, 2, 9]).status_code == 400
                # wrong length -> 400
                assert client.post("/api/ranking", json=[0, 1]).status_code == 400
                resp = client.post("/api/ranking", json=rank_by_return(cands))
                assert resp.status_code == 200
                # idempotency: identical re-post for the resolved iteration
                assert client.post("/api/ranking", json=rank_by_return(cands)).status_code == 409
            assert wait_for_state(session, "finished")
            trace = client.get("/api/trace").json()
            assert trace["iterations_done"] == 2
            assert len(trace["return_history"]) == 2
            assert (tmp_path / "session" / "trace.jsonl").exists()
            assert (tmp_path / "session" / "tuned_prompt.json").exists()
        finally:
            session.abort()

    def test_returns_hidden_by_default(self, setup, tmp_path):
        session = make_session(setup, tmp_path, reveal_returns=False)
        client = TestClient(rankserve.create_app(session))
        session.start()
        try:
            assert wait_for_state(session, "awaiting_ranking")
            cands = client.get("/api/candidates").json()["candidates"]
            assert all("mean_return" not in c for c in cands)
            trace = client.get("/api/trace").json()
            assert "return_history" not in trace
        finally:
            session.abort()

    def test_abort_persists_partial_trace(self, setup, tmp_path):
        session = make_session(setup, tmp_path)
        client = TestClient(rankserve.create_app(session))
        session.start()
        assert wait_for_state(session, "awaiting_ranking")
        cands = client.get("/api/candidates").json()["candidates"]
        client.post("/api/ranking", json=rank_by_return(cands))
        assert wait_for_state(session, "awaiting_ranking")
        client.post("/api/abort")
        assert wait_for_state(session, "aborted")
        session.join(10)
        trace = zorank.load_trace(tmp_path / "session" / "trace.jsonl")
        assert len(trace.rows) == 1  # one resolved iteration

    def test_permutation_example_dag(self):
        dag = zorank.build_dag(3, 3, order=[2, 0, 1])
        assert set(dag.edges) == {(2, 0), (2, 1), (0, 1)}


class TestResume:
    def test_restart_mid_iteration_shows_same_candidates(self, setup, tmp_path):
        s1 = make_session(setup, tmp_path)
        client1 = TestClient(rankserve.create_app(s1))
        s1.start()
        assert wait_for_state(s1, "awaiting_ranking")
        first = client1.get("/api/candidates").json()["candidates"]
        client1.post("/api/ranking", json=rank_by_return(first))
        assert wait_for_state(s1, "awaiting_ranking")
        pending = client1.get("/api/candidates").json()
        s1.abort()
        s1.join(10)

        # new process over the same session dir: replays ranking 1, then
        # re-presents iteration 2 with identical candidates
        s2 = make_session(setup, tmp_path)
        client2 = TestClient(rankserve.create_app(s2))
        s2.start()
        try:
            assert wait_for_state(s2, "awaiting_ranking")
            resumed = client2.get("/api/candidates").json()
            assert resumed["iteration"] == pending["iteration"] == 2
            assert resumed["candidates"] == pending["candidates"]
        finally:
            s2.abort()
            s2.join(10)


class TestProtocolRoundTrip:
    def test_true_return_client_matches_online_oracle(self, setup, tmp_path):
        """A scripted client ranking by revealed true return reproduces the
        automatic online-oracle trajectory iteration by iteration."""
        model, task, prompt = setup
        cfg = zorank.TunerConfig(iterations=3, n_candidates=4, top_k=4, mu=0.05,
                                 eta=0.03, seed=77, steps_per_value=2)
        _, auto_trace = zorank.tune_prompt(model, prompt, "online", cfg,
                                           task=task, target_rtg=-5.0)

        session = make_session(setup, tmp_path, iterations=3, seed=77)
        client = TestClient(rankserve.create_app(session))
        session.start()
        for _ in range(3):
            assert wait_for_state(session, "awaiting_ranking")
            cands = client.get("/api/candidates").json()["candidates"]
            assert client.post("/api/ranking", json=rank_by_return(cands)).status_code == 200
        assert wait_for_state(session, "finished")
        session.join(10)

        human_trace = zorank.load_trace(tmp_path / "session" / "trace.jsonl")
        assert len(human_trace.rows) == len(auto_trace.rows) == 3
        for auto_row, human_row in zip(auto_trace.rows, human_trace.rows):
            assert auto_row["ranking"] == human_row["ranking"]
            assert auto_row["x"] == human_row["x"]  # bitwise identical iterates
