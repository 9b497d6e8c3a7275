"""HTTP service for the external (human) ranking oracle.

The tuning loop runs on a background worker. Each iteration the server
rolls out every candidate prompt server-side (common episode seeds, same
derivation as the automatic online oracle) and publishes the rendered
trajectories; the worker then blocks until a ranking arrives through the
API. The human's ordering is the oracle answer: only candidate indices in
order ever reach the optimizer, never numeric scores.

A session survives restarts: rankings already submitted are persisted and
replayed deterministically, so a resumed session re-presents exactly the
candidates that were pending when the process died.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import dtmodel, envs, zorank
from .errors import ContractError
from .trajdata import PromptSegment, flatten_prompt, unflatten_prompt

SESSION_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SessionConfig:
    iterations: int = 10
    n_candidates: int = 6
    top_k: int = 6
    mu: float = 0.05
    eta: float = 0.03
    seed: int = 0
    episodes_per_candidate: int = 2
    reveal_returns: bool = False
    config_hash: str | None = None


@dataclass
class CandidatePayload:
    index: int
    trajectories: list          # per episode: list of [x, y] points
    mean_return: float          # hidden from the API unless reveal_returns
    episode_returns: list[float]

    def public(self, reveal: bool) -> dict:
        doc = {"index": self.index, "trajectories": self.trajectories}
        if reveal:
            doc["mean_return"] = self.mean_return
            doc["episode_returns"] = self.episode_returns
        return doc


def task_view(task: envs.TaskSpec) -> dict:
    """What a human needs to judge a rollout, per family."""
    view = {"family": task.family, "task_index": task.task_index,
            "horizon": task.horizon, "task_param": list(task.task_param)}
    if task.family == "point-dir-2d":
        u = envs.direction_unit(task.task_param[0])
        view["goal_direction"] = [float(u[0]), float(u[1])]
        view["hint"] = "better rollouts travel far along the goal direction"
    elif task.family == "point-vel-1d":
        view["target_velocity"] = float(task.task_param[0])
        view["hint"] = "better rollouts hold velocity at the dashed target"
    else:
        view["goal_position"] = list(task.task_param)
        view["hint"] = "better rollouts end near the goal marker"
    return view


def _trajectory_points(task: envs.TaskSpec, states: np.ndarray) -> list:
    """Project an episode's states to 2-D polyline points for rendering."""
    if task.family == "point-vel-1d":
        return [[int(t), float(v)] for t, v in enumerate(states[:, 0])]
    return [[float(p[0]), float(p[1])] for p in states[:, :2]]


class _Rendezvous:
    """Single-slot query/answer channel between worker and HTTP handlers."""

    def __init__(self):
        self._cond = threading.Condition()
        self._answer: list[int] | None = None
        self._aborted = False

    def ask(self) -> list[int]:
        with self._cond:
            self._answer = None
            while self._answer is None and not self._aborted:
                self._cond.wait(timeout=0.25)
            if self._aborted:
                raise zorank.OracleError("session aborted")
            return self._answer

    def submit(self, order: list[int]) -> None:
        with self._cond:
            self._answer = list(order)
            self._cond.notify_all()

    def abort(self) -> None:
        with self._cond:
            self._aborted = True
            self._cond.notify_all()


class RankingSession:
    """State machine driving one human-in-the-loop tuning run.

    States: idle (worker busy between queries), awaiting_ranking (query
    open), finished, aborted. At most one query is outstanding; submission
    is atomic first-writer-wins.
    """

    def __init__(
        self,
        model: dtmodel.Model,
        task: envs.TaskSpec,
        initial_prompt: PromptSegment,
        target_rtg: float,
        session_dir,
        config: SessionConfig,
    ):
        if config.n_candidates < 2:
            raise ContractError("need at least two candidates to rank")
        self.model = model
        self.task = task
        self.initial_prompt = initial_prompt
        self.target_rtg = float(target_rtg)
        self.session_dir = Path(session_dir)
        self.config = config
        self.state = "idle"
        self.iteration = 0
        self.candidates: list[CandidatePayload] | None = None
        self.rankings: list[list[int]] = []
        self.return_history: list[float] = []  # top-ranked candidate per iteration
        self.trace: zorank.TuneTrace | None = None
        self.tuned_prompt: PromptSegment | None = None
        self.error: str | None = None
        self._lock = threading.Lock()
        self._rendezvous = _Rendezvous()
        self._worker: threading.Thread | None = None
        self._load_previous()

    # -- persistence -------------------------------------------------------

    def _state_path(self) -> Path:
        return self.session_dir / "session.json"

    def _load_previous(self) -> None:
        path = self._state_path()
        if path.exists():
            doc = json.loads(path.read_text())
            if doc.get("format_version") == SESSION_FORMAT_VERSION:
                self.rankings = [list(r) for r in doc.get("rankings", [])]
                self.return_history = list(doc.get("return_history", []))

    def _persist(self) -> None:
        self.session_dir.mkdir(parents=True, exist_ok=True)
        doc = {
            "kind": "ranking-session",
            "format_version": SESSION_FORMAT_VERSION,
            "state": self.state,
            "iteration": self.iteration,
            "config": asdict(self.config),
            "rankings": self.rankings,
            "return_history": self.return_history,
        }
        self._state_path().write_text(json.dumps(doc, indent=2))

    # -- oracle seen by the tuner ------------------------------------------

    def _tuner_config(self) -> zorank.TunerConfig:
        c = self.config
        return zorank.TunerConfig(
            iterations=c.iterations, n_candidates=c.n_candidates, top_k=c.top_k,
            mu=c.mu, eta=c.eta, seed=c.seed,
            steps_per_value=c.episodes_per_candidate,
        )

    def _evaluate_candidates(self, candidates: np.ndarray, iteration: int):
        template = flatten_prompt(self.initial_prompt)
        prompts = [unflatten_prompt(template.with_x(c)) for c in candidates]
        returns, trajs = dtmodel.rollout_many(
            self.model, prompts, self.task, self.config.episodes_per_candidate,
            self.target_rtg, seed=zorank.rollout_seed(self.config.seed, iteration),
            collect_states=True,
        )
        payloads = []
        for i in range(len(prompts)):
            payloads.append(CandidatePayload(
                index=i,
                trajectories=[_trajectory_points(self.task, trajs[i, j])
                              for j in range(returns.shape[1])],
                mean_return=float(returns[i].mean()),
                episode_returns=[float(r) for r in returns[i]],
            ))
        return payloads

    def _oracle_query(self, candidates: np.ndarray, iteration: int) -> zorank.OracleAnswer:
        if iteration <= len(self.rankings):
            # replay after restart; probes are iteration-seeded so the
            # candidates are identical to the original run
            with self._lock:
                self.iteration = iteration
            return zorank.OracleAnswer(order=list(self.rankings[iteration - 1]))
        payloads = self._evaluate_candidates(candidates, iteration)
        with self._lock:
            self.iteration = iteration
            self.candidates = payloads
            self.state = "awaiting_ranking"
            self._persist()
        order = self._rendezvous.ask()
        with self._lock:
            self.state = "idle"
            self.candidates = None
            self.rankings.append(list(order))
            self.return_history.append(payloads[order[0]].mean_return)
            self._persist()
        return zorank.OracleAnswer(order=list(order))

    # -- worker ------------------------------------------------------------

    def start(self) -> None:
        if self._worker is not None:
            raise ContractError("session already started")
        self._worker = threading.Thread(target=self._run, daemon=True)
        self._worker.start()

    def _run(self) -> None:
        oracle = _SessionOracle(self)
        try:
            tuned, trace = zorank.tune_prompt(
                self.model, self.initial_prompt, oracle, self._tuner_config(),
                task=self.task, target_rtg=self.target_rtg,
            )
            with self._lock:
                self.tuned_prompt = tuned
                self.trace = trace
                self.state = "finished"
                self._persist()
            self._save_outputs(trace, tuned)
        except zorank.TuneAborted as aborted:
            with self._lock:
                self.trace = aborted.trace
                self.state = "aborted"
                self._persist()
            self._save_outputs(aborted.trace, None)
        except Exception as exc:  # surfaced via /api/session
            with self._lock:
                self.error = f"{type(exc).__name__}: {exc}"
                self.state = "aborted"
                self._persist()

    def _save_outputs(self, trace: zorank.TuneTrace, tuned: PromptSegment | None) -> None:
        trace.meta.setdefault("config_hash", self.config.config_hash)
        zorank.save_trace(self.session_dir / "trace.jsonl", trace)
        if tuned is not None:
            from .trajdata import save_flat_prompt

            save_flat_prompt(self.session_dir / "tuned_prompt.json",
                             flatten_prompt(tuned), self.config.config_hash)

    def join(self, timeout: float | None = None) -> None:
        if self._worker is not None:
            self._worker.join(timeout)

    # -- API surface ---------------------------------------------------------

    def session_view(self) -> dict:
        with self._lock:
            return {
                "state": self.state,
                "iteration": self.iteration,
                "total_iterations": self.config.iterations,
                "n_candidates": self.config.n_candidates,
                "top_k": self.config.top_k,
                "reveal_returns": self.config.reveal_returns,
                "task": task_view(self.task),
                "rankings_submitted": len(self.rankings),
                "error": self.error,
            }

    def candidates_view(self) -> list[dict] | None:
        with self._lock:
            if self.state != "awaiting_ranking" or self.candidates is None:
                return None
            return [c.public(self.config.reveal_returns) for c in self.candidates]

    def trace_view(self) -> dict:
        with self._lock:
            doc = {
                "iterations_done": len(self.rankings),
                "total_iterations": self.config.iterations,
                "state": self.state,
            }
            if self.config.reveal_returns:
                doc["return_history"] = list(self.return_history)
            if self.trace is not None:
                doc["meta"] = {k: v for k, v in self.trace.meta.items()
                               if k not in ("config",)}
            return doc

    def submit_ranking(self, order: list[int]) -> tuple[int, str]:
        """Returns (http_status, message)."""
        with self._lock:
            if self.state != "awaiting_ranking":
                return 409, f"no ranking expected in state {self.state!r}"
            c = self.config
            if len(order) != c.top_k:
                return 400, f"expected {c.top_k} indices, got {len(order)}"
            if len(set(order)) != len(order):
                return 400, "duplicate candidate indices"
            if any(not 0 <= i < c.n_candidates for i in order):
                return 400, f"candidate index outside [0, {c.n_candidates})"
            # leave awaiting state before unblocking so a re-post gets 409
            self.state = "idle"
        self._rendezvous.submit(order)
        return 200, "ranking accepted"

    def abort(self) -> None:
        self._rendezvous.abort()


class _SessionOracle:
    def __init__(self, session: RankingSession):
        self._session = session

    def query(self, candidates: np.ndarray, iteration: int) -> zorank.OracleAnswer:
        return self._session._oracle_query(candidates, iteration)


# ---------------------------------------------------------------------------
# HTTP layer


def create_app(session: RankingSession, ui_dir=None):
    app = FastAPI(title="promptdt ranking oracle")

    @app.get("/api/session")
    def get_session():
        return session.session_view()

    @app.get("/api/candidates")
    def get_candidates():
        payload = session.candidates_view()
        if payload is None:
            return JSONResponse({"message": "no query awaiting a ranking"}, status_code=404)
        return {"iteration": session.iteration, "candidates": payload}

    @app.post("/api/ranking")
    async def post_ranking(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"message": "body must be a JSON array of indices"},
                                status_code=400)
        if not isinstance(body, list) or not all(isinstance(i, int) for i in body):
            return JSONResponse({"message": "body must be a JSON array of indices"},
                                status_code=400)
        status, message = session.submit_ranking(body)
        return JSONResponse({"message": message}, status_code=status)

    @app.get("/api/trace")
    def get_trace():
        return session.trace_view()

    @app.post("/api/abort")
    def post_abort():
        session.abort()
        return {"message": "aborting"}

    ui_dir = Path(ui_dir) if ui_dir else default_ui_dir()
    if ui_dir and ui_dir.exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    else:
        @app.get("/")
        def index():
            return {"message": "promptdt ranking service; UI bundle not built",
                    "api": ["/api/session", "/api/candidates", "/api/ranking",
                            "/api/trace", "/api/abort"]}

    return app


def default_ui_dir() -> Path | None:
    candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return candidate if candidate.exists() else None


def run_server(session: RankingSession, port: int = 8763, host: str = "127.0.0.1") -> None:
    import uvicorn

    session.start()
    app = create_app(session)
    uvicorn.run(app, host=host, port=port, log_level="warning")
