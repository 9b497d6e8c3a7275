"""Rank-oracle zeroth-order prompt tuning.

The optimizer sees the objective only through an (m, k) ranking oracle:
given m query points it learns which k are best, in order, and nothing
else. Each iteration perturbs the current point with m fresh Gaussian
probes, asks the oracle to rank the perturbed candidates, expands the
answer into a better-than DAG, and averages probe differences over the
DAG's edges to get a descent direction:

    g = (1/|E|) * sum_{(i,j) in E} (xi_j - xi_i),    x <- x - eta * g

Only the ordering ever reaches the update, so any strictly increasing
transform of the underlying values changes nothing, and a human can stand
in for the oracle (see :mod:`promptdt.rankserve`).

Three oracles are provided: offline action-prediction loss on a fixed set
of evaluation windows, online negated episodic return with common random
seeds across candidates, and an external rendezvous for human rankings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import dtmodel, envs
from .errors import ContractError, DataError, ParseError
from .trajdata import (
    EpisodeSet,
    FlatPrompt,
    PromptSegment,
    SequenceBatch,
    assemble_training_batch,
    flatten_prompt,
    sample_window_refs,
    unflatten_prompt,
)

TRACE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TunerConfig:
    """Knobs of the ranking-oracle tuner.

    `steps_per_value` bounds the work behind one oracle value: evaluation
    batches for the offline oracle, rollout episodes for the online one.
    """

    iterations: int = 20        # T
    n_candidates: int = 15      # m
    top_k: int = 15             # k
    mu: float = 0.05
    eta: float = 0.03
    seed: int = 0
    steps_per_value: int = 8
    batch_size: int = 32
    resample_windows: bool = False
    trace_eval_episodes: int = 0

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_candidates:
            raise ContractError("need 1 <= k <= m")
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")
        if self.mu < 0:
            raise ContractError("mu must be >= 0")
        if self.eta <= 0:
            raise ContractError("eta must be > 0")


@dataclass(frozen=True)
class RankingDag:
    """Better-than relations implied by one oracle answer.

    Edge (i, j) means candidate i ranked strictly better (lower objective)
    than candidate j. For a full ranking |E| = m(m-1)/2; for a k-prefix
    ranking the ranked candidates also dominate every unranked one.
    """

    n_nodes: int
    edges: tuple[tuple[int, int], ...]
    partial: bool

    @property
    def n_edges(self) -> int:
        return len(self.edges)


@dataclass
class OracleAnswer:
    order: list[int]                 # k best candidate indices, best first
    values: list[float] | None = None  # numeric oracle values (diagnostics only)
    ties: int = 0


class RankingOracle(Protocol):
    def query(self, candidates: np.ndarray, iteration: int) -> OracleAnswer: ...


class OracleError(ContractError):
    """An oracle could not produce an answer; tuning aborts."""


@dataclass
class TuneTrace:
    """Per-iteration tuning record plus run-level accounting."""

    meta: dict
    rows: list[dict] = field(default_factory=list)

    @property
    def total_oracle_calls(self) -> int:
        return int(self.meta.get("total_oracle_calls", 0))


class TuneAborted(Exception):
    """Tuning stopped early; carries the state so far."""

    def __init__(self, reason: str, x: np.ndarray, trace: TuneTrace):
        super().__init__(reason)
        self.x = x
        self.trace = trace


# ---------------------------------------------------------------------------
# estimator pieces


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Probe stream of one iteration, stable under resume."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(iteration), 0x9E37]))


def rollout_seed(seed: int, iteration: int) -> int:
    """Episode seed shared by all candidates of one online oracle query."""
    return int(np.random.SeedSequence([int(seed), int(iteration), 0x51DE]).generate_state(1)[0])


def perturb_candidates(
    x_prev: np.ndarray, cfg: TunerConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """m candidates x_prev + mu * xi with fresh iid standard-normal probes.

    x_prev itself is not among the candidates. Returns (candidates, probes),
    both (m, d)."""
    d = len(x_prev)
    probes = rng.standard_normal((cfg.n_candidates, d))
    return x_prev[None, :] + cfg.mu * probes, probes


def rank_values(values: Sequence[float], k: int) -> tuple[list[int], int]:
    """Indices of the k smallest values, best first; ties broken by index.

    Also reports how many adjacent sorted pairs were exact ties."""
    values = np.asarray(values, dtype=np.float64)
    order = np.lexsort((np.arange(len(values)), values))
    ranked = order[:k].tolist()
    ties = int(np.sum(np.diff(values[order]) == 0.0))
    return [int(i) for i in ranked], ties


def build_dag(
    m: int, k: int, *, values: Sequence[float] | None = None, order: Sequence[int] | None = None
) -> RankingDag:
    """Expand an (m, k) oracle answer into its implied edge set.

    Give either numeric `values` (ranked internally, index tie-break) or an
    explicit `order` of k distinct indices, best first. Edges: every pair
    within the ranked prefix, plus (ranked, unranked) for all combinations.
    """
    if (values is None) == (order is None):
        raise ContractError("build_dag needs exactly one of values / order")
    if values is not None:
        if len(values) != m:
            raise ContractError(f"expected {m} values, got {len(values)}")
        order, _ = rank_values(values, k)
        partial = k < m
    else:
        order = [int(i) for i in order]
        if len(order) != k:
            raise ContractError(f"expected a ranking of {k} indices, got {len(order)}")
        if len(set(order)) != len(order):
            raise ContractError("ranking contains duplicate candidate indices")
        if any(not 0 <= i < m for i in order):
            raise ContractError(f"ranking index outside [0, {m})")
        partial = k < m
    ranked = list(order)
    unranked = [i for i in range(m) if i not in set(ranked)]
    edges: list[tuple[int, int]] = []
    for a in range(len(ranked)):
        for b in range(a + 1, len(ranked)):
            edges.append((ranked[a], ranked[b]))
        for u in unranked:
            edges.append((ranked[a], u))
    return RankingDag(n_nodes=m, edges=tuple(edges), partial=partial)


def estimate_gradient(dag: RankingDag, probes: np.ndarray) -> tuple[np.ndarray, bool]:
    """Average probe difference over DAG edges: (1/|E|) sum (xi_j - xi_i).

    Independent of mu by construction. An empty edge set (everything tied)
    yields a zero vector flagged as a no-op."""
    if probes.shape[0] != dag.n_nodes:
        raise ContractError(f"{probes.shape[0]} probes for {dag.n_nodes} nodes")
    if dag.n_edges == 0:
        return np.zeros(probes.shape[1]), True
    better = np.fromiter((i for i, _ in dag.edges), dtype=np.int64, count=dag.n_edges)
    worse = np.fromiter((j for _, j in dag.edges), dtype=np.int64, count=dag.n_edges)
    g = (probes[worse] - probes[better]).sum(axis=0) / dag.n_edges
    return g, False


# ---------------------------------------------------------------------------
# optimization loop


def zo_rank_sgd(
    oracle: RankingOracle,
    x0: np.ndarray,
    cfg: TunerConfig,
    on_iteration: Callable[[int, np.ndarray, dict], None] | None = None,
) -> tuple[np.ndarray, list[dict]]:
    """Run T iterations of rank-based descent from x0.

    Each iteration costs exactly m oracle evaluations (one (m, k) query).
    The returned rows record candidates' values (numeric oracles only), the
    ranking, estimated-gradient norm, and the post-update point. An oracle
    failure raises :class:`TuneAborted` with rows so far preserved.
    """
    x = np.array(x0, dtype=np.float64)
    rows: list[dict] = []
    for t in range(1, cfg.iterations + 1):
        rng = iteration_rng(cfg.seed, t)
        candidates, probes = perturb_candidates(x, cfg, rng)
        try:
            answer = oracle.query(candidates, t)
        except OracleError as exc:
            raise TuneAborted(
                str(exc), x,
                TuneTrace(meta={"aborted_at": t, "total_oracle_calls": (t - 1) * cfg.n_candidates},
                          rows=rows),
            ) from exc
        dag = build_dag(cfg.n_candidates, cfg.top_k, order=answer.order)
        g, noop = estimate_gradient(dag, probes)
        x = x - cfg.eta * g
        row = {
            "iteration": t,
            "x": x.tolist(),
            "ranking": list(answer.order),
            "values": None if answer.values is None else [float(v) for v in answer.values],
            "grad_norm": float(np.linalg.norm(g)),
            "ties": answer.ties,
            "noop": bool(noop),
        }
        if on_iteration is not None:
            on_iteration(t, x, row)
        rows.append(row)
    return x, rows


# ---------------------------------------------------------------------------
# oracles


class FunctionOracle:
    """Numeric oracle over a plain vector function (tests, calibration)."""

    def __init__(self, fn: Callable[[np.ndarray], float], top_k: int):
        self.fn = fn
        self.top_k = top_k
        self.n_evaluations = 0

    def query(self, candidates: np.ndarray, iteration: int) -> OracleAnswer:
        values = [float(self.fn(c)) for c in candidates]
        self.n_evaluations += len(values)
        order, ties = rank_values(values, self.top_k)
        return OracleAnswer(order=order, values=values, ties=ties)


class OfflineLossOracle:
    """Action-prediction MSE of the model with each candidate prompt.

    The evaluation windows come from the target task's fine-tuning set and
    are fixed once per run (every candidate, every iteration sees the same
    windows) unless `resample_windows` asks for per-iteration redraws. The
    number of windows is capped by both the sample budget and
    steps_per_value * batch_size.
    """

    def __init__(
        self,
        model: dtmodel.Model,
        finetune_set: EpisodeSet,
        task_index: int,
        n_samples: int,
        cfg: TunerConfig,
        template: FlatPrompt,
    ):
        if len(finetune_set) == 0:
            raise DataError("empty fine-tuning set")
        self.model = model
        self.dataset = finetune_set
        self.task_index = task_index
        self.cfg = cfg
        self.template = template
        self.n_windows = min(int(n_samples), cfg.steps_per_value * cfg.batch_size)
        if self.n_windows < 1:
            raise ContractError("need at least one evaluation window")
        self._fixed_refs = self._draw_refs(np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xAFF])))
        self.n_evaluations = 0

    def _draw_refs(self, rng):
        return sample_window_refs(self.dataset, self.task_index, self.model.cfg.context_k,
                                  self.n_windows, rng)

    def _window_batch(self, prompt: PromptSegment, refs) -> SequenceBatch:
        return assemble_training_batch(self.dataset, refs, [prompt] * len(refs),
                                       self.model.cfg.context_k)

    def value(self, x: np.ndarray, refs=None) -> float:
        refs = refs if refs is not None else self._fixed_refs
        prompt = unflatten_prompt(self.template.with_x(x))
        loss = dtmodel.dt_loss(self.model, self._window_batch(prompt, refs))
        return float(loss.item())

    def query(self, candidates: np.ndarray, iteration: int) -> OracleAnswer:
        refs = self._fixed_refs
        if self.cfg.resample_windows:
            refs = self._draw_refs(np.random.default_rng(
                np.random.SeedSequence([self.cfg.seed, 0xAFF, iteration])))
        values = [self.value(c, refs) for c in candidates]
        self.n_evaluations += len(values)
        order, ties = rank_values(values, self.cfg.top_k)
        return OracleAnswer(order=order, values=values, ties=ties)


class OnlineReturnOracle:
    """Negated mean episodic return of each candidate prompt.

    Candidates within one query share episode seeds (common random numbers),
    so rankings compare like with like. steps_per_value sets the episode
    count per candidate.
    """

    def __init__(
        self,
        model: dtmodel.Model,
        task: envs.TaskSpec,
        target_rtg: float,
        cfg: TunerConfig,
        template: FlatPrompt,
        episodes_per_candidate: int | None = None,
    ):
        self.model = model
        self.task = task
        self.target_rtg = float(target_rtg)
        self.cfg = cfg
        self.template = template
        self.n_episodes = int(episodes_per_candidate or cfg.steps_per_value)
        self.n_evaluations = 0
        self.last_returns: np.ndarray | None = None
        self.last_trajectories: np.ndarray | None = None

    def evaluate_candidates(self, candidates: np.ndarray, iteration: int,
                            collect_states: bool = False) -> np.ndarray:
        prompts = [unflatten_prompt(self.template.with_x(c)) for c in candidates]
        returns, trajs = dtmodel.rollout_many(
            self.model, prompts, self.task, self.n_episodes, self.target_rtg,
            seed=rollout_seed(self.cfg.seed, iteration), collect_states=collect_states,
        )
        self.last_returns = returns
        self.last_trajectories = trajs
        return returns.mean(axis=1)

    def query(self, candidates: np.ndarray, iteration: int) -> OracleAnswer:
        mean_returns = self.evaluate_candidates(candidates, iteration)
        values = (-mean_returns).tolist()
        self.n_evaluations += len(values)
        order, ties = rank_values(values, self.cfg.top_k)
        return OracleAnswer(order=order, values=values, ties=ties)


# ---------------------------------------------------------------------------
# prompt tuning entry point


def tune_prompt(
    model: dtmodel.Model,
    initial_prompt: PromptSegment,
    oracle: RankingOracle | str,
    cfg: TunerConfig,
    *,
    finetune_set: EpisodeSet | None = None,
    task: envs.TaskSpec | None = None,
    target_rtg: float | None = None,
    n_samples: int | None = None,
    eval_seed: int = 17,
) -> tuple[PromptSegment, TuneTrace]:
    """Optimize the trajectory prompt; model parameters are never touched.

    `oracle` is "offline", "online", or a ready-made RankingOracle. The
    trace records the tuned dimension d_x against the full model size and
    exact oracle-call accounting (T * m evaluations).
    """
    if initial_prompt.k_star != model.cfg.k_star:
        raise ContractError(
            f"prompt length {initial_prompt.k_star} != model k_star {model.cfg.k_star}")
    template = flatten_prompt(initial_prompt)
    x0 = template.x

    if isinstance(oracle, str):
        if oracle == "offline":
            if finetune_set is None:
                raise ContractError("offline tuning needs a finetune_set")
            budget = n_samples if n_samples is not None else len(finetune_set) * model.cfg.context_k
            oracle = OfflineLossOracle(model, finetune_set,
                                       task.task_index if task else finetune_set.task_indices()[0],
                                       budget, cfg, template)
        elif oracle == "online":
            if task is None or target_rtg is None:
                raise ContractError("online tuning needs a task and target_rtg")
            oracle = OnlineReturnOracle(model, task, target_rtg, cfg, template)
        else:
            raise ContractError(f"unknown oracle kind {oracle!r}")

    n_model = model.param_count()
    meta = {
        "kind": "tune-trace",
        "format_version": TRACE_FORMAT_VERSION,
        "d_x": int(template.layout.d_x),
        "model_param_count": n_model,
        "tuned_fraction": template.layout.d_x / n_model,
        "oracle": type(oracle).__name__,
        "config": {
            "iterations": cfg.iterations, "n_candidates": cfg.n_candidates,
            "top_k": cfg.top_k, "mu": cfg.mu, "eta": cfg.eta, "seed": cfg.seed,
            "steps_per_value": cfg.steps_per_value,
        },
        "total_oracle_calls": cfg.iterations * cfg.n_candidates,
    }

    hook = None
    if cfg.trace_eval_episodes > 0 and task is not None and target_rtg is not None:
        def hook(t, x, row):
            prompt_t = unflatten_prompt(template.with_x(x))
            rets, _ = dtmodel.rollout_episodes(
                model, prompt_t, task, cfg.trace_eval_episodes, target_rtg,
                seed=np.random.SeedSequence([eval_seed, t]).generate_state(1)[0])
            row["eval_return"] = float(rets.mean())

    try:
        x_final, rows = zo_rank_sgd(oracle, x0, cfg, on_iteration=hook)
    except TuneAborted as aborted:
        aborted.trace.meta = {**meta, **aborted.trace.meta}
        raise
    trace = TuneTrace(meta=meta, rows=rows)
    return unflatten_prompt(template.with_x(x_final)), trace


# ---------------------------------------------------------------------------
# trace persistence (JSON Lines: header + one row per iteration)


def save_trace(path, trace: TuneTrace) -> None:
    path = Path(path)
    lines = [json.dumps(trace.meta, sort_keys=True)]
    lines.extend(json.dumps(row, sort_keys=True) for row in trace.rows)
    path.write_text("\n".join(lines) + "\n")


def load_trace(path) -> TuneTrace:
    path = Path(path)
    meta: dict = {}
    rows: list[dict] = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(path, line_no, f"bad JSON: {exc.msg}") from exc
        if rec.get("kind") == "tune-trace":
            if rec.get("format_version") != TRACE_FORMAT_VERSION:
                raise ParseError(path, line_no, "unsupported trace format_version")
            meta = rec
        else:
            rows.append(rec)
    return TuneTrace(meta=meta, rows=rows)
