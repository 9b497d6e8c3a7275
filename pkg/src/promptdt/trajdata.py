"""Trajectory data model.

Episodes, reward-to-go, trajectory-prompt sampling, prompt flattening to a
single tuned vector, fixed-shape sequence batches for the transformer, and
JSON Lines persistence. Everything here is an immutable value; sampling
takes an explicit numpy Generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, ParseError, ShapeError

DATASET_FORMAT_VERSION = 1


def compute_rtg(rewards) -> np.ndarray:
    """Suffix sums: rtg[t] = rewards[t] + rtg[t+1], rtg[last] = rewards[last]."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return np.zeros(0, dtype=np.float64)
    return np.cumsum(r[::-1])[::-1].copy()


@dataclass(eq=False)
class Episode:
    """One rollout of a single task."""

    states: np.ndarray      # (T, d_s) float64
    actions: np.ndarray     # (T, d_a) float64
    rewards: np.ndarray     # (T,) float64
    rtg: np.ndarray         # (T,) float64, suffix sums of rewards
    timesteps: np.ndarray   # (T,) int64
    task_index: int
    family: str
    quality: str
    seed: int

    def __post_init__(self):
        t = len(self.rewards)
        if not (len(self.states) == len(self.actions) == len(self.rtg) == len(self.timesteps) == t):
            raise ContractError("episode arrays must have equal length")

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.task_index == other.task_index
            and self.family == other.family
            and self.quality == other.quality
            and self.seed == other.seed
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.rtg, other.rtg)
            and np.array_equal(self.timesteps, other.timesteps)
        )


def make_episode(states, actions, rewards, task_index, family, quality, seed) -> Episode:
    rewards = np.asarray(rewards, dtype=np.float64)
    return Episode(
        states=np.asarray(states, dtype=np.float64),
        actions=np.asarray(actions, dtype=np.float64),
        rewards=rewards,
        rtg=compute_rtg(rewards),
        timesteps=np.arange(len(rewards), dtype=np.int64),
        task_index=int(task_index),
        family=family,
        quality=quality,
        seed=int(seed),
    )


@dataclass(eq=False)
class EpisodeSet:
    """An ordered collection of episodes plus file-level metadata."""

    episodes: list[Episode] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    def __getitem__(self, i) -> Episode:
        return self.episodes[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EpisodeSet):
            return NotImplemented
        return self.meta == other.meta and self.episodes == other.episodes

    def for_task(self, task_index: int) -> "EpisodeSet":
        return EpisodeSet([e for e in self.episodes if e.task_index == task_index], dict(self.meta))

    def with_quality(self, quality: str | None) -> "EpisodeSet":
        if quality is None:
            return self
        return EpisodeSet([e for e in self.episodes if e.quality == quality], dict(self.meta))

    def task_indices(self) -> list[int]:
        seen: dict[int, None] = {}
        for e in self.episodes:
            seen.setdefault(e.task_index, None)
        return list(seen)


# ---------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class PromptLayout:
    d_r: int
    d_s: int
    d_a: int
    k_star: int

    @property
    def d_x(self) -> int:
        return (self.d_r + self.d_s + self.d_a) * self.k_star


@dataclass(eq=False)
class PromptSegment:
    """A contiguous K*-step slice of one source episode."""

    rtg: np.ndarray        # (K*,)
    states: np.ndarray     # (K*, d_s)
    actions: np.ndarray    # (K*, d_a)
    timesteps: np.ndarray  # (K*,) int64, source-episode step indices
    source_episode: int    # position of the source episode in its EpisodeSet

    def __post_init__(self):
        k = len(self.rtg)
        if k < 1:
            raise ContractError("prompt needs at least one step")
        if not (len(self.states) == len(self.actions) == len(self.timesteps) == k):
            raise ContractError("prompt arrays must have equal length")

    @property
    def k_star(self) -> int:
        return len(self.rtg)

    def layout(self) -> PromptLayout:
        return PromptLayout(1, self.states.shape[1], self.actions.shape[1], self.k_star)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PromptSegment):
            return NotImplemented
        return (
            self.source_episode == other.source_episode
            and np.array_equal(self.rtg, other.rtg)
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.timesteps, other.timesteps)
        )


@dataclass(eq=False)
class FlatPrompt:
    """The prompt as one real vector, the sole tuned parameter block.

    `x` holds only the tunable values, laid out per step as
    (rtg, state, action) repeated K* times. Timestep indices and the source
    id are not tuned; they ride along so unflatten is an exact inverse.
    """

    x: np.ndarray          # (d_x,) float64
    layout: PromptLayout
    timesteps: np.ndarray  # (K*,) int64
    source_episode: int

    def __post_init__(self):
        if len(self.x) != self.layout.d_x:
            raise ShapeError("FlatPrompt", (len(self.x),), (self.layout.d_x,))

    def with_x(self, x: np.ndarray) -> "FlatPrompt":
        return FlatPrompt(np.asarray(x, dtype=np.float64), self.layout, self.timesteps, self.source_episode)


def flatten_prompt(p: PromptSegment) -> FlatPrompt:
    """Serialize a prompt to one vector: per step rtg || state || action,
    steps in order, rtg of step 1 first and the last action last."""
    lay = p.layout()
    rows = np.concatenate([p.rtg[:, None], p.states, p.actions], axis=1)
    return FlatPrompt(rows.reshape(-1).astype(np.float64), lay, p.timesteps.copy(), p.source_episode)


def unflatten_prompt(f: FlatPrompt) -> PromptSegment:
    lay = f.layout
    rows = f.x.reshape(lay.k_star, lay.d_r + lay.d_s + lay.d_a)
    return PromptSegment(
        rtg=rows[:, 0].copy(),
        states=rows[:, lay.d_r : lay.d_r + lay.d_s].copy(),
        actions=rows[:, lay.d_r + lay.d_s :].copy(),
        timesteps=f.timesteps.copy(),
        source_episode=f.source_episode,
    )


def sample_prompt(
    dataset: EpisodeSet,
    task_index: int,
    k_star: int,
    quality_filter: str | None = None,
    rng: np.random.Generator | None = None,
) -> PromptSegment:
    """Uniform episode (after filters), then a uniform contiguous window."""
    rng = rng or np.random.default_rng()
    pool = [
        (i, e)
        for i, e in enumerate(dataset.episodes)
        if e.task_index == task_index
        and (quality_filter is None or e.quality == quality_filter)
        and e.length >= k_star
    ]
    if not pool:
        raise DataError(
            f"no episode of length >= {k_star} for task {task_index}"
            + (f" with quality {quality_filter!r}" if quality_filter else "")
        )
    idx, ep = pool[rng.integers(len(pool))]
    start = int(rng.integers(ep.length - k_star + 1))
    sl = slice(start, start + k_star)
    return PromptSegment(
        rtg=ep.rtg[sl].copy(),
        states=ep.states[sl].copy(),
        actions=ep.actions[sl].copy(),
        timesteps=ep.timesteps[sl].copy(),
        source_episode=idx,
    )


# ---------------------------------------------------------------------------
# model input assembly


@dataclass
class History:
    """The live (or sampled) recent trajectory fed after the prompt.

    `actions` may have one row fewer than `states` when the action at the
    newest step has not happened yet (inference position); the missing row
    is zero-filled during assembly.
    """

    states: np.ndarray     # (h, d_s)
    actions: np.ndarray    # (h, d_a) or (h-1, d_a)
    rtg: np.ndarray        # (h,)
    timesteps: np.ndarray  # (h,)


@dataclass
class SequenceBatch:
    """Fixed-shape per-step tensors for a batch of model inputs.

    Step axis length is k_star + context_k: prompt steps first, then the
    history block, left-padded with zero steps when the history is shorter
    than context_k. Each step later becomes three tokens (rtg, state,
    action), so real token count per sequence is 3 * step_mask.sum(row).
    """

    rtg: np.ndarray             # (B, L) float32
    states: np.ndarray          # (B, L, d_s) float32
    actions: np.ndarray         # (B, L, d_a) float32
    timesteps: np.ndarray       # (B, L) int64, block-local step indices
    step_mask: np.ndarray       # (B, L) float32, 1 = real step
    action_targets: np.ndarray  # (B, L, d_a) float32
    loss_mask: np.ndarray       # (B, L) float32, positions scored by the loss
    k_star: int
    context_k: int

    @property
    def batch_size(self) -> int:
        return self.rtg.shape[0]

    @property
    def n_steps(self) -> int:
        return self.rtg.shape[1]


def assemble_input(
    prompt: PromptSegment | None,
    history: History,
    context_k: int,
    loss_on_prompt: bool = False,
) -> SequenceBatch:
    """Build a single-sequence batch: prompt steps then recent history.

    History must hold between 1 and context_k steps; the newest context_k
    steps should already be selected by the caller. Prompt tokens always
    precede history tokens. `prompt=None` means a prompt-free model
    (k_star = 0 ablation).
    """
    h = len(history.states)
    if h < 1:
        raise ContractError("history must hold at least one step")
    if h > context_k:
        raise ContractError(f"history has {h} steps, context is {context_k}")
    k_star = prompt.k_star if prompt is not None else 0
    d_s = history.states.shape[1]
    d_a = history.actions.shape[1]
    length = k_star + context_k

    rtg = np.zeros((1, length), dtype=np.float32)
    states = np.zeros((1, length, d_s), dtype=np.float32)
    actions = np.zeros((1, length, d_a), dtype=np.float32)
    timesteps = np.zeros((1, length), dtype=np.int64)
    step_mask = np.zeros((1, length), dtype=np.float32)

    if prompt is not None:
        if prompt.states.shape[1] != d_s or prompt.actions.shape[1] != d_a:
            raise ShapeError("assemble_input", prompt.states.shape, history.states.shape)
        rtg[0, :k_star] = prompt.rtg
        states[0, :k_star] = prompt.states
        actions[0, :k_star] = prompt.actions
        timesteps[0, :k_star] = prompt.timesteps
        step_mask[0, :k_star] = 1.0

    pad = context_k - h
    lo = k_star + pad
    rtg[0, lo:] = history.rtg
    states[0, lo:] = history.states
    acts = history.actions
    if len(acts) == h - 1:
        acts = np.concatenate([acts, np.zeros((1, d_a), dtype=acts.dtype)], axis=0)
    elif len(acts) != h:
        raise ContractError(f"history actions must have h or h-1 rows, got {len(acts)} for h={h}")
    actions[0, lo:] = acts
    timesteps[0, lo:] = history.timesteps
    step_mask[0, lo:] = 1.0

    targets = actions.copy()
    loss_mask = np.zeros((1, length), dtype=np.float32)
    loss_mask[0, lo:] = 1.0
    if loss_on_prompt and k_star:
        loss_mask[0, :k_star] = 1.0
    return SequenceBatch(rtg, states, actions, timesteps, step_mask, targets, loss_mask, k_star, context_k)


def stack_batches(batches: Sequence[SequenceBatch]) -> SequenceBatch:
    first = batches[0]
    cat = lambda name: np.concatenate([getattr(b, name) for b in batches], axis=0)
    return SequenceBatch(
        cat("rtg"), cat("states"), cat("actions"), cat("timesteps"),
        cat("step_mask"), cat("action_targets"), cat("loss_mask"),
        first.k_star, first.context_k,
    )


@dataclass(frozen=True)
class WindowRef:
    """A training sample: one context window of one episode."""

    episode: int
    start: int
    length: int


def sample_window_refs(
    dataset: EpisodeSet, task_index: int, context_k: int, n: int, rng: np.random.Generator
) -> list[WindowRef]:
    """Draw n (episode, window) references uniformly over episodes then offsets."""
    eps = [(i, e) for i, e in enumerate(dataset.episodes) if e.task_index == task_index]
    if not eps:
        raise DataError(f"no episodes for task {task_index}")
    refs = []
    for _ in range(n):
        idx, ep = eps[rng.integers(len(eps))]
        length = min(context_k, ep.length)
        start = int(rng.integers(ep.length - length + 1))
        refs.append(WindowRef(idx, start, length))
    return refs


def window_history(dataset: EpisodeSet, ref: WindowRef) -> History:
    ep = dataset.episodes[ref.episode]
    sl = slice(ref.start, ref.start + ref.length)
    return History(
        states=ep.states[sl], actions=ep.actions[sl], rtg=ep.rtg[sl], timesteps=ep.timesteps[sl]
    )


def assemble_training_batch(
    dataset: EpisodeSet,
    refs: Sequence[WindowRef],
    prompts: Sequence[PromptSegment | None],
    context_k: int,
) -> SequenceBatch:
    rows = [
        assemble_input(prompt, window_history(dataset, ref), context_k)
        for ref, prompt in zip(refs, prompts)
    ]
    return stack_batches(rows)


PROMPT_FORMAT_VERSION = 1


def save_flat_prompt(path, prompt: FlatPrompt, config_hash: str | None = None) -> None:
    """Flat decimal vector plus layout header."""
    doc = {
        "kind": "flat-prompt",
        "format_version": PROMPT_FORMAT_VERSION,
        "config_hash": config_hash,
        "layout": {"d_r": prompt.layout.d_r, "d_s": prompt.layout.d_s,
                   "d_a": prompt.layout.d_a, "k_star": prompt.layout.k_star},
        "timesteps": prompt.timesteps.tolist(),
        "source_episode": prompt.source_episode,
        "x": prompt.x.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_flat_prompt(path) -> FlatPrompt:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from exc
    if doc.get("format_version") != PROMPT_FORMAT_VERSION:
        raise ParseError(path, 1, f"unsupported prompt format_version {doc.get('format_version')}")
    layout = PromptLayout(**doc["layout"])
    return FlatPrompt(
        x=np.asarray(doc["x"], dtype=np.float64),
        layout=layout,
        timesteps=np.asarray(doc["timesteps"], dtype=np.int64),
        source_episode=int(doc["source_episode"]),
    )


# ---------------------------------------------------------------------------
# persistence (JSON Lines, bit-exact round trip)


def save_episodes(path, dataset: EpisodeSet) -> None:
    path = Path(path)
    meta = {"kind": "episodeset", "format_version": DATASET_FORMAT_VERSION}
    meta.update({k: v for k, v in dataset.meta.items() if k not in ("kind",)})
    meta.setdefault("config_hash", None)
    lines = [json.dumps(meta, sort_keys=True)]
    for e in dataset.episodes:
        lines.append(
            json.dumps(
                {
                    "task_index": e.task_index,
                    "family": e.family,
                    "quality": e.quality,
                    "seed": e.seed,
                    "states": e.states.tolist(),
                    "actions": e.actions.tolist(),
                    "rewards": e.rewards.tolist(),
                },
                sort_keys=True,
            )
        )
    path.write_text("\n".join(lines) + "\n")


def load_episodes(path) -> EpisodeSet:
    path = Path(path)
    text = path.read_text()
    episodes: list[Episode] = []
    meta: dict = {"format_version": DATASET_FORMAT_VERSION, "config_hash": None}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(path, line_no, f"bad JSON: {exc.msg}") from exc
        if not isinstance(rec, dict):
            raise ParseError(path, line_no, "record is not an object")
        if rec.get("kind") == "episodeset":
            meta = {k: v for k, v in rec.items() if k != "kind"}
            version = meta.get("format_version")
            if version != DATASET_FORMAT_VERSION:
                raise ParseError(path, line_no, f"unsupported format_version {version}")
            continue
        try:
            episodes.append(
                make_episode(
                    states=rec["states"],
                    actions=rec["actions"],
                    rewards=rec["rewards"],
                    task_index=rec["task_index"],
                    family=rec["family"],
                    quality=rec["quality"],
                    seed=rec["seed"],
                )
            )
        except KeyError as exc:
            raise ParseError(path, line_no, f"missing field {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            raise ParseError(path, line_no, str(exc)) from exc
    return EpisodeSet(episodes, meta)
