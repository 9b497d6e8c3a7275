"""Synthetic multi-task point-mass control environments.

Three task families mirror the usual direction / target-velocity / goal
-reaching structure at desk scale:

- ``point-dir-2d``: 2-D point mass rewarded for velocity along a goal
  direction. State (px, py, vx, vy), action = acceleration in [-1,1]^2,
  speed clipped to 2.0. Reward v . u(theta), so |reward| <= 2.
- ``point-vel-1d``: 1-D velocity tracking. State (v, previous action),
  action in [-1,1], v clipped to [0, 3.5]. Reward -|v - v*| with
  v* in [0, 3], so |reward| <= 3.5.
- ``point-reach-2d``: 2-D goal reaching. State (px, py) clipped to
  [-2, 2]^2, action in [-1,1]^2. Reward -||p - g||_2.

Scripted behavior policies (expert / medium / random) generate graded
offline data; the medium mixing weight is calibrated automatically so its
episodic return lands near one third of the expert's on the normalized
scale. All stochastic choices flow from explicit seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ContractError, EpisodeDone
from .trajdata import Episode, EpisodeSet, make_episode

FAMILIES = ("point-dir-2d", "point-vel-1d", "point-reach-2d")

QUALITIES = ("random", "medium", "expert")

# target for the calibrated medium policy: (R_med - R_rand)/(R_exp - R_rand)
MEDIUM_TARGET_FRACTION = 1.0 / 3.0
_CALIBRATION_SEED = 202_406_01
MAX_ENUMERATED_TASKS = 256


@dataclass(frozen=True)
class FamilyInfo:
    d_s: int
    d_a: int
    horizon: int
    v_max: float | None


FAMILY_INFO = {
    "point-dir-2d": FamilyInfo(d_s=4, d_a=2, horizon=100, v_max=2.0),
    "point-vel-1d": FamilyInfo(d_s=2, d_a=1, horizon=100, v_max=3.5),
    "point-reach-2d": FamilyInfo(d_s=2, d_a=2, horizon=50, v_max=None),
}


@dataclass(frozen=True)
class TaskSpec:
    family: str
    task_param: tuple
    task_index: int
    horizon: int

    def __post_init__(self):
        if self.family not in FAMILY_INFO:
            raise ContractError(f"unknown family {self.family!r}")
        if self.horizon < 1:
            raise ContractError("horizon must be positive")
        if self.family == "point-vel-1d":
            v = self.task_param[0]
            if not 0.0 <= v <= 3.0:
                raise ContractError(f"target velocity {v} outside [0, 3]")

    @property
    def info(self) -> FamilyInfo:
        return FAMILY_INFO[self.family]

    def param_array(self) -> np.ndarray:
        return np.asarray(self.task_param, dtype=np.float64)


def direction_unit(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta)], dtype=np.float64)


def family_dims(family: str) -> tuple[int, int]:
    info = FAMILY_INFO[family]
    return info.d_s, info.d_a


# ---------------------------------------------------------------------------
# task grids and train/test splits


def canonical_tasks(family: str, n: int, horizon: int | None = None) -> list[TaskSpec]:
    """The family's canonical n-task grid, evenly spaced over its parameter range."""
    if not 1 <= n <= MAX_ENUMERATED_TASKS:
        raise ContractError(f"task count {n} outside [1, {MAX_ENUMERATED_TASKS}]")
    horizon = horizon if horizon is not None else FAMILY_INFO[family].horizon
    tasks = []
    for i in range(n):
        if family == "point-dir-2d":
            theta = 2.0 * math.pi * i / n
            param = (theta,)
        elif family == "point-vel-1d":
            v = 1.5 if n == 1 else 3.0 * i / (n - 1)
            param = (v,)
        elif family == "point-reach-2d":
            phi = 2.0 * math.pi * i / n
            param = (0.8 * math.cos(phi), 0.8 * math.sin(phi))
        else:
            raise ContractError(f"unknown family {family!r}")
        tasks.append(TaskSpec(family, param, task_index=i, horizon=horizon))
    return tasks


def split_tasks(
    family: str, n_train: int, n_test: int, seed: int | None = None
) -> tuple[list[TaskSpec], list[TaskSpec]]:
    """Disjoint train/test tasks with test indices interleaved in the grid.

    The grid is the canonical (n_train + n_test)-task enumeration; held-out
    indices sit at evenly spread interior positions (for the 8/2 velocity
    split that is indices {2, 7}). The split is a fixed convention, so
    `seed` is accepted for interface stability but unused.
    """
    del seed
    n = n_train + n_test
    tasks = canonical_tasks(family, n)
    test_idx = {int((j + 0.5) * n / n_test) for j in range(n_test)} if n_test else set()
    train = [t for t in tasks if t.task_index not in test_idx]
    test = [t for t in tasks if t.task_index in test_idx]
    return train, test


# ---------------------------------------------------------------------------
# dynamics (batched; single-env API wraps batch size 1)


def reset_batch(task: TaskSpec, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    n = len(rngs)
    info = task.info
    states = np.zeros((n, info.d_s), dtype=np.float64)
    if task.family == "point-reach-2d":
        for i, rng in enumerate(rngs):
            states[i] = rng.uniform(-1.0, 1.0, size=2)
    return states


def step_batch(task: TaskSpec, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Advance a batch of states one step. Actions are clipped to [-1, 1]."""
    a = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
    s = np.asarray(states, dtype=np.float64)
    if task.family == "point-dir-2d":
        p, v = s[:, :2], s[:, 2:]
        v = v + 0.1 * a
        speed = np.linalg.norm(v, axis=1, keepdims=True)
        over = speed > 2.0
        v = np.where(over, v * (2.0 / np.maximum(speed, 1e-12)), v)
        p = p + 0.1 * v
        reward = v @ direction_unit(task.task_param[0])
        nxt = np.concatenate([p, v], axis=1)
    elif task.family == "point-vel-1d":
        v = np.clip(s[:, 0:1] + 0.1 * a, 0.0, 3.5)
        reward = -np.abs(v[:, 0] - task.task_param[0])
        nxt = np.concatenate([v, a], axis=1)
    elif task.family == "point-reach-2d":
        p = np.clip(s + 0.1 * a, -2.0, 2.0)
        goal = task.param_array()
        reward = -np.linalg.norm(p - goal, axis=1)
        nxt = p
    else:
        raise ContractError(f"unknown family {task.family!r}")
    return nxt, reward


def env_reset(task: TaskSpec, seed: int | None = None) -> np.ndarray:
    return reset_batch(task, [np.random.default_rng(seed)])[0]


def env_step(task: TaskSpec, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float]:
    nxt, reward = step_batch(task, state[None, :], np.asarray(action, dtype=np.float64)[None, :])
    return nxt[0], float(reward[0])


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    t: int


class Env:
    """Stateful episode session over the pure dynamics."""

    def __init__(self, task: TaskSpec):
        self.task = task
        self._state: np.ndarray | None = None
        self._t = 0

    @property
    def t(self) -> int:
        return self._t

    def reset(self, seed: int | None = None) -> np.ndarray:
        self._state = env_reset(self.task, seed)
        self._t = 0
        return self._state.copy()

    def step(self, action) -> Transition:
        if self._state is None:
            raise ContractError("step before reset")
        if self._t >= self.task.horizon:
            raise EpisodeDone(f"episode finished at horizon {self.task.horizon}")
        action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        nxt, reward = env_step(self.task, self._state, action)
        tr = Transition(self._state.copy(), action, reward, nxt.copy(), self._t)
        self._state = nxt
        self._t += 1
        return tr


# ---------------------------------------------------------------------------
# scripted behavior policies


def expert_actions(task: TaskSpec, states: np.ndarray) -> np.ndarray:
    """Analytic controller per family (batched)."""
    s = np.asarray(states, dtype=np.float64)
    if task.family == "point-dir-2d":
        return np.tile(direction_unit(task.task_param[0]), (len(s), 1))
    if task.family == "point-vel-1d":
        return np.clip(5.0 * (task.task_param[0] - s[:, 0:1]), -1.0, 1.0)
    if task.family == "point-reach-2d":
        return np.clip(5.0 * (task.param_array() - s), -1.0, 1.0)
    raise ContractError(f"unknown family {task.family!r}")


def scripted_policy(
    quality: str, task: TaskSpec, state: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """One action of the requested behavior quality for a single state."""
    if quality not in QUALITIES:
        raise ContractError(f"unknown quality {quality!r}")
    noise = rng.uniform(-1.0, 1.0, size=task.info.d_a)
    if quality == "random":
        return noise
    expert = expert_actions(task, state[None, :])[0]
    if quality == "expert":
        return expert
    alpha = medium_alpha(task.family)
    return alpha * expert + (1.0 - alpha) * noise


def _mixed_rollout_returns(
    task: TaskSpec, alpha: float, episode_seeds: Sequence[int]
) -> np.ndarray:
    """Returns of the alpha-mixed policy, one rollout per seed, lock-stepped."""
    n = len(episode_seeds)
    rngs = [np.random.default_rng(np.random.SeedSequence(s)) for s in episode_seeds]
    noise = np.stack(
        [rng.uniform(-1.0, 1.0, size=(task.horizon, task.info.d_a)) for rng in rngs]
    )
    states = reset_batch(task, rngs)
    total = np.zeros(n)
    for t in range(task.horizon):
        actions = alpha * expert_actions(task, states) + (1.0 - alpha) * noise[:, t]
        states, rewards = step_batch(task, states, actions)
        total += rewards
    return total


def _probe_seeds(n: int) -> list[int]:
    ss = np.random.SeedSequence(_CALIBRATION_SEED)
    return [int(s) for s in ss.generate_state(n)]


@lru_cache(maxsize=None)
def medium_alpha(family: str) -> float:
    """Expert-vs-noise mixing weight for the medium policy.

    Calibrated once per family (fixed internal seed) by bisection so that
    the mixed policy's mean return sits at ~1/3 of the expert's on the
    random=0 / expert=1 scale, across the family's canonical task grid.
    """
    tasks = canonical_tasks(family, 6)
    seeds = _probe_seeds(10)

    def fraction(alpha: float) -> float:
        med = np.mean([_mixed_rollout_returns(t, alpha, seeds).mean() for t in tasks])
        return (med - rand) / (exp - rand)

    exp = np.mean([_mixed_rollout_returns(t, 1.0, seeds).mean() for t in tasks])
    rand = np.mean([_mixed_rollout_returns(t, 0.0, seeds).mean() for t in tasks])
    if exp <= rand:
        raise ContractError(f"degenerate calibration for {family}: expert <= random")
    lo, hi = 0.0, 1.0
    for _ in range(20):
        mid = 0.5 * (lo + hi)
        if fraction(mid) < MEDIUM_TARGET_FRACTION:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# offline dataset generation


def rollout_scripted(task: TaskSpec, quality: str, seed: int) -> Episode:
    """One seeded scripted episode (reproducible from the stored seed alone)."""
    batch = rollout_scripted_batch(task, quality, [seed])
    return batch[0]


def rollout_scripted_batch(task: TaskSpec, quality: str, episode_seeds: Sequence[int]) -> list[Episode]:
    if quality not in QUALITIES:
        raise ContractError(f"unknown quality {quality!r}")
    if quality == "expert":
        alpha = 1.0
    elif quality == "random":
        alpha = 0.0
    else:
        alpha = medium_alpha(task.family)
    n = len(episode_seeds)
    rngs = [np.random.default_rng(np.random.SeedSequence(s)) for s in episode_seeds]
    noise = np.stack(
        [rng.uniform(-1.0, 1.0, size=(task.horizon, task.info.d_a)) for rng in rngs]
    )
    states = reset_batch(task, rngs)
    all_states = np.zeros((n, task.horizon, task.info.d_s))
    all_actions = np.zeros((n, task.horizon, task.info.d_a))
    all_rewards = np.zeros((n, task.horizon))
    for t in range(task.horizon):
        actions = alpha * expert_actions(task, states) + (1.0 - alpha) * noise[:, t]
        actions = np.clip(actions, -1.0, 1.0)
        all_states[:, t] = states
        all_actions[:, t] = actions
        states, rewards = step_batch(task, states, actions)
        all_rewards[:, t] = rewards
    return [
        make_episode(
            all_states[i], all_actions[i], all_rewards[i],
            task_index=task.task_index, family=task.family,
            quality=quality, seed=episode_seeds[i],
        )
        for i in range(n)
    ]


def quality_schedule(quality_mix: str, n_episodes: int) -> list[str]:
    """Per-episode quality tags. The default gradient runs random -> medium
    -> expert so that last/middle/first slices give expert/medium/random data."""
    if quality_mix in QUALITIES:
        return [quality_mix] * n_episodes
    if quality_mix != "gradient":
        raise ContractError(f"unknown quality_mix {quality_mix!r}")
    n_rand = n_episodes // 3
    n_exp = n_episodes // 3
    n_med = n_episodes - n_rand - n_exp
    return ["random"] * n_rand + ["medium"] * n_med + ["expert"] * n_exp


def generate_dataset(
    task: TaskSpec, quality_mix: str = "gradient", n_episodes: int = 30, seed: int = 0
) -> EpisodeSet:
    """Seeded offline dataset for one task, ordered by the quality schedule."""
    if n_episodes < 1:
        raise ContractError("n_episodes must be >= 1")
    tags = quality_schedule(quality_mix, n_episodes)
    seeds = [int(np.random.SeedSequence([seed, i]).generate_state(1)[0]) for i in range(n_episodes)]
    episodes: list[Episode | None] = [None] * n_episodes
    for quality in QUALITIES:
        idx = [i for i, tag in enumerate(tags) if tag == quality]
        if not idx:
            continue
        batch = rollout_scripted_batch(task, quality, [seeds[i] for i in idx])
        for i, ep in zip(idx, batch):
            episodes[i] = ep
    return EpisodeSet(list(episodes), {"family": task.family, "task_index": task.task_index, "seed": seed})


def scripted_mean_return(task: TaskSpec, quality: str, n_episodes: int, seed: int) -> float:
    seeds = [int(np.random.SeedSequence([seed, i]).generate_state(1)[0]) for i in range(n_episodes)]
    eps = rollout_scripted_batch(task, quality, seeds)
    return float(np.mean([e.episode_return for e in eps]))
