"""Multi-task supervised pretraining and the full-model fine-tuning baseline.

Training follows the sequence-modeling recipe: per iteration, for each
task, sample a batch of (trajectory prompt, recent-history window) pairs
from that task's offline data, accumulate masked action MSE, and take one
optimizer step per task per inner step (round robin). Everything is
deterministic under the config seed, including parameter init.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc, dtmodel, envs
from .errors import ContractError, DataError
from .trajdata import (
    EpisodeSet,
    PromptSegment,
    WindowRef,
    assemble_training_batch,
    sample_prompt,
    sample_window_refs,
)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    steps_per_iteration: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 0
    eval_interval: int = 0      # iterations between eval snapshots; 0 = off
    eval_episodes: int = 4
    eval_target_rtg: float | None = None
    seed: int = 0
    prompt_quality: str | None = None  # training-time prompt filter; None = any

    def __post_init__(self):
        if self.iterations < 0 or self.steps_per_iteration < 1 or self.batch_size < 1:
            raise ContractError("bad training sizes")


def _schedule_lr(base_lr: float, warmup: int, step: int) -> float:
    if warmup > 0 and step <= warmup:
        return base_lr * step / warmup
    return base_lr


def train_multitask(
    model_cfg: dtmodel.ModelConfig,
    datasets: dict[int, EpisodeSet],
    tasks: list[envs.TaskSpec],
    cfg: TrainConfig,
    log_path=None,
) -> tuple[dtmodel.Model, list[dict]]:
    """Train one shared model across tasks; task identity enters only via
    the prompt. Returns the model and per-iteration log rows."""
    if not tasks:
        raise ContractError("need at least one task")
    for task in tasks:
        if task.task_index not in datasets or len(datasets[task.task_index]) == 0:
            raise DataError(f"empty dataset for task {task.task_index}")

    model = dtmodel.Model.create(model_cfg, cfg.seed)
    params = list(model.params.values())
    opt = dc.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                   no_decay=dtmodel.decay_exempt(model.params))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB0]))
    log_rows: list[dict] = []
    log_file = open(log_path, "a") if log_path else None
    step = 0
    started = time.perf_counter()
    try:
        for it in range(1, cfg.iterations + 1):
            task_losses = {t.task_index: 0.0 for t in tasks}
            for _ in range(cfg.steps_per_iteration):
                for task in tasks:
                    ds = datasets[task.task_index]
                    batch = _draw_batch(model_cfg, ds, task.task_index, cfg, rng)
                    with dc.CompGraph() as graph:
                        loss = dtmodel.dt_loss(model, batch)
                    grads = graph.backward(loss, params)
                    step += 1
                    opt.lr = _schedule_lr(cfg.lr, cfg.warmup_steps, step)
                    opt.step(grads)
                    task_losses[task.task_index] += loss.item()
            row = {
                "iteration": it,
                "loss": {str(k): v / cfg.steps_per_iteration for k, v in task_losses.items()},
                "wall_time": time.perf_counter() - started,
                "seed": cfg.seed,
            }
            if cfg.eval_interval and it % cfg.eval_interval == 0:
                row["eval"] = _eval_snapshot(model, datasets, tasks, cfg, rng)
            log_rows.append(row)
            if log_file:
                log_file.write(json.dumps(row, sort_keys=True) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    model.meta.update({"train_seed": cfg.seed, "train_iterations": cfg.iterations})
    return model, log_rows


def _draw_batch(model_cfg, ds, task_index, cfg, rng):
    refs = sample_window_refs(ds, task_index, model_cfg.context_k, cfg.batch_size, rng)
    if model_cfg.k_star > 0:
        prompts = [
            sample_prompt(ds, task_index, model_cfg.k_star, cfg.prompt_quality, rng)
            for _ in refs
        ]
    else:
        prompts = [None] * len(refs)
    return assemble_training_batch(ds, refs, prompts, model_cfg.context_k)


def _eval_snapshot(model, datasets, tasks, cfg, rng):
    if cfg.eval_target_rtg is None:
        return {}
    out = {}
    for task in tasks:
        ds = datasets[task.task_index]
        quality = "expert" if any(e.quality == "expert" for e in ds) else None
        if model.cfg.k_star > 0:
            prompt = sample_prompt(ds, task.task_index, model.cfg.k_star, quality, rng)
        else:
            prompt = None
        rets, _ = dtmodel.rollout_episodes(
            model, prompt, task, cfg.eval_episodes, cfg.eval_target_rtg,
            seed=int(rng.integers(2**31)))
        out[str(task.task_index)] = float(rets.mean())
    return out


# ---------------------------------------------------------------------------
# full-model fine-tuning baseline


def total_windows(dataset: EpisodeSet, task_index: int, context_k: int) -> int:
    return sum(
        max(e.length - min(context_k, e.length) + 1, 1)
        for e in dataset.episodes
        if e.task_index == task_index
    )


def sample_distinct_window_refs(
    dataset: EpisodeSet, task_index: int, context_k: int, n: int, rng: np.random.Generator
) -> list[WindowRef]:
    """n distinct (episode, offset) windows, uniform without replacement."""
    spans = []
    for i, e in enumerate(dataset.episodes):
        if e.task_index != task_index:
            continue
        length = min(context_k, e.length)
        spans.append((i, e.length - length + 1, length))
    total = sum(s[1] for s in spans)
    if n > total:
        raise DataError(f"requested {n} distinct windows, only {total} exist")
    picks = rng.choice(total, size=n, replace=False)
    refs = []
    bounds = np.cumsum([0] + [s[1] for s in spans])
    for flat in sorted(int(p) for p in picks):
        row = int(np.searchsorted(bounds, flat, side="right")) - 1
        ep_idx, _, length = spans[row]
        refs.append(WindowRef(ep_idx, flat - int(bounds[row]), length))
    return refs


def finetune_full(
    model: dtmodel.Model,
    finetune_set: EpisodeSet,
    task_index: int,
    n_samples: int,
    steps: int,
    prompt: PromptSegment | None,
    lr: float = 1e-4,
    weight_decay: float = 1e-4,
    batch_size: int = 32,
    seed: int = 0,
) -> dtmodel.Model:
    """Gradient steps on exactly n_samples distinct context windows.

    All parameters update; the conditioning prompt stays fixed (the same
    initial prompt the tuning methods start from, for paired comparisons).
    Returns a fine-tuned copy; the input model is untouched.
    """
    tuned = model.clone()
    if steps == 0:
        return tuned
    if len(finetune_set) == 0:
        raise DataError("empty fine-tuning set")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF7]))
    pool = sample_distinct_window_refs(finetune_set, task_index, model.cfg.context_k,
                                       n_samples, rng)
    params = list(tuned.params.values())
    opt = dc.AdamW(params, lr=lr, weight_decay=weight_decay,
                   no_decay=dtmodel.decay_exempt(tuned.params))
    for _ in range(steps):
        take = min(batch_size, len(pool))
        chosen = rng.choice(len(pool), size=take, replace=False)
        refs = [pool[int(c)] for c in chosen]
        batch = assemble_training_batch(finetune_set, refs, [prompt] * len(refs),
                                        model.cfg.context_k)
        with dc.CompGraph() as graph:
            loss = dtmodel.dt_loss(tuned, batch)
        grads = graph.backward(loss, params)
        opt.step(grads)
    tuned.meta.update({"finetuned_on": task_index, "finetune_samples": n_samples,
                       "finetune_steps": steps})
    return tuned


def checkpoint_hash(model: dtmodel.Model) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data.astype("<f4")).tobytes())
    return h.hexdigest()
