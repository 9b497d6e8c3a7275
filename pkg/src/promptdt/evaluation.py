"""Rollout evaluation, score normalization, and ablation harnesses.

Normalization anchors raw returns to scripted-policy baselines per family:
random policy = 0, expert policy = 100. The baseline table also supplies
each family's return-to-go conditioning target and the rtg scale baked
into checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import dtmodel, envs, pretrain, zorank
from .errors import ContractError, DataError, DegenerateBaselineError
from .trajdata import EpisodeSet, PromptSegment, sample_prompt

BASELINE_SEED = 91_500_113
BASELINE_EPISODES = 102  # 17 per canonical task, >= 100 total


@dataclass(frozen=True)
class BaselineEntry:
    family: str
    expert_return: float
    random_return: float
    n_episodes: int
    seed: int

    @property
    def target_rtg(self) -> float:
        return self.expert_return

    @property
    def rtg_scale(self) -> float:
        return max(abs(self.expert_return), 1.0)

    @property
    def gap(self) -> float:
        return self.expert_return - self.random_return


@lru_cache(maxsize=None)
def family_baseline(family: str) -> BaselineEntry:
    """Expert/random anchors from >= 100 seeded scripted episodes."""
    tasks = envs.canonical_tasks(family, 6)
    per_task = BASELINE_EPISODES // len(tasks)
    expert = float(np.mean([
        envs.scripted_mean_return(t, "expert", per_task, BASELINE_SEED) for t in tasks]))
    random_ = float(np.mean([
        envs.scripted_mean_return(t, "random", per_task, BASELINE_SEED) for t in tasks]))
    return BaselineEntry(family, expert, random_, per_task * len(tasks), BASELINE_SEED)


def normalized_score(raw: float, family: str, baseline: BaselineEntry | None = None) -> float:
    """Affine rescale: random policy -> 0, expert policy -> 100."""
    b = baseline or family_baseline(family)
    if b.expert_return == b.random_return:
        raise DegenerateBaselineError(f"{family}: expert == random == {b.expert_return}")
    return 100.0 * (raw - b.random_return) / (b.expert_return - b.random_return)


def save_baselines(path, entries: list[BaselineEntry]) -> None:
    rows = [
        {"family": e.family, "expert_return": e.expert_return,
         "random_return": e.random_return, "n_episodes": e.n_episodes, "seed": e.seed}
        for e in entries
    ]
    Path(path).write_text(json.dumps({"kind": "baseline-table", "entries": rows}, indent=2))


def load_baselines(path) -> dict[str, BaselineEntry]:
    doc = json.loads(Path(path).read_text())
    return {r["family"]: BaselineEntry(**r) for r in doc["entries"]}


@dataclass
class EvalResult:
    mean: float
    std: float
    returns: np.ndarray

    @property
    def n_episodes(self) -> int:
        return len(self.returns)


def evaluate(
    model: dtmodel.Model,
    prompt: PromptSegment | None,
    task: envs.TaskSpec,
    n_episodes: int = 50,
    target_rtg: float | None = None,
    seed: int = 0,
) -> EvalResult:
    """Seeded rollouts with a fixed prompt; raw mean and std over episodes."""
    if target_rtg is None:
        target_rtg = family_baseline(task.family).target_rtg
    returns, _ = dtmodel.rollout_episodes(model, prompt, task, n_episodes, target_rtg, seed)
    return EvalResult(float(returns.mean()), float(returns.std()), returns)


# ---------------------------------------------------------------------------
# ablation harnesses
#
# Each harness emits flat result rows (JSON-serializable dicts) so the CLI
# can persist them as JSON Lines and the plot command can render them.


def _quality_slice(dataset: EpisodeSet, quality: str) -> EpisodeSet:
    """The slice of a gradient-ordered dataset carrying one behavior quality
    (the last/middle/first block of episodes)."""
    sliced = dataset.with_quality(quality)
    if len(sliced) == 0:
        raise DataError(f"dataset has no {quality!r} episodes")
    return sliced


def tune_and_eval(
    model: dtmodel.Model,
    init_prompt: PromptSegment,
    finetune_set: EpisodeSet,
    task: envs.TaskSpec,
    n_samples: int,
    tune_cfg: zorank.TunerConfig,
    n_eval_episodes: int,
    eval_seed: int,
) -> tuple[float, zorank.TuneTrace]:
    baseline = family_baseline(task.family)
    tuned, trace = zorank.tune_prompt(
        model, init_prompt, "offline", tune_cfg,
        finetune_set=finetune_set, task=task, n_samples=n_samples,
    )
    result = evaluate(model, tuned, task, n_eval_episodes, baseline.target_rtg, eval_seed)
    return result.mean, trace


def finetune_and_eval(
    model: dtmodel.Model,
    init_prompt: PromptSegment,
    finetune_set: EpisodeSet,
    task: envs.TaskSpec,
    n_samples: int,
    ft_steps: int,
    ft_lr: float,
    n_eval_episodes: int,
    eval_seed: int,
    ft_seed: int = 0,
) -> float:
    baseline = family_baseline(task.family)
    tuned = pretrain.finetune_full(
        model, finetune_set, task.task_index, n_samples, ft_steps, init_prompt,
        lr=ft_lr, seed=ft_seed,
    )
    result = evaluate(tuned, init_prompt, task, n_eval_episodes, baseline.target_rtg, eval_seed)
    return result.mean


def ablate_samples(
    model: dtmodel.Model,
    task: envs.TaskSpec,
    finetune_set: EpisodeSet,
    sizes: list,
    seeds: list[int],
    tune_cfg: zorank.TunerConfig,
    ft_steps: int = 100,
    ft_lr: float = 1e-4,
    n_eval_episodes: int = 8,
    prompt_quality: str = "expert",
) -> list[dict]:
    """Prompt tuning vs full fine-tuning across sample budgets (equal per method)."""
    rows = []
    total = pretrain.total_windows(finetune_set, task.task_index, model.cfg.context_k)
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAB1]))
        init_prompt = sample_prompt(finetune_set, task.task_index, model.cfg.k_star,
                                    prompt_quality, rng)
        for size in sizes:
            n_samples = total if size == "full" else int(size)
            n_samples = min(n_samples, total)
            cfg = zorank.TunerConfig(**{**_tuner_kwargs(tune_cfg), "seed": seed})
            pt_return, _ = tune_and_eval(model, init_prompt, finetune_set, task,
                                         n_samples, cfg, n_eval_episodes, eval_seed=seed)
            ft_return = finetune_and_eval(model, init_prompt, finetune_set, task,
                                          n_samples, ft_steps, ft_lr,
                                          n_eval_episodes, eval_seed=seed, ft_seed=seed)
            for method, raw in (("ptdt-offline", pt_return), ("prompt-dt-ft", ft_return)):
                rows.append({
                    "kind": "samples", "method": method, "family": task.family,
                    "task": task.task_index, "seed": seed, "size": str(size),
                    "n_samples": n_samples, "raw": raw,
                    "normalized": normalized_score(raw, task.family),
                })
    return rows


def ablate_prompt_init(
    model: dtmodel.Model,
    task: envs.TaskSpec,
    dataset: EpisodeSet,
    seeds: list[int],
    tune_cfg: zorank.TunerConfig,
    n_samples: int = 64,
    ft_steps: int = 100,
    ft_lr: float = 1e-4,
    n_eval_episodes: int = 8,
) -> list[dict]:
    """3x3 grid: prompt-init quality x fine-tuning dataset quality, per method."""
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAB2]))
        prompts = {
            q: sample_prompt(dataset, task.task_index, model.cfg.k_star, q, rng)
            for q in envs.QUALITIES
        }
        for data_q in envs.QUALITIES:
            ft_set = _quality_slice(dataset, data_q)
            budget = min(n_samples, pretrain.total_windows(ft_set, task.task_index,
                                                           model.cfg.context_k))
            for prompt_q in envs.QUALITIES:
                cfg = zorank.TunerConfig(**{**_tuner_kwargs(tune_cfg), "seed": seed})
                pt_return, _ = tune_and_eval(model, prompts[prompt_q], ft_set, task,
                                             budget, cfg, n_eval_episodes, eval_seed=seed)
                ft_return = finetune_and_eval(model, prompts[prompt_q], ft_set, task,
                                              budget, ft_steps, ft_lr,
                                              n_eval_episodes, eval_seed=seed, ft_seed=seed)
                for method, raw in (("ptdt-offline", pt_return), ("prompt-dt-ft", ft_return)):
                    rows.append({
                        "kind": "prompt-init", "method": method, "family": task.family,
                        "task": task.task_index, "seed": seed,
                        "prompt_quality": prompt_q, "dataset_quality": data_q,
                        "n_samples": budget, "raw": raw,
                        "normalized": normalized_score(raw, task.family),
                    })
    return rows


def ablate_prompt_length(
    family: str,
    k_stars: list[int],
    seeds: list[int],
    model_overrides: dict,
    train_cfg: "pretrain.TrainConfig",
    tune_cfg: zorank.TunerConfig,
    n_train: int = 4,
    n_test: int = 2,
    episodes_per_task: int = 30,
    n_samples: int = 64,
    n_eval_episodes: int = 8,
    data_seed: int = 1000,
    trained_models: dict[int, dtmodel.Model] | None = None,
) -> list[dict]:
    """Pretrain per prompt length, then compare untuned vs tuned prompts on a
    held-out task. `trained_models` can supply ready checkpoints keyed by K*."""
    rows = []
    baseline = family_baseline(family)
    train_tasks, test_tasks = envs.split_tasks(family, n_train, n_test)
    test_task = test_tasks[0]
    datasets = {
        t.task_index: envs.generate_dataset(t, "gradient", episodes_per_task,
                                            seed=data_seed + t.task_index)
        for t in train_tasks + test_tasks
    }
    test_set = datasets[test_task.task_index]
    for k_star in k_stars:
        if trained_models and k_star in trained_models:
            model = trained_models[k_star]
        else:
            model_cfg = dtmodel.config_for_family(
                family, rtg_scale=baseline.rtg_scale, k_star=k_star, **model_overrides)
            model, _ = pretrain.train_multitask(
                model_cfg, {t.task_index: datasets[t.task_index] for t in train_tasks},
                train_tasks, train_cfg)
        d_x = (1 + model.cfg.d_state + model.cfg.d_action) * k_star
        for seed in seeds:
            rng = np.random.default_rng(np.random.SeedSequence([seed, k_star, 0xAB3]))
            init_prompt = sample_prompt(test_set, test_task.task_index, k_star,
                                        "expert", rng)
            untuned = evaluate(model, init_prompt, test_task, n_eval_episodes,
                               baseline.target_rtg, seed).mean
            cfg = zorank.TunerConfig(**{**_tuner_kwargs(tune_cfg), "seed": seed})
            budget = min(n_samples, pretrain.total_windows(
                test_set, test_task.task_index, model.cfg.context_k))
            tuned_return, trace = tune_and_eval(model, init_prompt, test_set, test_task,
                                                budget, cfg, n_eval_episodes, eval_seed=seed)
            for method, raw in (("prompt-dt", untuned), ("ptdt-offline", tuned_return)):
                rows.append({
                    "kind": "prompt-length", "method": method, "family": family,
                    "task": test_task.task_index, "seed": seed, "k_star": k_star,
                    "d_x": d_x, "raw": raw,
                    "normalized": normalized_score(raw, family),
                })
    return rows


def _tuner_kwargs(cfg: zorank.TunerConfig) -> dict:
    return {
        "iterations": cfg.iterations, "n_candidates": cfg.n_candidates,
        "top_k": cfg.top_k, "mu": cfg.mu, "eta": cfg.eta, "seed": cfg.seed,
        "steps_per_value": cfg.steps_per_value, "batch_size": cfg.batch_size,
        "resample_windows": cfg.resample_windows,
        "trace_eval_episodes": cfg.trace_eval_episodes,
    }


# ---------------------------------------------------------------------------
# plotting (SVG via matplotlib, used by the CLI `plot` subcommand)


def plot_results(rows: list[dict], kind: str, out_path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    rows = [r for r in rows if r.get("kind") == kind]
    if not rows:
        raise DataError(f"no rows of kind {kind!r}")
    if kind == "samples":
        sizes = sorted({r["n_samples"] for r in rows})
        for method in sorted({r["method"] for r in rows}):
            ys = [np.mean([r["normalized"] for r in rows
                           if r["method"] == method and r["n_samples"] == s]) for s in sizes]
            ax.plot(sizes, ys, marker="o", label=method)
        ax.set_xlabel("fine-tuning samples")
        ax.set_ylabel("normalized score")
        ax.set_xscale("log", base=2)
        ax.legend()
    elif kind == "prompt-init":
        methods = sorted({r["method"] for r in rows})
        fig, axes = plt.subplots(1, len(methods), figsize=(5 * len(methods), 4))
        axes = np.atleast_1d(axes)
        for ax_m, method in zip(axes, methods):
            grid = np.zeros((3, 3))
            for i, dq in enumerate(envs.QUALITIES):
                for j, pq in enumerate(envs.QUALITIES):
                    vals = [r["normalized"] for r in rows
                            if r["method"] == method and r["dataset_quality"] == dq
                            and r["prompt_quality"] == pq]
                    grid[i, j] = np.mean(vals) if vals else np.nan
            im = ax_m.imshow(grid, cmap="viridis")
            ax_m.set_xticks(range(3), envs.QUALITIES)
            ax_m.set_yticks(range(3), envs.QUALITIES)
            ax_m.set_xlabel("prompt quality")
            ax_m.set_ylabel("dataset quality")
            ax_m.set_title(method)
            fig.colorbar(im, ax=ax_m)
    elif kind == "prompt-length":
        k_stars = sorted({r["k_star"] for r in rows})
        for method in sorted({r["method"] for r in rows}):
            ys = [np.mean([r["normalized"] for r in rows
                           if r["method"] == method and r["k_star"] == k]) for k in k_stars]
            ax.plot(k_stars, ys, marker="s", label=method)
        ax.set_xlabel("prompt length")
        ax.set_ylabel("normalized score")
        ax.legend()
    else:
        raise ContractError(f"unknown plot kind {kind!r}")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path
