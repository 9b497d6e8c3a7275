"""Command line entry point.

One process per command: ``gen-data``, ``pretrain``, ``tune``,
``finetune-full``, ``eval``, ``ablate``, ``serve``, ``plot``. Every command
accepts ``--config <path>`` (TOML; JSON also accepted) plus ``--seed``, and
specific flags override config keys. Each run writes a resolved-config
snapshot (with its hash) beside its outputs; artifacts embed that hash.

Exit codes: 2 for usage errors, 1 for runtime failures (structured JSON on
stderr), 0 on success.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
from pathlib import Path

DEFAULTS = {
    "data": {
        "family": "point-vel-1d",
        "n_train": 4,
        "n_test": 2,
        "episodes": 30,
        "quality_mix": "gradient",
        "seed": 0,
    },
    "model": {
        "d_embed": 128,
        "n_layers": 3,
        "n_heads": 1,
        "mlp_ratio": 4,
        "k_star": 5,
        "context_k": 20,
    },
    "pretrain": {
        "iterations": 1000,
        "steps_per_iteration": 10,
        "batch_size": 32,
        "lr": 1e-4,
        "weight_decay": 1e-4,
        "warmup_steps": 0,
        "eval_interval": 0,
        "eval_episodes": 4,
        "prompt_quality": "",
        "seed": 0,
    },
    "tune": {
        "oracle": "offline",
        "iterations": 20,
        "n_candidates": 15,
        "top_k": 15,
        "mu": 0.05,
        "eta": 0.03,
        "steps_per_value": 8,
        "batch_size": 32,
        "samples": 256,
        "prompt_init": "expert",
        "trace_eval_episodes": 0,
        "seed": 0,
    },
    "finetune": {"samples": 256, "steps": 100, "lr": 1e-4, "seed": 0},
    "eval": {"episodes": 50, "prompt_init": "expert", "seed": 0},
    "ablate": {
        "kind": "samples",
        "sizes": [32, 64, 128, 256, "full"],
        "seeds": [0, 1, 2],
        "k_stars": [2, 5, 10],
        "ft_steps": 100,
        "ft_lr": 1e-4,
        "samples": 64,
        "eval_episodes": 8,
    },
    "serve": {
        "port": 8763,
        "iterations": 10,
        "n_candidates": 6,   # humans rank few items well; override for more
        "top_k": 6,
        "mu": 0.05,
        "eta": 0.03,
        "episodes_per_candidate": 2,
        "reveal_returns": False,
        "seed": 0,
    },
}


def _load_config_file(path: Path) -> dict:
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    try:
        import tomllib  # py >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    return tomllib.loads(text)


def resolve_config(config_path: str | None, overrides: dict) -> dict:
    """defaults <- config file <- CLI flags, in increasing precedence."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        loaded = _load_config_file(Path(config_path))
        for section, values in loaded.items():
            if section not in cfg:
                raise UsageError(f"unknown config section {section!r}")
            for key, value in values.items():
                if key not in cfg[section]:
                    raise UsageError(f"unknown config key {section}.{key}")
                cfg[section][key] = value
    for (section, key), value in overrides.items():
        if value is not None:
            cfg[section][key] = value
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


class UsageError(Exception):
    pass


def make_run_dir(args, name: str) -> Path:
    if getattr(args, "out", None):
        run_dir = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path("runs") / f"{stamp}-{name}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def write_snapshot(run_dir: Path, cfg: dict, command: str) -> str:
    h = config_hash(cfg)
    snapshot = {"command": command, "config_hash": h, "config": cfg}
    (run_dir / "resolved_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))
    return h


def emit(args, payload: dict) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        for key, value in payload.items():
            print(f"{key}: {value}")


# ---------------------------------------------------------------------------
# data plumbing shared by commands


def load_split(data_dir: Path):
    from . import envs

    doc = json.loads((data_dir / "split.json").read_text())
    tasks = {}
    for rec in doc["tasks"]:
        tasks[rec["task_index"]] = (
            envs.TaskSpec(rec["family"], tuple(rec["task_param"]), rec["task_index"], rec["horizon"]),
            rec["role"],
        )
    return doc["family"], tasks


def load_task_dataset(data_dir: Path, task_index: int):
    from . import trajdata

    return trajdata.load_episodes(data_dir / f"task_{task_index:03d}.jsonl")


def pick_task(data_dir: Path, task_index: int | None, prefer_role: str = "test"):
    family, tasks = load_split(data_dir)
    if task_index is not None:
        if task_index not in tasks:
            raise UsageError(f"task {task_index} not in {data_dir}/split.json")
        return family, tasks[task_index][0]
    for task, role in tasks.values():
        if role == prefer_role:
            return family, task
    return family, next(iter(tasks.values()))[0]


def model_config_from(cfg: dict, family: str, rtg_scale: float, k_star=None):
    from . import dtmodel

    m = cfg["model"]
    return dtmodel.config_for_family(
        family, rtg_scale=rtg_scale,
        d_embed=m["d_embed"], n_layers=m["n_layers"], n_heads=m["n_heads"],
        mlp_ratio=m["mlp_ratio"], k_star=m["k_star"] if k_star is None else k_star,
        context_k=m["context_k"],
    )


def tuner_config_from(cfg: dict, seed=None):
    from . import zorank

    t = cfg["tune"]
    return zorank.TunerConfig(
        iterations=t["iterations"], n_candidates=t["n_candidates"], top_k=t["top_k"],
        mu=t["mu"], eta=t["eta"], seed=t["seed"] if seed is None else seed,
        steps_per_value=t["steps_per_value"], batch_size=t["batch_size"],
        trace_eval_episodes=t["trace_eval_episodes"],
    )


def sample_init_prompt(dataset, task, k_star: int, quality: str, seed: int):
    import numpy as np

    from . import trajdata

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1D]))
    quality_filter = None if quality in ("", "any") else quality
    return trajdata.sample_prompt(dataset, task.task_index, k_star, quality_filter, rng)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args.config, {
        ("data", "family"): args.family,
        ("data", "n_train"): args.n_train,
        ("data", "n_test"): args.n_test,
        ("data", "episodes"): args.episodes,
        ("data", "quality_mix"): args.quality_mix,
        ("data", "seed"): args.seed,
    })
    from . import envs, evaluation, trajdata

    d = cfg["data"]
    run_dir = make_run_dir(args, "gen-data")
    h = write_snapshot(run_dir, cfg, "gen-data")
    train, test = envs.split_tasks(d["family"], d["n_train"], d["n_test"])
    records = []
    for role, tasks in (("train", train), ("test", test)):
        for task in tasks:
            ds = envs.generate_dataset(task, d["quality_mix"], d["episodes"],
                                       seed=d["seed"] + task.task_index)
            ds.meta.update({"config_hash": h})
            trajdata.save_episodes(run_dir / f"task_{task.task_index:03d}.jsonl", ds)
            records.append({"task_index": task.task_index, "family": task.family,
                            "task_param": list(task.task_param), "horizon": task.horizon,
                            "role": role})
    (run_dir / "split.json").write_text(json.dumps(
        {"family": d["family"], "config_hash": h, "tasks": records}, indent=2))
    evaluation.save_baselines(run_dir / "baselines.json",
                              [evaluation.family_baseline(d["family"])])
    emit(args, {"run_dir": str(run_dir), "config_hash": h,
                "n_tasks": len(records), "episodes_per_task": d["episodes"]})
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args.config, {
        ("model", "d_embed"): args.d_embed,
        ("model", "k_star"): args.kstar,
        ("pretrain", "iterations"): args.iterations,
        ("pretrain", "batch_size"): args.batch_size,
        ("pretrain", "lr"): args.lr,
        ("pretrain", "seed"): args.seed,
    })
    from . import evaluation, pretrain

    data_dir = Path(args.data)
    family, tasks = load_split(data_dir)
    run_dir = make_run_dir(args, "pretrain")
    h = write_snapshot(run_dir, cfg, "pretrain")
    train_tasks = [t for t, role in tasks.values() if role == "train"]
    datasets = {t.task_index: load_task_dataset(data_dir, t.task_index) for t in train_tasks}
    baseline = evaluation.family_baseline(family)
    model_cfg = model_config_from(cfg, family, baseline.rtg_scale)
    p = cfg["pretrain"]
    train_cfg = pretrain.TrainConfig(
        iterations=p["iterations"], steps_per_iteration=p["steps_per_iteration"],
        batch_size=p["batch_size"], lr=p["lr"], weight_decay=p["weight_decay"],
        warmup_steps=p["warmup_steps"], eval_interval=p["eval_interval"],
        eval_episodes=p["eval_episodes"], eval_target_rtg=baseline.target_rtg,
        seed=p["seed"], prompt_quality=p["prompt_quality"] or None,
    )
    model, rows = pretrain.train_multitask(model_cfg, datasets, train_tasks, train_cfg,
                                           log_path=run_dir / "train_log.jsonl")
    from . import dtmodel

    dtmodel.save_checkpoint(run_dir / "checkpoint", model,
                            {"config_hash": h, "data_dir": str(data_dir)})
    final_loss = rows[-1]["loss"] if rows else {}
    emit(args, {"run_dir": str(run_dir), "config_hash": h,
                "checkpoint": str(run_dir / "checkpoint"),
                "param_count": model.param_count(), "final_loss": json.dumps(final_loss)})
    return 0


def cmd_tune(args) -> int:
    cfg = resolve_config(args.config, {
        ("tune", "oracle"): args.oracle,
        ("tune", "samples"): args.samples,
        ("tune", "prompt_init"): args.prompt_init,
        ("tune", "iterations"): args.iterations,
        ("tune", "seed"): args.seed,
    })
    from . import dtmodel, evaluation, trajdata, zorank

    data_dir = Path(args.data)
    model = dtmodel.load_checkpoint(Path(args.checkpoint))
    if args.kstar is not None and args.kstar != model.cfg.k_star:
        raise UsageError(f"--kstar {args.kstar} != checkpoint k_star {model.cfg.k_star}")
    family, task = pick_task(data_dir, args.task_index)
    dataset = load_task_dataset(data_dir, task.task_index)
    run_dir = make_run_dir(args, "tune")
    h = write_snapshot(run_dir, cfg, "tune")
    t = cfg["tune"]
    tune_cfg = tuner_config_from(cfg)
    prompt = sample_init_prompt(dataset, task, model.cfg.k_star, t["prompt_init"], t["seed"])
    baseline = evaluation.family_baseline(family)
    if t["oracle"] == "external":
        raise UsageError("external oracle runs through the `serve` command")
    tuned, trace = zorank.tune_prompt(
        model, prompt, t["oracle"], tune_cfg,
        finetune_set=dataset, task=task, target_rtg=baseline.target_rtg,
        n_samples=t["samples"],
    )
    trace.meta["config_hash"] = h
    zorank.save_trace(run_dir / "trace.jsonl", trace)
    trajdata.save_flat_prompt(run_dir / "tuned_prompt.json", trajdata.flatten_prompt(tuned), h)
    trajdata.save_flat_prompt(run_dir / "initial_prompt.json", trajdata.flatten_prompt(prompt), h)
    before = evaluation.evaluate(model, prompt, task, cfg["eval"]["episodes"],
                                 baseline.target_rtg, seed=t["seed"])
    after = evaluation.evaluate(model, tuned, task, cfg["eval"]["episodes"],
                                baseline.target_rtg, seed=t["seed"])
    summary = {
        "run_dir": str(run_dir), "config_hash": h, "task": task.task_index,
        "oracle": t["oracle"], "oracle_calls": trace.total_oracle_calls,
        "d_x": trace.meta["d_x"], "tuned_fraction": trace.meta["tuned_fraction"],
        "return_before": before.mean, "return_after": after.mean,
        "normalized_before": evaluation.normalized_score(before.mean, family),
        "normalized_after": evaluation.normalized_score(after.mean, family),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    emit(args, summary)
    return 0


def cmd_finetune_full(args) -> int:
    cfg = resolve_config(args.config, {
        ("finetune", "samples"): args.samples,
        ("finetune", "steps"): args.steps,
        ("finetune", "seed"): args.seed,
    })
    from . import dtmodel, evaluation, pretrain

    data_dir = Path(args.data)
    model = dtmodel.load_checkpoint(Path(args.checkpoint))
    family, task = pick_task(data_dir, args.task_index)
    dataset = load_task_dataset(data_dir, task.task_index)
    run_dir = make_run_dir(args, "finetune-full")
    h = write_snapshot(run_dir, cfg, "finetune-full")
    f = cfg["finetune"]
    prompt = sample_init_prompt(dataset, task, model.cfg.k_star,
                                cfg["eval"]["prompt_init"], f["seed"])
    tuned = pretrain.finetune_full(model, dataset, task.task_index, f["samples"],
                                   f["steps"], prompt, lr=f["lr"], seed=f["seed"])
    dtmodel.save_checkpoint(run_dir / "checkpoint", tuned, {"config_hash": h})
    baseline = evaluation.family_baseline(family)
    after = evaluation.evaluate(tuned, prompt, task, cfg["eval"]["episodes"],
                                baseline.target_rtg, seed=f["seed"])
    emit(args, {"run_dir": str(run_dir), "config_hash": h,
                "checkpoint": str(run_dir / "checkpoint"),
                "n_samples": f["samples"], "steps": f["steps"],
                "return_after": after.mean,
                "normalized_after": evaluation.normalized_score(after.mean, family)})
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args.config, {
        ("eval", "episodes"): args.episodes,
        ("eval", "prompt_init"): args.prompt_init,
        ("eval", "seed"): args.seed,
    })
    from . import dtmodel, evaluation, trajdata

    data_dir = Path(args.data)
    model = dtmodel.load_checkpoint(Path(args.checkpoint))
    family, task = pick_task(data_dir, args.task_index)
    e = cfg["eval"]
    if args.prompt_file:
        prompt = trajdata.unflatten_prompt(trajdata.load_flat_prompt(args.prompt_file))
    elif model.cfg.k_star > 0:
        dataset = load_task_dataset(data_dir, task.task_index)
        prompt = sample_init_prompt(dataset, task, model.cfg.k_star, e["prompt_init"], e["seed"])
    else:
        prompt = None
    baseline = evaluation.family_baseline(family)
    result = evaluation.evaluate(model, prompt, task, e["episodes"],
                                 baseline.target_rtg, seed=e["seed"])
    run_dir = make_run_dir(args, "eval")
    h = write_snapshot(run_dir, cfg, "eval")
    payload = {
        "run_dir": str(run_dir), "config_hash": h, "task": task.task_index,
        "episodes": e["episodes"], "raw_mean": result.mean, "raw_std": result.std,
        "normalized": evaluation.normalized_score(result.mean, family),
    }
    (run_dir / "eval.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    emit(args, payload)
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args.config, {
        ("ablate", "kind"): args.kind,
        ("ablate", "samples"): args.samples,
    })
    from . import dtmodel, evaluation, pretrain as pt, trajdata

    a = cfg["ablate"]
    kind = a["kind"]
    run_dir = make_run_dir(args, f"ablate-{kind}")
    h = write_snapshot(run_dir, cfg, "ablate")
    tune_cfg = tuner_config_from(cfg)
    seeds = [int(s) for s in a["seeds"]]
    if kind in ("samples", "prompt-init"):
        if not args.checkpoint or not args.data:
            raise UsageError(f"--checkpoint and --data are required for --kind {kind}")
        model = dtmodel.load_checkpoint(Path(args.checkpoint))
        data_dir = Path(args.data)
        family, task = pick_task(data_dir, args.task_index)
        dataset = load_task_dataset(data_dir, task.task_index)
        if kind == "samples":
            rows = evaluation.ablate_samples(
                model, task, dataset, sizes=a["sizes"], seeds=seeds, tune_cfg=tune_cfg,
                ft_steps=a["ft_steps"], ft_lr=a["ft_lr"], n_eval_episodes=a["eval_episodes"])
        else:
            rows = evaluation.ablate_prompt_init(
                model, task, dataset, seeds=seeds, tune_cfg=tune_cfg,
                n_samples=a["samples"], ft_steps=a["ft_steps"], ft_lr=a["ft_lr"],
                n_eval_episodes=a["eval_episodes"])
    elif kind == "prompt-length":
        family = cfg["data"]["family"]
        p = cfg["pretrain"]
        train_cfg = pt.TrainConfig(
            iterations=p["iterations"], steps_per_iteration=p["steps_per_iteration"],
            batch_size=p["batch_size"], lr=p["lr"], weight_decay=p["weight_decay"],
            seed=p["seed"])
        rows = evaluation.ablate_prompt_length(
            family, k_stars=[int(k) for k in a["k_stars"]], seeds=seeds,
            model_overrides=dict(d_embed=cfg["model"]["d_embed"],
                                 n_layers=cfg["model"]["n_layers"],
                                 context_k=cfg["model"]["context_k"]),
            train_cfg=train_cfg, tune_cfg=tune_cfg,
            n_train=cfg["data"]["n_train"], n_test=cfg["data"]["n_test"],
            episodes_per_task=cfg["data"]["episodes"], n_samples=a["samples"],
            n_eval_episodes=a["eval_episodes"], data_seed=cfg["data"]["seed"])
    else:
        raise UsageError(f"unknown ablation kind {kind!r}")
    results_path = run_dir / "results.jsonl"
    with open(results_path, "w") as fh:
        fh.write(json.dumps({"kind": "results", "format_version": 1,
                             "config_hash": h, "ablation": kind}, sort_keys=True) + "\n")
        for row in rows:
            row["config_hash"] = h
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    emit(args, {"run_dir": str(run_dir), "config_hash": h,
                "results": str(results_path), "n_rows": len(rows)})
    return 0


def cmd_serve(args) -> int:
    cfg = resolve_config(args.config, {
        ("serve", "port"): args.port,
        ("serve", "reveal_returns"): args.reveal_returns or None,
        ("serve", "iterations"): args.iterations,
        ("serve", "seed"): args.seed,
        ("tune", "prompt_init"): args.prompt_init,
    })
    from . import dtmodel, evaluation, rankserve

    data_dir = Path(args.data)
    model = dtmodel.load_checkpoint(Path(args.checkpoint))
    family, task = pick_task(data_dir, args.task_index)
    dataset = load_task_dataset(data_dir, task.task_index)
    session_dir = Path(args.session_dir) if args.session_dir else make_run_dir(args, "serve")
    session_dir.mkdir(parents=True, exist_ok=True)
    h = write_snapshot(session_dir, cfg, "serve")
    s = cfg["serve"]
    prompt = sample_init_prompt(dataset, task, model.cfg.k_star,
                                cfg["tune"]["prompt_init"], s["seed"])
    baseline = evaluation.family_baseline(family)
    session = rankserve.RankingSession(
        model=model, task=task, initial_prompt=prompt,
        target_rtg=baseline.target_rtg, session_dir=session_dir,
        config=rankserve.SessionConfig(
            iterations=s["iterations"], n_candidates=s["n_candidates"], top_k=s["top_k"],
            mu=s["mu"], eta=s["eta"], seed=s["seed"],
            episodes_per_candidate=s["episodes_per_candidate"],
            reveal_returns=bool(s["reveal_returns"]), config_hash=h),
    )
    rankserve.run_server(session, port=s["port"])
    return 0


def cmd_plot(args) -> int:
    from . import evaluation

    rows = []
    kind = args.kind
    for line in Path(args.results).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("kind") == "results":
            kind = kind or rec.get("ablation")
            continue
        rows.append(rec)
    if not kind:
        raise UsageError("plot kind not given and results carry no header")
    out = Path(args.out) if args.out else Path(args.results).with_suffix(".svg")
    evaluation.plot_results(rows, kind, out)
    emit(args, {"plot": str(out), "rows": len(rows)})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptdt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML (or JSON) config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output directory (default runs/<ts>-<cmd>)")
        p.add_argument("--json", action="store_true", help="machine-readable stdout")
        p.add_argument("--threads", type=int, default=None,
                       help="cap numeric worker threads")

    p = sub.add_parser("gen-data", help="generate offline datasets for a task split")
    common(p)
    p.add_argument("--family", choices=["point-dir-2d", "point-vel-1d", "point-reach-2d"])
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-test", type=int, dest="n_test")
    p.add_argument("--episodes", type=int)
    p.add_argument("--quality-mix", dest="quality_mix")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="multi-task pretraining on the train split")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--d-embed", type=int, dest="d_embed")
    p.add_argument("--kstar", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("tune", help="rank-oracle prompt tuning on a held-out task")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task-index", type=int, dest="task_index")
    p.add_argument("--oracle", choices=["offline", "online", "external"])
    p.add_argument("--prompt-init", choices=["expert", "medium", "random", "any"],
                   dest="prompt_init")
    p.add_argument("--samples", type=int)
    p.add_argument("--kstar", type=int)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("finetune-full", help="full-model fine-tuning baseline")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task-index", type=int, dest="task_index")
    p.add_argument("--samples", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_finetune_full)

    p = sub.add_parser("eval", help="seeded rollout evaluation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task-index", type=int, dest="task_index")
    p.add_argument("--episodes", type=int)
    p.add_argument("--prompt-init", choices=["expert", "medium", "random", "any"],
                   dest="prompt_init")
    p.add_argument("--prompt-file", dest="prompt_file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation study")
    common(p)
    p.add_argument("--kind", choices=["samples", "prompt-init", "prompt-length"])
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--task-index", type=int, dest="task_index")
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="HTTP service for human candidate ranking")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task-index", type=int, dest="task_index")
    p.add_argument("--port", type=int)
    p.add_argument("--session-dir", dest="session_dir")
    p.add_argument("--reveal-returns", action="store_true", dest="reveal_returns")
    p.add_argument("--iterations", type=int)
    p.add_argument("--prompt-init", choices=["expert", "medium", "random", "any"],
                   dest="prompt_init")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("plot", help="render a results file to SVG")
    common(p)
    p.add_argument("--results", required=True)
    p.add_argument("--kind", choices=["samples", "prompt-init", "prompt-length"])
    p.set_defaults(func=cmd_plot)

    return parser


def _apply_thread_cap(argv) -> None:
    # must run before numpy is imported anywhere in this process
    if "--threads" in argv:
        n = argv[argv.index("--threads") + 1]
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_cap(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure -> structured stderr, exit 1
        from .errors import PromptDTError

        kind = "runtime" if isinstance(exc, PromptDTError) else type(exc).__name__
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
