"""Launch a small T=3, m=6 ranking session on the goal-reaching family for
the frontend end-to-end test. Prints the chosen port, then serves."""

import socket
import sys
import tempfile

import numpy as np

from promptdt import dtmodel, envs, rankserve, trajdata as td

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

task = envs.canonical_tasks("point-reach-2d", 6)[2]
data = envs.generate_dataset(task, "gradient", 9, seed=40)
cfg = dtmodel.config_for_family("point-reach-2d", rtg_scale=6.0,
                                d_embed=16, n_layers=1, k_star=3, context_k=5)
model = dtmodel.Model.create(cfg, seed=seed)
prompt = td.sample_prompt(data, task.task_index, 3, rng=np.random.default_rng(seed))

session = rankserve.RankingSession(
    model=model,
    task=task,
    initial_prompt=prompt,
    target_rtg=-5.0,
    session_dir=tempfile.mkdtemp(prefix="ranksmoke-"),
    config=rankserve.SessionConfig(
        iterations=3, n_candidates=6, top_k=6, seed=seed,
        episodes_per_candidate=2, reveal_returns=True,
    ),
)

sock = socket.socket()
sock.bind(("127.0.0.1", 0))
port = sock.getsockname()[1]
sock.close()
print(f"PORT {port}", flush=True)
rankserve.run_server(session, port=port)
