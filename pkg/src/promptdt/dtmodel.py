"""Prompt-conditioned causal transformer.

Each trajectory step becomes three tokens (reward-to-go, state, action);
the model reads K* prompt steps followed by up to K recent history steps
and predicts an action at every state token, squashed to [-1, 1] by tanh.
Token embedding = per-modality linear projection + a learned timestep
embedding shared by the step's three tokens. Prompt-block timesteps index
the first half of the table (source-episode positions) and history-block
timesteps the second half, so the two blocks never collide.

The loss is mean squared action error over real history positions; prompt
positions can be included via ``loss_on_prompt`` for ablations.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .errors import ContractError, ParseError, ShapeError
from .trajdata import History, PromptSegment, SequenceBatch, assemble_input
from . import envs

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    family: str
    d_state: int
    d_action: int
    n_layers: int = 3
    n_heads: int = 1
    d_embed: int = 128
    mlp_ratio: int = 4
    k_star: int = 5          # 0 switches the prompt block off entirely
    context_k: int = 20
    max_timestep: int = 128
    rtg_scale: float = 1.0
    activation: str = "relu"
    loss_on_prompt: bool = False

    def __post_init__(self):
        if self.d_embed % self.n_heads != 0:
            raise ContractError("d_embed must be divisible by n_heads")
        if self.context_k < 1 or self.k_star < 0:
            raise ContractError("need context_k >= 1 and k_star >= 0")
        if self.activation != "relu":
            raise ContractError(f"unsupported activation {self.activation!r}")

    @property
    def n_steps(self) -> int:
        return self.k_star + self.context_k

    @property
    def n_tokens(self) -> int:
        return 3 * self.n_steps


def config_for_family(family: str, rtg_scale: float, **overrides) -> ModelConfig:
    d_s, d_a = envs.family_dims(family)
    horizon = envs.FAMILY_INFO[family].horizon
    kwargs = dict(family=family, d_state=d_s, d_action=d_a, max_timestep=max(horizon, 1) + 1,
                  rtg_scale=float(rtg_scale))
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, dc.Tensor]:
    """Fresh parameters: normal(0, 0.02) weights, zero biases, unit LN gains."""
    d = cfg.d_embed
    p: dict[str, dc.Tensor] = {}

    def w(name, shape):
        p[name] = dc.normal(shape, 0.02, rng, dtype=dtype, name=name)

    def zero(name, shape):
        p[name] = dc.zeros(shape, dtype=dtype, name=name)

    def one(name, shape):
        p[name] = dc.ones(shape, dtype=dtype, name=name)

    w("embed_rtg.w", (1, d)); zero("embed_rtg.b", (d,))
    w("embed_state.w", (cfg.d_state, d)); zero("embed_state.b", (d,))
    w("embed_action.w", (cfg.d_action, d)); zero("embed_action.b", (d,))
    w("embed_timestep", (2 * cfg.max_timestep, d))
    for i in range(cfg.n_layers):
        pre = f"block{i}"
        one(f"{pre}.ln1.g", (d,)); zero(f"{pre}.ln1.b", (d,))
        w(f"{pre}.attn.wqkv", (d, 3 * d)); zero(f"{pre}.attn.bqkv", (3 * d,))
        w(f"{pre}.attn.wo", (d, d)); zero(f"{pre}.attn.bo", (d,))
        one(f"{pre}.ln2.g", (d,)); zero(f"{pre}.ln2.b", (d,))
        w(f"{pre}.mlp.w1", (d, cfg.mlp_ratio * d)); zero(f"{pre}.mlp.b1", (cfg.mlp_ratio * d,))
        w(f"{pre}.mlp.w2", (cfg.mlp_ratio * d, d)); zero(f"{pre}.mlp.b2", (d,))
    one("ln_f.g", (d,)); zero("ln_f.b", (d,))
    w("head_action.w", (d, cfg.d_action)); zero("head_action.b", (cfg.d_action,))
    return p


def decay_exempt(params: Mapping[str, dc.Tensor]) -> list[dc.Tensor]:
    """Biases, layer-norm parameters, and the timestep table skip weight decay."""
    return [t for name, t in params.items() if t.data.ndim != 2 or name == "embed_timestep"]


def param_count(params: Mapping[str, dc.Tensor]) -> int:
    return int(sum(t.data.size for t in params.values()))


@dataclass
class Model:
    """A parameter set plus its architecture config."""

    cfg: ModelConfig
    params: dict[str, dc.Tensor]
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "Model":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD7]))
        return cls(cfg, init_params(cfg, rng), {"init_seed": seed})

    def param_count(self) -> int:
        return param_count(self.params)

    def clone(self) -> "Model":
        copied = {
            name: dc.Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)
            for name, t in self.params.items()
        }
        return Model(self.cfg, copied, dict(self.meta))


# ---------------------------------------------------------------------------
# forward pass


def _attention_mask(cfg: ModelConfig, step_mask: np.ndarray, dtype) -> np.ndarray:
    """Additive (B*H, T, T) mask: causal, padded keys blocked, self always open."""
    b, n_steps = step_mask.shape
    t_tok = 3 * n_steps
    token_real = np.repeat(step_mask, 3, axis=1) > 0  # (B, T)
    causal = np.tril(np.ones((t_tok, t_tok), dtype=bool))
    allowed = causal[None, :, :] & token_real[:, None, :]
    diag = np.arange(t_tok)
    allowed[:, diag, diag] = True
    mask = np.where(allowed, 0.0, -np.inf).astype(dtype)
    if cfg.n_heads > 1:
        mask = np.repeat(mask, cfg.n_heads, axis=0)
    return mask


def _timestep_indices(cfg: ModelConfig, batch: SequenceBatch) -> np.ndarray:
    ts = batch.timesteps.astype(np.int64).copy()
    if np.any(ts >= cfg.max_timestep) or np.any(ts < 0):
        raise ContractError(f"timestep outside [0, {cfg.max_timestep})")
    ts[:, batch.k_star:] += cfg.max_timestep  # history block uses offset rows
    return ts


def model_forward(model: Model, batch: SequenceBatch) -> dc.Tensor:
    """Action predictions at every state token: (B, K*+K, d_action) in [-1, 1]."""
    cfg = model.cfg
    p = model.params
    if batch.k_star != cfg.k_star or batch.context_k != cfg.context_k:
        raise ShapeError("model_forward(steps)", (batch.k_star, batch.context_k), (cfg.k_star, cfg.context_k))
    if batch.states.shape[2] != cfg.d_state or batch.actions.shape[2] != cfg.d_action:
        raise ShapeError("model_forward(dims)", batch.states.shape, (cfg.d_state,))
    b, n_steps = batch.rtg.shape
    dtype = p["embed_rtg.w"].dtype
    d = cfg.d_embed

    rtg_in = dc.tensor((batch.rtg / cfg.rtg_scale)[..., None], dtype=dtype)
    states_in = dc.tensor(batch.states, dtype=dtype)
    actions_in = dc.tensor(batch.actions, dtype=dtype)

    time_e = dc.embedding(p["embed_timestep"], _timestep_indices(cfg, batch))
    rtg_e = dc.add(dc.bias_add(dc.matmul(rtg_in, p["embed_rtg.w"]), p["embed_rtg.b"]), time_e)
    state_e = dc.add(dc.bias_add(dc.matmul(states_in, p["embed_state.w"]), p["embed_state.b"]), time_e)
    action_e = dc.add(dc.bias_add(dc.matmul(actions_in, p["embed_action.w"]), p["embed_action.b"]), time_e)

    # interleave to token order (rtg_t, state_t, action_t) per step
    parts = [dc.reshape(e, (b, n_steps, 1, d)) for e in (rtg_e, state_e, action_e)]
    x = dc.reshape(dc.concat(parts, axis=2), (b, 3 * n_steps, d))

    mask = _attention_mask(cfg, batch.step_mask, np.float64 if dtype == np.float64 else np.float32)
    x = _transformer_stack(cfg, p, x, mask)

    x = dc.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    state_positions = 3 * np.arange(n_steps) + 1
    hidden = dc.index_select(x, 1, state_positions)
    logits = dc.bias_add(dc.matmul(hidden, p["head_action.w"]), p["head_action.b"])
    return dc.tanh(logits)


def _transformer_stack(cfg: ModelConfig, p, x: dc.Tensor, mask: np.ndarray) -> dc.Tensor:
    b, t_tok, d = x.shape
    h_heads = cfg.n_heads
    dh = d // h_heads
    scale = 1.0 / np.sqrt(dh)
    for i in range(cfg.n_layers):
        pre = f"block{i}"
        h = dc.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        qkv = dc.bias_add(dc.matmul(h, p[f"{pre}.attn.wqkv"]), p[f"{pre}.attn.bqkv"])
        q = dc.index_select(qkv, 2, np.arange(0, d))
        k = dc.index_select(qkv, 2, np.arange(d, 2 * d))
        v = dc.index_select(qkv, 2, np.arange(2 * d, 3 * d))
        if h_heads > 1:
            q, k, v = (_split_heads(t, b, t_tok, h_heads, dh) for t in (q, k, v))
        scores = dc.scale(dc.matmul(q, _swap_last(k)), scale)
        att = dc.softmax_lastaxis(scores, additive_mask=mask)
        out = dc.matmul(att, v)
        if h_heads > 1:
            out = _merge_heads(out, b, t_tok, h_heads, dh)
        att_out = dc.bias_add(dc.matmul(out, p[f"{pre}.attn.wo"]), p[f"{pre}.attn.bo"])
        x = dc.add(x, att_out)
        h2 = dc.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        inner = dc.relu(dc.bias_add(dc.matmul(h2, p[f"{pre}.mlp.w1"]), p[f"{pre}.mlp.b1"]))
        mlp_out = dc.bias_add(dc.matmul(inner, p[f"{pre}.mlp.w2"]), p[f"{pre}.mlp.b2"])
        x = dc.add(x, mlp_out)
    return x


def _swap_last(t: dc.Tensor) -> dc.Tensor:
    return dc.transpose(t, (0, 2, 1))


def _split_heads(t: dc.Tensor, b: int, t_tok: int, h: int, dh: int) -> dc.Tensor:
    t = dc.reshape(t, (b, t_tok, h, dh))
    t = dc.transpose(t, (0, 2, 1, 3))
    return dc.reshape(t, (b * h, t_tok, dh))


def _merge_heads(t: dc.Tensor, b: int, t_tok: int, h: int, dh: int) -> dc.Tensor:
    t = dc.reshape(t, (b, h, t_tok, dh))
    t = dc.transpose(t, (0, 2, 1, 3))
    return dc.reshape(t, (b, t_tok, h * dh))


def dt_loss(model: Model, batch: SequenceBatch) -> dc.Tensor:
    """Masked MSE between predicted and target actions (scalar tensor)."""
    preds = model_forward(model, batch)
    dtype = preds.dtype
    loss_mask = batch.loss_mask
    if not model.cfg.loss_on_prompt:
        loss_mask = loss_mask.copy()
        loss_mask[:, : batch.k_star] = 0.0
    targets = dc.tensor(batch.action_targets, dtype=dtype)
    return dc.masked_mse(preds, targets, loss_mask.astype(dtype))


# ---------------------------------------------------------------------------
# inference


def act(model: Model, prompt: PromptSegment | None, history: History) -> np.ndarray:
    """Action for the newest history step. `history.rtg` must already hold
    target-minus-collected values; pass at most context_k trailing steps."""
    batch = assemble_input(prompt, history, model.cfg.context_k)
    preds = model_forward(model, batch)
    return np.asarray(preds.data[0, -1], dtype=np.float64)


def rollout_many(
    model: Model,
    prompts: list[PromptSegment] | None,
    task: envs.TaskSpec,
    episodes_per_prompt: int,
    target_rtg: float,
    seed: int,
    collect_states: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Lock-step batched rollouts, one row of episodes per prompt.

    Episode j of every prompt shares the rng stream (seed, j): common random
    numbers, so comparing prompts is a paired experiment. Returns an array of
    shape (n_prompts, episodes_per_prompt) of episodic returns, plus the
    visited states (n_prompts, episodes_per_prompt, horizon, d_s) when asked.
    `prompts=None` drives a prompt-free (k_star = 0) model.
    """
    cfg = model.cfg
    horizon = task.horizon
    n_prompts = len(prompts) if prompts is not None else 1
    n_eps = episodes_per_prompt
    n = n_prompts * n_eps
    k = cfg.context_k
    # episode j of each prompt row gets the same stream
    rngs = [
        np.random.default_rng(np.random.SeedSequence([int(seed), j]))
        for _ in range(n_prompts)
        for j in range(n_eps)
    ]
    states = envs.reset_batch(task, rngs)

    states_buf = np.zeros((n, horizon, cfg.d_state))
    actions_buf = np.zeros((n, horizon, cfg.d_action))
    rtg_buf = np.zeros((n, horizon))
    returns = np.zeros(n)
    rtg_live = np.full(n, float(target_rtg))

    length = cfg.n_steps
    batch_rtg = np.zeros((n, length), dtype=np.float32)
    batch_states = np.zeros((n, length, cfg.d_state), dtype=np.float32)
    batch_actions = np.zeros((n, length, cfg.d_action), dtype=np.float32)
    batch_ts = np.zeros((n, length), dtype=np.int64)
    step_mask = np.zeros((n, length), dtype=np.float32)
    if prompts is not None:
        for i, prompt in enumerate(prompts):
            if prompt.k_star != cfg.k_star:
                raise ShapeError("rollout(prompt)", (prompt.k_star,), (cfg.k_star,))
            rows = slice(i * n_eps, (i + 1) * n_eps)
            batch_rtg[rows, : cfg.k_star] = prompt.rtg
            batch_states[rows, : cfg.k_star] = prompt.states
            batch_actions[rows, : cfg.k_star] = prompt.actions
            batch_ts[rows, : cfg.k_star] = np.clip(prompt.timesteps, 0, cfg.max_timestep - 1)
        step_mask[:, : cfg.k_star] = 1.0
    elif cfg.k_star != 0:
        raise ContractError("model expects a prompt but none was given")

    for t in range(horizon):
        states_buf[:, t] = states
        rtg_buf[:, t] = rtg_live
        lo = max(0, t + 1 - k)
        h = t + 1 - lo
        pad = k - h
        base = cfg.k_star + pad
        batch_rtg[:, cfg.k_star :] = 0
        batch_states[:, cfg.k_star :] = 0
        batch_actions[:, cfg.k_star :] = 0
        batch_ts[:, cfg.k_star :] = 0
        step_mask[:, cfg.k_star :] = 0
        batch_rtg[:, base:] = rtg_buf[:, lo : t + 1]
        batch_states[:, base:] = states_buf[:, lo : t + 1]
        if h > 1:
            batch_actions[:, base : length - 1] = actions_buf[:, lo:t]
        batch_ts[:, base:] = np.arange(lo, t + 1)
        step_mask[:, base:] = 1.0

        batch = SequenceBatch(
            rtg=batch_rtg, states=batch_states, actions=batch_actions,
            timesteps=batch_ts, step_mask=step_mask,
            action_targets=np.zeros_like(batch_actions), loss_mask=np.zeros_like(step_mask),
            k_star=cfg.k_star, context_k=cfg.context_k,
        )
        preds = model_forward(model, batch)
        acts = np.asarray(preds.data[:, -1], dtype=np.float64)
        actions_buf[:, t] = acts
        states, rewards = envs.step_batch(task, states, acts)
        returns += rewards
        rtg_live = rtg_live - rewards

    shaped = returns.reshape(n_prompts, n_eps)
    trajs = states_buf.reshape(n_prompts, n_eps, horizon, cfg.d_state).copy() if collect_states else None
    return shaped, trajs


def rollout_episodes(
    model: Model,
    prompt: PromptSegment | None,
    task: envs.TaskSpec,
    n_episodes: int,
    target_rtg: float,
    seed: int,
    collect_states: bool = False,
) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Single-prompt convenience wrapper over :func:`rollout_many`."""
    returns, trajs = rollout_many(
        model, None if prompt is None else [prompt], task, n_episodes,
        target_rtg, seed, collect_states=collect_states,
    )
    return returns[0], (list(trajs[0]) if trajs is not None else None)


# ---------------------------------------------------------------------------
# checkpoint persistence


def save_checkpoint(directory, model: Model, extra_meta: dict | None = None) -> Path:
    """Write `manifest.json` plus `params.bin` (little-endian float32 blob)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data.astype("<f4"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "size": int(arr.size)})
        offset += arr.size
        chunks.append(arr.reshape(-1))
    manifest = {
        "kind": "model-checkpoint",
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.cfg),
        "params": entries,
        "total_values": offset,
        "meta": {**model.meta, **(extra_meta or {})},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    np.concatenate(chunks).tofile(directory / "params.bin")
    return directory


def load_checkpoint(directory) -> Model:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(manifest_path, exc.lineno, exc.msg) from exc
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ParseError(manifest_path, 1, f"unsupported checkpoint format_version {version}")
    cfg = ModelConfig(**manifest["config"])
    blob = np.fromfile(directory / "params.bin", dtype="<f4")
    if blob.size != manifest["total_values"]:
        raise ParseError(directory / "params.bin", 0,
                         f"expected {manifest['total_values']} values, found {blob.size}")
    params: dict[str, dc.Tensor] = {}
    for entry in manifest["params"]:
        size, shape = entry["size"], tuple(entry["shape"])
        arr = blob[entry["offset"] : entry["offset"] + size].reshape(shape).copy()
        params[entry["name"]] = dc.Tensor(arr, requires_grad=True, name=entry["name"])
    return Model(cfg, params, manifest.get("meta", {}))
