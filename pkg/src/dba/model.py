"""A tiny transformer classifier built on the tape.

Each block is pre-norm::

    x = x + attn(rms_norm(x))
    x = x + W2 relu(W1 rms_norm(x))

Tokens are embedded through a one-hot matmul. Optional extras live outside
the attention layers: sinusoidal positions, and a token-shift embedding of
the previous token added at each position. Pooling is the sequence mean or
the first token, followed by a final norm and a linear head.

Cross-match models run cross-attention from the first sequence into the
second; the second sequence is embedded with the same table and is not
updated by the blocks.
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass

import numpy as np

from . import attention as att
from .attention import AttentionConfig
from .autodiff import Tape
from .errors import ContractError, ParameterError
from .numeric import gaussian, make_rng


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_classes: int
    n: int
    d: int = 32
    d_p: int = 8
    d_in: int = 12
    heads: int = 1
    mechanism: str = "dba"
    depth: int = 1
    ffn_mult: int = 2
    positions: bool = False
    token_shift: bool = False
    pool: str = "mean"
    cross: bool = False
    n2: int = 0
    share_z: bool = False

    def __post_init__(self):
        if self.pool not in ("mean", "first"):
            raise ParameterError(f"pool must be 'mean' or 'first', got {self.pool!r}")
        if self.depth < 1 or self.ffn_mult < 1:
            raise ParameterError("depth and ffn_mult must be >= 1")
        if self.cross and self.mechanism == "fixed_lowrank_baseline":
            raise ParameterError("the fixed low-rank baseline has no cross-attention form")
        if self.share_z and not self.mechanism.startswith("dba"):
            raise ParameterError("share_z needs a DBA mechanism")
        self.attention(self.n)  # validates the attention settings

    def attention(self, n: int) -> AttentionConfig:
        return AttentionConfig(n=n, d=self.d, d_p=self.d_p, d_in=self.d_in,
                               heads=self.heads, mechanism=self.mechanism)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def _attn_classes(cfg: ModelConfig):
    if cfg.mechanism == "vanilla":
        return att.VanillaParams
    if cfg.mechanism == "fixed_lowrank_baseline":
        return att.FixedParams
    return att.DbaParams


def init_model(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Named parameter tensors; the names double as checkpoint keys."""
    rng = make_rng(seed)
    d = cfg.d
    acfg = cfg.attention(cfg.n)
    params = {"embed": gaussian(rng, cfg.vocab_size, d, 1.0)}
    if cfg.token_shift:
        params["prev_embed"] = gaussian(rng, cfg.vocab_size, d, 1.0)
    cls = _attn_classes(cfg)
    for i in range(cfg.depth):
        pre = f"l{i}."
        if cfg.cross:
            if cls is att.DbaParams:
                params.update(att.DbaParams.init(acfg, rng, cross=True).named(pre + "q."))
                params.update(att.DbaParams.init(acfg, rng).named(pre + "kv."))
            else:
                params.update(att.VanillaParams.init(acfg, rng).named(pre + "attn."))
        else:
            params.update(att.init_params(acfg, rng).named(pre + "attn."))
        params[pre + "norm1"] = np.ones(d)
        params[pre + "norm2"] = np.ones(d)
        params[pre + "ff1"] = gaussian(rng, d, cfg.ffn_mult * d, 2.0 / d)
        params[pre + "ff2"] = gaussian(rng, cfg.ffn_mult * d, d, 1.0 / (cfg.ffn_mult * d))
    if cfg.share_z:
        params["z"] = params[("l0.q." if cfg.cross else "l0.attn.") + "z"]
        for i in range(cfg.depth):
            params.pop(f"l{i}.{'q.' if cfg.cross else 'attn.'}z")
    params["norm_f"] = np.ones(d)
    params["head"] = gaussian(rng, d, cfg.n_classes, 1.0 / d)
    return params


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    return {k: v.shape for k, v in init_model(cfg, 0).items()}


def attention_param_count(params: dict[str, np.ndarray]) -> int:
    """Entries in the attention layers only (no embeddings, norms, FFN, head)."""
    return sum(v.size for k, v in params.items()
               if k == "z" or any(f".{part}." in k for part in ("attn", "q", "kv")))


def sinusoidal(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _one_hot(tokens, size):
    out = np.zeros((*tokens.shape, size))
    np.put_along_axis(out, tokens[..., None], 1.0, axis=-1)
    return out


def _embed(t: Tape, nodes, cfg: ModelConfig, tokens):
    x = t.matmul(t.const(_one_hot(tokens, cfg.vocab_size)), nodes["embed"])
    if cfg.token_shift:
        hot = _one_hot(tokens, cfg.vocab_size)
        shifted = np.concatenate([np.zeros_like(hot[..., :1, :]), hot[..., :-1, :]], axis=-2)
        x = t.add(x, t.matmul(t.const(shifted), nodes["prev_embed"]))
    if cfg.positions:
        x = t.add(x, t.const(sinusoidal(tokens.shape[-1], cfg.d)))
    return x


def _layer_params(nodes, cfg: ModelConfig, i: int):
    cls = _attn_classes(cfg)
    pre = f"l{i}."
    if cfg.share_z:
        nodes = {**nodes, (pre + ("q." if cfg.cross else "attn.") + "z"): nodes["z"]}
    if cfg.cross and cls is att.DbaParams:
        return (att.DbaParams.from_named(nodes, pre + "q."),
                att.DbaParams.from_named(nodes, pre + "kv."))
    return cls.from_named(nodes, pre + "attn.")


def logits(t: Tape, nodes, cfg: ModelConfig, tokens, tokens2=None):
    """Class logits ``(B, n_classes)`` for integer ``tokens`` of shape ``(B, n)``."""
    tokens = np.asarray(tokens)
    n = tokens.shape[-1]
    acfg = cfg.attention(n)
    x = _embed(t, nodes, cfg, tokens)
    x2 = None
    if cfg.cross:
        if tokens2 is None:
            raise ContractError("cross-attention model needs a second sequence")
        x2 = _embed(t, nodes, cfg.replace(token_shift=False, positions=False),
                    np.asarray(tokens2))
    for i in range(cfg.depth):
        p = _layer_params(nodes, cfg, i)
        h = t.rms_norm(x, nodes[f"l{i}.norm1"])
        if cfg.cross:
            if isinstance(p, tuple):
                a = att.dba_cross_attention(t, h, x2, p[0], p[1], acfg)
            else:
                a = att.vanilla_cross_attention(t, h, x2, p, acfg)
        else:
            a = att.self_attention(t, h, p, acfg)
        x = t.add(x, a)
        h = t.rms_norm(x, nodes[f"l{i}.norm2"])
        h = t.matmul(t.relu(t.matmul(h, nodes[f"l{i}.ff1"])), nodes[f"l{i}.ff2"])
        x = t.add(x, h)
    if cfg.pool == "mean":
        pooled = t.row_mean(x)                                   # (B, 1, d)
    else:
        sel = np.zeros((1, n))
        sel[0, 0] = 1.0
        pooled = t.matmul(t.const(sel), x)                       # (B, 1, d)
    pooled = t.reshape(pooled, (*tokens.shape[:-1], cfg.d))
    return t.matmul(t.rms_norm(pooled, nodes["norm_f"]), nodes["head"])


def predict(params: dict[str, np.ndarray], cfg: ModelConfig, tokens, tokens2=None,
            batch_size: int = 256) -> np.ndarray:
    """Argmax class per sample, without gradients."""
    out = []
    for start in range(0, len(tokens), batch_size):
        t = Tape()
        nodes = {k: t.const(v) for k, v in params.items()}
        tb = tokens[start:start + batch_size]
        t2 = None if tokens2 is None else tokens2[start:start + batch_size]
        out.append(np.argmax(logits(t, nodes, cfg, tb, t2).value, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def default_config(task, mechanism: str = "dba", **overrides) -> ModelConfig:
    """Sensible per-task defaults: token shift and first-token pooling for recall."""
    base = dict(vocab_size=task.vocab_size, n_classes=task.n_classes, n=task.n,
                mechanism=mechanism)
    if task.kind == "sparse-recall":
        base.update(token_shift=True, pool="first")
    if task.kind == "cross-match":
        base.update(cross=True, n2=task.n2, d_p=min(8, task.n, task.n2))
    base.update(overrides)
    if "d_p" not in overrides:
        base["d_p"] = min(base.get("d_p", 8), task.n)
    return ModelConfig(**base)
