"""Vanilla attention, dynamic bilinear low-rank attention (DBA) and baselines.

All mechanisms are written against :class:`~dba.autodiff.Tape` nodes so the
same code serves inference, training and gradient checking. Inputs may carry
leading batch extents: ``x`` is ``(..., n, d)``, parameters are plain 2-D.

DBA self-attention per head, with ``W_r = softmax(Z_h Q_h^T)`` and
``W_c = softmax(Z_h K_h^T)`` over the token axis::

    Q_dba = (W_r Q_h) R            d_p x d_in
    K_dba = (W_c K_h) R            d_p x d_in
    V_dba = (X A_c)^T V_h          d_p x d_h
    out_h = (X A_r) (softmax(Q_dba K_dba^T / sqrt(d_in)) V_dba)

The evaluation order never forms an ``n x n`` intermediate.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape
from .errors import ContractError, DimensionError, ParameterError
from .numeric import gaussian

log = logging.getLogger(__name__)

BASE_MECHANISMS = (
    "vanilla",
    "dba",
    "dba_no_seq_compress",
    "dba_no_dim_compress",
    "fixed_lowrank_baseline",
)


@dataclass(frozen=True)
class AttentionConfig:
    n: int
    d: int
    d_p: int = 16
    d_in: int = 24
    heads: int = 1
    mechanism: str = "dba"

    def __post_init__(self):
        parts = self.mechanism.split("+")
        for part in parts:
            if part not in BASE_MECHANISMS:
                raise ParameterError(f"unknown mechanism {part!r}")
        if len(parts) > 1 and not all(p.startswith("dba") for p in parts):
            raise ParameterError(f"only dba variants combine, got {self.mechanism!r}")
        for name in ("n", "d", "d_p", "d_in", "heads"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.d % self.heads:
            raise ParameterError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d_p > self.n:
            raise ParameterError(f"d_p={self.d_p} exceeds n={self.n}")
        if self.d_in > self.d:
            raise ParameterError(f"d_in={self.d_in} exceeds d={self.d}")
        if self.d_p > min(self.n, self.d):
            log.warning("d_p=%d > min(n, d)=%d: extra slots are redundant",
                        self.d_p, min(self.n, self.d))

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @property
    def is_dba(self) -> bool:
        return self.mechanism.startswith("dba")

    @property
    def seq_compress(self) -> bool:
        return "dba_no_seq_compress" not in self.mechanism.split("+")

    @property
    def dim_compress(self) -> bool:
        return "dba_no_dim_compress" not in self.mechanism.split("+")

    @property
    def variable_length(self) -> bool:
        return self.mechanism != "fixed_lowrank_baseline"

    def replace(self, **changes) -> "AttentionConfig":
        return dataclasses.replace(self, **changes)


class ParamSet:
    """Mixin for dataclasses whose fields are named tensors (or ``None``)."""

    def named(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + f.name: getattr(self, f.name)
                for f in dataclasses.fields(self) if getattr(self, f.name) is not None}

    @classmethod
    def from_named(cls, tensors, prefix: str = ""):
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = prefix + f.name
            if key in tensors:
                kwargs[f.name] = tensors[key]
            elif f.default is dataclasses.MISSING:
                raise KeyError(key)
        return cls(**kwargs)

    def bind(self, tape: Tape):
        """Same structure with every tensor registered as a tape parameter."""
        return dataclasses.replace(self, **{
            f.name: tape.param(getattr(self, f.name))
            for f in dataclasses.fields(self) if getattr(self, f.name) is not None
        })

    def size(self) -> int:
        return sum(int(np.size(v)) for v in self.named().values())


def _shape(x):
    return x.shape if isinstance(x, (Node, np.ndarray)) else np.shape(x)


def _expect(name, x, shape):
    if tuple(_shape(x)) != tuple(shape):
        raise DimensionError(f"{name} has shape {tuple(_shape(x))}, expected {tuple(shape)}")


@dataclass
class VanillaParams(ParamSet):
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def init(cls, cfg: AttentionConfig, rng):
        d = cfg.d
        return cls(*(gaussian(rng, d, d, 1.0 / d) for _ in range(4)))

    def check(self, cfg):
        for name in ("wq", "wk", "wv", "wo"):
            _expect(name, getattr(self, name), (cfg.d, cfg.d))


@dataclass
class DbaParams(ParamSet):
    """Learnable state of one DBA layer.

    ``lin`` is the bias-free map that turns a compressed hierarchy-2 sequence
    into the slot queries of a cross-attention layer; self-attention leaves it
    unset.
    """

    z: np.ndarray
    r: np.ndarray
    a_r: np.ndarray
    a_c: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    lin: np.ndarray | None = None

    @classmethod
    def init(cls, cfg: AttentionConfig, rng, cross: bool = False):
        d, d_p = cfg.d, cfg.d_p
        # R at N(0, heads/d) so the random-projection argument holds before training.
        return cls(
            z=gaussian(rng, d_p, d, 1.0 / d),
            r=gaussian(rng, cfg.d_head, cfg.d_in, cfg.heads / d),
            a_r=gaussian(rng, d, d_p, 1.0 / d),
            a_c=gaussian(rng, d, d_p, 1.0 / d),
            wq=gaussian(rng, d, d, 1.0 / d),
            wk=gaussian(rng, d, d, 1.0 / d),
            wv=gaussian(rng, d, d, 1.0 / d),
            wo=gaussian(rng, d, d, 1.0 / d),
            lin=gaussian(rng, d, d, 1.0 / d) if cross else None,
        )

    def check(self, cfg: AttentionConfig):
        d, d_p = cfg.d, cfg.d_p
        _expect("z", self.z, (d_p, d))
        _expect("r", self.r, (cfg.d_head, cfg.d_in))
        _expect("a_r", self.a_r, (d, d_p))
        _expect("a_c", self.a_c, (d, d_p))
        for name in ("wq", "wk", "wv", "wo"):
            _expect(name, getattr(self, name), (d, d))
        if self.lin is not None:
            _expect("lin", self.lin, (d, d))


@dataclass
class FixedParams(ParamSet):
    """Input-invariant low-rank baseline: projections tied to positions."""

    e: np.ndarray       # d_p x n, compresses queries
    f: np.ndarray       # d_p x n, compresses keys
    rec_r: np.ndarray   # n x d_p
    rec_c: np.ndarray   # n x d_p
    r: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def init(cls, cfg: AttentionConfig, rng):
        n, d, d_p = cfg.n, cfg.d, cfg.d_p
        return cls(
            e=gaussian(rng, d_p, n, 1.0 / n),
            f=gaussian(rng, d_p, n, 1.0 / n),
            rec_r=gaussian(rng, n, d_p, 1.0),
            rec_c=gaussian(rng, n, d_p, 1.0),
            r=gaussian(rng, cfg.d_head, cfg.d_in, cfg.heads / d),
            wq=gaussian(rng, d, d, 1.0 / d),
            wk=gaussian(rng, d, d, 1.0 / d),
            wv=gaussian(rng, d, d, 1.0 / d),
            wo=gaussian(rng, d, d, 1.0 / d),
        )

    @property
    def n(self) -> int:
        return _shape(self.e)[1]

    def check(self, cfg: AttentionConfig):
        n, d, d_p = cfg.n, cfg.d, cfg.d_p
        _expect("e", self.e, (d_p, n))
        _expect("f", self.f, (d_p, n))
        _expect("rec_r", self.rec_r, (n, d_p))
        _expect("rec_c", self.rec_c, (n, d_p))
        _expect("r", self.r, (cfg.d_head, cfg.d_in))
        for name in ("wq", "wk", "wv", "wo"):
            _expect(name, getattr(self, name), (d, d))


@dataclass
class ProjectionSet:
    """Dynamic projections of one input; ``w_r``/``w_c`` are ``(heads, d_p, n)``."""

    w_r: np.ndarray
    w_c: np.ndarray
    w_r_rec: np.ndarray   # n x d_p
    w_c_rec: np.ndarray   # n x d_p


def init_params(cfg: AttentionConfig, rng, cross: bool = False):
    if cfg.mechanism == "vanilla":
        return VanillaParams.init(cfg, rng)
    if cfg.mechanism == "fixed_lowrank_baseline":
        return FixedParams.init(cfg, rng)
    return DbaParams.init(cfg, rng, cross=cross)


# --- head plumbing -----------------------------------------------------------

def split_heads(t: Tape, x: Node, heads: int) -> Node:
    """``(..., n, d) -> (..., heads, n, d / heads)``."""
    *lead, n, d = x.shape
    x = t.reshape(x, (*lead, n, heads, d // heads))
    return t.swapaxes(x, -3, -2)


def merge_heads(t: Tape, x: Node) -> Node:
    *lead, h, n, dh = x.shape
    return t.reshape(t.swapaxes(x, -3, -2), (*lead, n, h * dh))


def _add_head_axis(t: Tape, x: Node) -> Node:
    *lead, a, b = x.shape
    return t.reshape(x, (*lead, 1, a, b))


def _check_input(x, d):
    if len(x.shape) < 2 or x.shape[-1] != d:
        raise DimensionError(f"input has shape {tuple(x.shape)}, expected (..., n, {d})")


# --- mechanisms --------------------------------------------------------------

def vanilla_attention(t: Tape, q: Node, k: Node, v: Node) -> Node:
    """``softmax(Q K^T / sqrt(d)) V``; materializes the full attention map."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"q {q.shape}, k {k.shape}, v {v.shape} do not agree")
    d = q.shape[-1]
    scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / math.sqrt(d))
    return t.matmul(t.softmax_rows(scores), v)


def vanilla_self_attention(t: Tape, x: Node, p: VanillaParams, cfg: AttentionConfig) -> Node:
    _check_input(x, cfg.d)
    h = cfg.heads
    q = split_heads(t, t.matmul(x, p.wq), h)
    k = split_heads(t, t.matmul(x, p.wk), h)
    v = split_heads(t, t.matmul(x, p.wv), h)
    return t.matmul(merge_heads(t, vanilla_attention(t, q, k, v)), p.wo)


def vanilla_cross_attention(t: Tape, x1: Node, x2: Node, p: VanillaParams,
                            cfg: AttentionConfig) -> Node:
    _check_input(x1, cfg.d)
    _check_input(x2, cfg.d)
    h = cfg.heads
    q = split_heads(t, t.matmul(x1, p.wq), h)
    k = split_heads(t, t.matmul(x2, p.wk), h)
    v = split_heads(t, t.matmul(x2, p.wv), h)
    return t.matmul(merge_heads(t, vanilla_attention(t, q, k, v)), p.wo)


def dynamic_projections(t: Tape, z: Node, q: Node, k: Node):
    """``(softmax(Z Q^T), softmax(Z K^T))``, each normalized over tokens."""
    if z.shape[-1] != q.shape[-1] or z.shape[-1] != k.shape[-1]:
        raise DimensionError(f"z {z.shape}, q {q.shape}, k {k.shape}: feature widths differ")
    w_r = t.softmax_rows(t.matmul(z, t.transpose(q)))
    w_c = t.softmax_rows(t.matmul(z, t.transpose(k)))
    return w_r, w_c


def reconstruction_maps(t: Tape, x: Node, a_r: Node, a_c: Node):
    if x.shape[-1] != a_r.shape[0] or x.shape[-1] != a_c.shape[0]:
        raise DimensionError(f"x {x.shape} incompatible with a_r {a_r.shape} / a_c {a_c.shape}")
    return t.matmul(x, a_r), t.matmul(x, a_c)


def _compressed_attention(t, q_dba, k_dba, v_dba, temperature):
    scores = t.scale(t.matmul(q_dba, t.transpose(k_dba)), 1.0 / math.sqrt(temperature))
    return t.matmul(t.softmax_rows(scores), v_dba)


def _warn_degenerate(cfg, n):
    if cfg.seq_compress and cfg.d_p > min(n, cfg.d):
        log.warning("d_p=%d > min(n=%d, d=%d): extra slots are redundant", cfg.d_p, n, cfg.d)


def dba_self_attention(t: Tape, x: Node, p: DbaParams, cfg: AttentionConfig) -> Node:
    """DBA self-attention; any sequence length works with the same ``p``."""
    if not cfg.is_dba:
        raise ContractError(f"mechanism {cfg.mechanism!r} is not a DBA variant")
    _check_input(x, cfg.d)
    p.check(cfg)
    n = x.shape[-2]
    _warn_degenerate(cfg, n)
    h = cfg.heads
    q = split_heads(t, t.matmul(x, p.wq), h)      # (..., h, n, d_h)
    k = split_heads(t, t.matmul(x, p.wk), h)
    v = split_heads(t, t.matmul(x, p.wv), h)

    if cfg.seq_compress:
        z = split_heads(t, p.z, h)                # (h, d_p, d_h)
        w_r, w_c = dynamic_projections(t, z, q, k)  # (..., h, d_p, n)
        q_l = t.matmul(w_r, q)                    # (..., h, d_p, d_h)
        k_l = t.matmul(w_c, k)
        w_r_rec, w_c_rec = reconstruction_maps(t, x, p.a_r, p.a_c)  # (..., n, d_p)
        v_dba = t.matmul(_add_head_axis(t, t.transpose(w_c_rec)), v)  # (..., h, d_p, d_h)
    else:
        q_l, k_l, v_dba = q, k, v

    if cfg.dim_compress:
        q_dba = t.matmul(q_l, p.r)                # (..., h, d_p, d_in)
        k_dba = t.matmul(k_l, p.r)
        temperature = cfg.d_in
    else:
        q_dba, k_dba = q_l, k_l
        temperature = cfg.d_head

    out = _compressed_attention(t, q_dba, k_dba, v_dba, temperature)  # (..., h, d_p, d_h)
    if cfg.seq_compress:
        out = t.matmul(_add_head_axis(t, w_r_rec), out)               # (..., h, n, d_h)
    return t.matmul(merge_heads(t, out), p.wo)


def compress_sequence(t: Tape, x: Node, z: Node) -> Node:
    """``softmax(Z X^T) X``: ``d_p`` convex combinations of the tokens of ``x``."""
    if z.shape[-1] != x.shape[-1]:
        raise DimensionError(f"z {z.shape} and x {x.shape}: feature widths differ")
    return t.matmul(t.softmax_rows(t.matmul(z, t.transpose(x))), x)


def cross_attention_from_compressed(t: Tape, x1: Node, c2_query: Node, c2_kv: Node,
                                    p1: DbaParams, p2: DbaParams,
                                    cfg: AttentionConfig) -> Node:
    """Second stage of DBA cross-attention given the compressed hierarchy-2 block.

    ``c2_query`` feeds the slot queries ``Z_1 = C_2 L`` that compress ``x1``;
    ``c2_kv`` supplies the keys and values. Both are normally the same node;
    they are separate so either path can be ablated.
    """
    h = cfg.heads
    z1 = split_heads(t, t.matmul(c2_query, p1.lin), h)   # (..., h, d_p, d_h)
    q1 = split_heads(t, t.matmul(x1, p1.wq), h)          # (..., h, n1, d_h)
    w_r1 = t.softmax_rows(t.matmul(z1, t.transpose(q1)))  # (..., h, d_p, n1)
    q_l = t.matmul(w_r1, q1)
    k2 = split_heads(t, t.matmul(c2_kv, p2.wk), h)       # (..., h, d_p, d_h)
    v2 = split_heads(t, t.matmul(c2_kv, p2.wv), h)
    if cfg.dim_compress:
        q_dba = t.matmul(q_l, p1.r)
        k_dba = t.matmul(k2, p1.r)
        temperature = cfg.d_in
    else:
        q_dba, k_dba = q_l, k2
        temperature = cfg.d_head
    out = _compressed_attention(t, q_dba, k_dba, v2, temperature)
    w_r_rec = t.matmul(x1, p1.a_r)                       # (..., n1, d_p)
    out = t.matmul(_add_head_axis(t, w_r_rec), out)
    return t.matmul(merge_heads(t, out), p1.wo)


def dba_cross_attention(t: Tape, x1: Node, x2: Node, p1: DbaParams, p2: DbaParams,
                        cfg: AttentionConfig, *, detach: str | None = None) -> Node:
    """Hierarchy-1 tokens ``x1`` attend to hierarchy-2 tokens ``x2``.

    Stage 1 compresses ``x2`` with ``p2.z``; stage 2 uses that block both to
    build the compression of ``x1`` and as keys/values. ``p1`` supplies the
    query side (``lin``, ``wq``, ``r``, ``a_r``, ``wo``), ``p2`` the key side
    (``z``, ``wk``, ``wv``). ``detach`` in {"query", "kv"} blocks gradient
    through one path for ablations.
    """
    _check_input(x1, cfg.d)
    _check_input(x2, cfg.d)
    if p1.lin is None:
        raise DimensionError("p1 has no cross-attention map 'lin'")
    p1.check(cfg)
    _expect("p2.z", p2.z, (cfg.d_p, cfg.d))
    if detach not in (None, "query", "kv"):
        raise ParameterError(f"detach must be None, 'query' or 'kv', got {detach!r}")
    c2 = compress_sequence(t, x2, p2.z)                  # (..., d_p, d)
    c2_query = t.stop_grad(c2) if detach == "query" else c2
    c2_kv = t.stop_grad(c2) if detach == "kv" else c2
    return cross_attention_from_compressed(t, x1, c2_query, c2_kv, p1, p2, cfg)


def fixed_lowrank_attention(t: Tape, x: Node, p: FixedParams, cfg: AttentionConfig) -> Node:
    """DBA pipeline with learned, input-invariant projections; fixed ``n`` only."""
    _check_input(x, cfg.d)
    n = x.shape[-2]
    if n != p.n:
        raise ContractError(
            f"fixed low-rank attention was built for n={p.n}, got n={n}; "
            "input-invariant projections cannot handle other lengths")
    h = cfg.heads
    q = split_heads(t, t.matmul(x, p.wq), h)
    k = split_heads(t, t.matmul(x, p.wk), h)
    v = split_heads(t, t.matmul(x, p.wv), h)
    q_dba = t.matmul(t.matmul(p.e, q), p.r)
    k_dba = t.matmul(t.matmul(p.f, k), p.r)
    v_dba = t.matmul(t.transpose(p.rec_c), v)
    out = _compressed_attention(t, q_dba, k_dba, v_dba, cfg.d_in)
    out = t.matmul(p.rec_r, out)
    return t.matmul(merge_heads(t, out), p.wo)


def self_attention(t: Tape, x: Node, p, cfg: AttentionConfig) -> Node:
    """Dispatch on ``cfg.mechanism``."""
    if cfg.mechanism == "vanilla":
        return vanilla_self_attention(t, x, p, cfg)
    if cfg.mechanism == "fixed_lowrank_baseline":
        return fixed_lowrank_attention(t, x, p, cfg)
    return dba_self_attention(t, x, p, cfg)


def forward(x, params, cfg: AttentionConfig) -> np.ndarray:
    """Plain-array convenience around :func:`self_attention`."""
    t = Tape()
    bound = dataclasses.replace(params, **{k: t.const(v) for k, v in params.named().items()})
    return self_attention(t, t.const(x), bound, cfg).value


def projections(x, params: DbaParams, cfg: AttentionConfig) -> ProjectionSet:
    """Dynamic projection and reconstruction matrices a DBA layer applies to ``x``."""
    t = Tape()
    xn = t.const(x)
    q = split_heads(t, t.matmul(xn, t.const(params.wq)), cfg.heads)
    k = split_heads(t, t.matmul(xn, t.const(params.wk)), cfg.heads)
    z = split_heads(t, t.const(params.z), cfg.heads)
    w_r, w_c = dynamic_projections(t, z, q, k)
    w_r_rec, w_c_rec = reconstruction_maps(t, xn, t.const(params.a_r), t.const(params.a_c))
    return ProjectionSet(w_r.value, w_c.value, w_r_rec.value, w_c_rec.value)
