"""Executable checks: random-projection bound, low-rank representability,
reduction to vanilla attention, and finite-difference gradient agreement."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attention as att
from .autodiff import Tape, backward, finite_diff_grad, relative_discrepancy
from .errors import ParameterError
from .numeric import (jacobi_svd, make_rng, rank_from_singular_values,
                      relative_frobenius_error, truncate)

MIN_JL_TRIALS = 100


# --- random projection of the hidden dimension -------------------------------

def jl_minimum_dim(d_p: int, epsilon: float) -> int:
    """Smallest ``d_in`` with ``d_in >= 10 ln(d_p) / (eps^2 - eps^3)``.

    The logarithm is natural, matching the e-based tail bound it comes from.
    """
    if not 0.0 < epsilon < 1.0:
        raise ParameterError(f"epsilon must lie in (0, 1), got {epsilon}")
    if d_p < 2:
        raise ParameterError(f"d_p must be >= 2, got {d_p}")
    return math.ceil(10.0 * math.log(d_p) / (epsilon ** 2 - epsilon ** 3))


def jl_failure_bound(d_p: int, d_in: int, epsilon: float) -> float:
    """``2 d_p^2 exp(-(eps^2 - eps^3) d_in / 4)`` clamped to [0, 1]."""
    b = 2.0 * d_p * d_p * math.exp(-(epsilon ** 2 - epsilon ** 3) * d_in / 4.0)
    return min(1.0, max(0.0, b))


@dataclass
class JlTrialReport:
    d: int
    d_p: int
    d_in: int
    epsilon: float
    trials: int
    failures: int
    bound: float
    variance: float
    reference: str = "product"
    identity: bool = False

    @property
    def rate(self) -> float:
        return self.failures / self.trials

    @property
    def limit(self) -> float:
        """Bound plus 3 binomial standard deviations plus 0.01."""
        b = self.bound
        return b + 3.0 * math.sqrt(b * (1.0 - b) / self.trials) + 0.01

    @property
    def vacuous(self) -> bool:
        return self.bound >= 1.0

    @property
    def passed(self) -> bool:
        return self.rate <= self.limit

    def record(self) -> dict:
        params = {"d": self.d, "d_p": self.d_p, "d_in": self.d_in, "epsilon": self.epsilon,
                  "variance": self.variance, "reference": self.reference,
                  "identity": self.identity, "vacuous": self.vacuous}
        return {"check": "jl_monte_carlo", "params": params, "trials": self.trials,
                "failures": self.failures, "bound": self.bound, "pass": self.passed}


def jl_monte_carlo(d: int, d_p: int, d_in: int, epsilon: float, trials: int, seed: int,
                   *, variance: float | None = None, reference: str = "product",
                   identity: bool = False) -> JlTrialReport:
    """Monte-Carlo estimate of how often ``A R R^T B`` misses ``A B``.

    Each trial draws standard Gaussian ``A`` (d_p x d), ``B`` (d x d_p) and a
    fresh ``R`` (d x d_in) with i.i.d. N(0, ``variance``) entries; ``variance``
    defaults to ``1/d``. A trial fails when ``||A R R^T B - A B||_F`` exceeds
    ``eps * ||A B||_F`` (``reference="product"``) or
    ``eps * ||A||_F ||B||_F`` (``reference="factors"``). ``identity=True``
    replaces ``R`` with the identity and needs ``d_in == d``.
    """
    if trials < MIN_JL_TRIALS:
        raise ParameterError(f"need at least {MIN_JL_TRIALS} trials, got {trials}")
    if reference not in ("product", "factors"):
        raise ParameterError(f"unknown reference {reference!r}")
    if identity and d_in != d:
        raise ParameterError("identity projection needs d_in == d")
    if variance is None:
        variance = 1.0 / d
    sd = math.sqrt(variance)
    failures = 0
    for trial in range(trials):
        rng = make_rng(seed, trial)
        a = rng.standard_normal((d_p, d))
        b = rng.standard_normal((d, d_p))
        exact = a @ b
        if identity:
            approx = (a @ np.eye(d)) @ (np.eye(d) @ b)
        else:
            r = rng.normal(0.0, sd, size=(d, d_in))
            approx = (a @ r) @ (r.T @ b)
        err = np.linalg.norm(approx - exact)
        if reference == "product":
            scale = np.linalg.norm(exact)
        else:
            scale = np.linalg.norm(a) * np.linalg.norm(b)
        if err > epsilon * scale:
            failures += 1
    return JlTrialReport(d, d_p, d_in, epsilon, trials, failures,
                         jl_failure_bound(d_p, d_in, epsilon), variance, reference, identity)


def jl_grid(d: int = 64, epsilons=(0.3, 0.5, 0.7), d_ps=(8, 16), trials: int = 2000,
            seed: int = 0, **kwargs) -> list[JlTrialReport]:
    reports = []
    for eps in epsilons:
        for d_p in d_ps:
            m = jl_minimum_dim(d_p, eps)
            for d_in in (m, 2 * m):
                reports.append(jl_monte_carlo(d, d_p, d_in, eps, trials, seed, **kwargs))
    return reports


# --- exact low-rank representability -----------------------------------------

@dataclass
class RepresentabilityReport:
    n: int
    d: int
    r: int
    rank: int
    error_r: float
    error_r_minus_1: float

    @property
    def passed(self) -> bool:
        return self.rank <= self.r and self.error_r < 1e-8 and self.error_r_minus_1 > 1e-4

    def record(self) -> dict:
        return {"check": "lowrank_representability",
                "params": {"n": self.n, "d": self.d, "r": self.r, "rank": self.rank,
                           "error_r": self.error_r, "error_r_minus_1": self.error_r_minus_1},
                "trials": 1, "failures": 0 if self.passed else 1, "bound": 1e-8,
                "pass": self.passed}


def representability(q, k, r: int) -> RepresentabilityReport:
    """Rank and truncation errors of ``Q K^T`` at ranks ``r`` and ``r - 1``."""
    m = q @ k.T
    n, d = q.shape
    u, s, vt = jacobi_svd(m)

    def err(rank):
        if rank == 0:
            return 1.0
        ur, sr, vtr = truncate(u, s, vt, rank)
        return relative_frobenius_error(m, ur @ sr @ vtr)

    return RepresentabilityReport(n, d, r, rank_from_singular_values(s), err(r), err(r - 1))


def lowrank_representability_check(n: int, d: int, r: int, seed: int) -> RepresentabilityReport:
    """Q, K of exact rank ``r``, then :func:`representability`.

    Both are Gaussian ``n x r`` factors times a shared orthonormal ``r x d``
    basis, which keeps the r-th singular value of ``Q K^T`` away from zero so
    the rank-(r-1) strictness check is meaningful.
    """
    if not 1 <= r <= min(n, d):
        raise ParameterError(f"r={r} must lie in [1, min(n, d)={min(n, d)}]")
    rng = make_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d, r)))
    q = rng.standard_normal((n, r)) @ basis.T
    k = rng.standard_normal((n, r)) @ basis.T
    return representability(q, k, r)


# --- reduction to vanilla attention ------------------------------------------

def reduction_identity_gap(n: int, d: int, seed: int, heads: int = 1) -> float:
    """Max-abs gap between DBA with every compression disabled and vanilla.

    Both layers share the same Q/K/V/O projections and input.
    """
    rng = make_rng(seed)
    cfg = att.AttentionConfig(n=n, d=d, d_p=min(n, d), d_in=d, heads=heads,
                              mechanism="dba_no_seq_compress+dba_no_dim_compress")
    p = att.DbaParams.init(cfg, rng)
    x = rng.uniform(-1.0, 1.0, size=(n, d))
    v = att.VanillaParams(p.wq, p.wk, p.wv, p.wo)
    ours = att.forward(x, p, cfg)
    ref = att.forward(x, v, cfg.replace(mechanism="vanilla"))
    return float(np.max(np.abs(ours - ref)))


# --- gradient checks ---------------------------------------------------------

@dataclass
class GradcheckReport:
    kind: str
    seed: int
    discrepancies: dict[str, float] = field(default_factory=dict)

    @property
    def max_discrepancy(self) -> float:
        return max(self.discrepancies.values())

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_discrepancy <= tol


def _self_loss(t, tensors, cfg):
    p = att.DbaParams.from_named(tensors, "p.")
    y = att.dba_self_attention(t, tensors["x"], p, cfg)
    return t.scale(t.sum(t.mul(y, y)), 0.5)


def _cross_loss(t, tensors, cfg):
    p1 = att.DbaParams.from_named(tensors, "p1.")
    p2 = att.DbaParams.from_named(tensors, "p2.")
    y = att.dba_cross_attention(t, tensors["x1"], tensors["x2"], p1, p2, cfg)
    return t.scale(t.sum(t.mul(y, y)), 0.5)


def gradcheck_tensors(loss_fn, values: dict, cfg, h: float = 1e-5) -> dict[str, float]:
    """Backward vs central differences for every tensor in ``values``."""
    t = Tape()
    nodes = {k: t.param(v) for k, v in values.items()}
    loss = loss_fn(t, nodes, cfg)
    grads = backward(t, loss)
    out = {}
    for name, v in values.items():
        def f(xv, name=name):
            tt = Tape()
            consts = {k: tt.const(xv if k == name else val) for k, val in values.items()}
            return loss_fn(tt, consts, cfg).value[0, 0]
        fd = finite_diff_grad(f, v, h)
        out[name] = relative_discrepancy(grads[nodes[name].id], fd)
    return out


def gradcheck_layer(cfg: att.AttentionConfig, seed: int, *, kind: str = "self",
                    n2: int | None = None, params=None, x=None) -> GradcheckReport:
    """Loss ``sum(layer(X)^2)/2``; compares every parameter tensor and the input(s).

    ``params`` (a :class:`DbaParams`, or a pair for cross-attention) and ``x``
    override the random draws, which are uniform in [-1, 1] for inputs.
    """
    rng = make_rng(seed)
    if kind == "self":
        p = params if params is not None else att.DbaParams.init(cfg, rng)
        if x is None:
            x = rng.uniform(-1.0, 1.0, size=(cfg.n, cfg.d))
        values = {"x": np.asarray(x, dtype=np.float64), **p.named("p.")}
        disc = gradcheck_tensors(_self_loss, values, cfg)
    elif kind == "cross":
        if params is not None:
            p1, p2 = params
        else:
            p1 = att.DbaParams.init(cfg, rng, cross=True)
            p2 = att.DbaParams.init(cfg, rng)
        if x is None:
            x1 = rng.uniform(-1.0, 1.0, size=(cfg.n, cfg.d))
            x2 = rng.uniform(-1.0, 1.0, size=(n2 or cfg.n, cfg.d))
        else:
            x1, x2 = x
        values = {"x1": x1, "x2": x2, **p1.named("p1."), **p2.named("p2.")}
        disc = gradcheck_tensors(_cross_loss, values, cfg)
    else:
        raise ParameterError(f"kind must be 'self' or 'cross', got {kind!r}")
    return GradcheckReport(kind, seed, disc)


# --- report log --------------------------------------------------------------

def append_report(path, record: dict) -> None:
    """Append one single-line JSON record with keys check/params/trials/failures/bound/pass."""
    line = json.dumps({k: record[k] for k in ("check", "params", "trials", "failures",
                                              "bound", "pass")}, sort_keys=False)
    with Path(path).open("a", encoding="utf-8") as fh:
        fh.write(line + "\n")
