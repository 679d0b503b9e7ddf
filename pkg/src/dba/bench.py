"""Complexity accounting and wall-clock sweeps for vanilla vs DBA attention.

FLOP convention: a multiply-add is 2 flops, softmax costs 5 ops per entry
(max, subtract, exp, sum, divide). The 1/sqrt(d) scaling is folded into the
softmax cost. Peak bytes are computed by replaying each mechanism's op
sequence with explicit liveness, 8 bytes per float64 entry; the input and
the parameters are not counted.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import attention as att
from .attention import AttentionConfig
from .errors import ParameterError
from .numeric import make_rng

SOFTMAX_OPS = 5
BYTES = 8
CSV_HEADER = ("mechanism", "n", "d", "d_p", "d_in", "heads", "flops", "peak_bytes",
              "wall_ms_mean", "wall_ms_std", "reps")


def count_flops(cfg: AttentionConfig, include_projections: bool = True) -> int:
    n, d, d_p, d_in, h = cfg.n, cfg.d, cfg.d_p, cfg.d_in, cfg.heads
    dh = cfg.d_head
    total = 8 * n * d * d if include_projections else 0    # X Wq, X Wk, X Wv, O Wo
    mech = cfg.mechanism

    if mech == "vanilla":
        total += 2 * n * n * dh * h                        # Q K^T
        total += SOFTMAX_OPS * n * n * h                   # softmax over n x n
        total += 2 * n * n * dh * h                        # P V
        return total

    seq = mech == "fixed_lowrank_baseline" or cfg.seq_compress
    dim = mech == "fixed_lowrank_baseline" or cfg.dim_compress
    m = d_p if seq else n                                  # compressed length
    width = d_in if dim else dh                            # score width

    if seq:
        if mech != "fixed_lowrank_baseline":
            total += 2 * (2 * d_p * n * dh * h)            # Z Q^T, Z K^T
            total += 2 * SOFTMAX_OPS * d_p * n * h         # softmax for W_r, W_c
            total += 2 * (2 * n * d * d_p)                 # X A_r, X A_c
        total += 2 * (2 * d_p * n * dh * h)                # W_r Q, W_c K
        total += 2 * d_p * n * dh * h                      # W_c'^T V
    if dim:
        total += 2 * (2 * m * dh * d_in * h)               # (.) R on both sides
    total += 2 * m * m * width * h                         # Q_dba K_dba^T
    total += SOFTMAX_OPS * m * m * h
    total += 2 * m * m * dh * h                            # P' V_dba
    if seq:
        total += 2 * n * d_p * dh * h                      # W_r' (P' V_dba)
    return total


def flop_slopes(cfg: AttentionConfig, n_values) -> tuple[float, float]:
    """Log-log slopes of ``count_flops`` in n: raw, and with the n-free part removed.

    DBA counts are affine in n; the constant (slot-sized products that do not
    touch the sequence) pulls the raw slope slightly below 1 at small n. The
    n-dependent remainder is exactly proportional to n for DBA.
    """
    ns = sorted(n_values)
    counts = [count_flops(cfg.replace(n=n)) for n in ns]
    a = count_flops(cfg.replace(n=ns[0]))
    b = count_flops(cfg.replace(n=2 * ns[0]))
    const = 2 * a - b if cfg.mechanism != "vanilla" else 0
    raw = _loglog_fit(ns, counts)[0]
    inc = _loglog_fit(ns, [c - const for c in counts])[0]
    return raw, inc


class _Liveness:
    def __init__(self):
        self.live: dict[str, int] = {}
        self.peak = 0
        self.largest = 0

    def alloc(self, name, elems, free=()):
        self.live[name] = elems
        self.largest = max(self.largest, elems)
        self.peak = max(self.peak, sum(self.live.values()))
        for f in free:
            self.live.pop(f, None)


def peak_trace(cfg: AttentionConfig) -> _Liveness:
    n, d, d_p, h = cfg.n, cfg.d, cfg.d_p, cfg.heads
    dh = cfg.d_head
    lv = _Liveness()
    lv.alloc("q", n * d)
    lv.alloc("k", n * d)
    lv.alloc("v", n * d)
    mech = cfg.mechanism
    if mech == "vanilla":
        lv.alloc("scores", h * n * n, free=("q", "k"))
        lv.alloc("p", h * n * n, free=("scores",))
        lv.alloc("o", n * d, free=("p", "v"))
        lv.alloc("y", n * d, free=("o",))
        return lv

    fixed = mech == "fixed_lowrank_baseline"
    seq = fixed or cfg.seq_compress
    dim = fixed or cfg.dim_compress
    m = d_p if seq else n
    width = cfg.d_in if dim else dh
    if seq:
        if not fixed:
            lv.alloc("lr", h * d_p * n)
            lv.alloc("wr", h * d_p * n, free=("lr",))
            lv.alloc("lc", h * d_p * n)
            lv.alloc("wc", h * d_p * n, free=("lc",))
            lv.alloc("wr_rec", n * d_p)
            lv.alloc("wc_rec", n * d_p)
        lv.alloc("ql", h * d_p * dh, free=("wr", "q"))
        lv.alloc("kl", h * d_p * dh, free=("wc", "k"))
        lv.alloc("vd", h * d_p * dh, free=("wc_rec", "v"))
    else:
        lv.live["ql"] = lv.live.pop("q")
        lv.live["kl"] = lv.live.pop("k")
        lv.live["vd"] = lv.live.pop("v")
    if dim:
        lv.alloc("qd", h * m * width, free=("ql",))
        lv.alloc("kd", h * m * width, free=("kl",))
    else:
        lv.live["qd"] = lv.live.pop("ql")
        lv.live["kd"] = lv.live.pop("kl")
    lv.alloc("scores", h * m * m, free=("qd", "kd"))
    lv.alloc("p", h * m * m, free=("scores",))
    lv.alloc("oc", h * m * dh, free=("p", "vd"))
    if seq:
        lv.alloc("o", n * d, free=("oc", "wr_rec"))
    else:
        lv.live["o"] = lv.live.pop("oc")
    lv.alloc("y", n * d, free=("o",))
    return lv


def peak_bytes(cfg: AttentionConfig) -> int:
    """Largest total of simultaneously live intermediates, in bytes."""
    return BYTES * peak_trace(cfg).peak


def largest_intermediate_bytes(cfg: AttentionConfig) -> int:
    return BYTES * peak_trace(cfg).largest


def measure_peak_bytes(cfg: AttentionConfig, seed: int = 0) -> int:
    """Allocator-side peak during one taped forward pass (tracemalloc).

    The tape keeps every intermediate alive, so this over-counts relative to
    :func:`peak_bytes`; it is a cross-check, not the primary metric.
    """
    rng = make_rng(seed)
    params = att.init_params(cfg, rng)
    x = rng.standard_normal((cfg.n, cfg.d))
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        att.forward(x, params, cfg)
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return peak - base


@dataclass
class BenchRecord:
    mechanism: str
    n: int
    d: int
    d_p: int
    d_in: int
    heads: int
    flops: int
    peak_bytes: int
    wall_ms_mean: float
    wall_ms_std: float
    reps: int
    status: str = "ok"

    def row(self) -> list:
        out = [getattr(self, k) for k in CSV_HEADER]
        if self.status != "ok":
            out[8] = out[9] = self.status
        return out


@dataclass
class ScalingFit:
    mechanism: str
    slope: float
    r2: float
    n_values: list[int] = field(default_factory=list)
    intercept: float = 0.0


def _time_forward(fn, reps: int, warmup: int, min_rep_s: float):
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    fn()
    single = max(time.perf_counter() - t0, 1e-7)
    inner = max(1, math.ceil(min_rep_s / single))
    means = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        means.append((time.perf_counter() - t0) / inner * 1e3)
    return means


def run_sweep(mechanisms, n_values, template: AttentionConfig, reps: int = 10,
              seed: int = 0, warmup: int = 2, min_rep_s: float = 0.002) -> list[BenchRecord]:
    """Time the forward pass of each mechanism at each length.

    Every rep is the mean over enough inner calls to last ``min_rep_s``; the
    record keeps the median of those rep means and their standard deviation.
    A ``MemoryError`` marks the record ``"oom"`` and the sweep continues.
    """
    if reps < 5:
        raise ParameterError(f"reps must be >= 5, got {reps}")
    if warmup < 2:
        raise ParameterError(f"warmup must be >= 2, got {warmup}")
    records = []
    with threadpool_limits(limits=1):
        for n in n_values:
            x = make_rng(seed, n).standard_normal((n, template.d))
            for mech in mechanisms:
                cfg = template.replace(n=n, mechanism=mech)
                params = att.init_params(cfg, make_rng(seed))
                base = dict(mechanism=mech, n=n, d=cfg.d, d_p=cfg.d_p, d_in=cfg.d_in,
                            heads=cfg.heads, flops=count_flops(cfg), peak_bytes=peak_bytes(cfg),
                            reps=reps)
                try:
                    means = _time_forward(lambda: att.forward(x, params, cfg), reps, warmup,
                                          min_rep_s)
                except MemoryError:
                    records.append(BenchRecord(**base, wall_ms_mean=math.nan,
                                               wall_ms_std=math.nan, status="oom"))
                    continue
                records.append(BenchRecord(**base, wall_ms_mean=statistics.median(means),
                                           wall_ms_std=statistics.pstdev(means)))
    return records


def ablation_sweep(param: str, values, n_values, template: AttentionConfig, reps: int = 10,
                   seed: int = 0) -> list[BenchRecord]:
    """DBA sweep over ``d_p`` or ``d_in`` at fixed everything else."""
    if param not in ("d_p", "d_in"):
        raise ParameterError(f"ablation over {param!r} not supported")
    records = []
    for v in values:
        records += run_sweep(["dba"], n_values, template.replace(**{param: v}), reps, seed)
    return records


def _loglog_fit(xs, ys):
    lx = np.log(np.asarray(xs, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def fit_scaling(records, metric: str = "wall", min_n: int = 0) -> dict[str, ScalingFit]:
    """Least-squares slope of ``ln(metric)`` against ``ln(n)`` per mechanism."""
    key = {"wall": "wall_ms_mean", "flops": "flops", "peak": "peak_bytes"}[metric]
    groups: dict[str, list[BenchRecord]] = {}
    for r in records:
        if r.status == "ok" and r.n >= min_n:
            groups.setdefault(r.mechanism, []).append(r)
    fits = {}
    for mech, rs in groups.items():
        rs = sorted(rs, key=lambda r: r.n)
        ns = [r.n for r in rs]
        if len(set(ns)) < 4 or ns[-1] < 8 * ns[0]:
            raise ParameterError(
                f"need >= 4 lengths spanning >= 8x for slope fit ({mech}: {sorted(set(ns))})")
        slope, intercept, r2 = _loglog_fit(ns, [getattr(r, key) for r in rs])
        fits[mech] = ScalingFit(mech, slope, r2, ns, intercept)
    return fits


def speedups(records, baseline: str = "vanilla", target: str = "dba") -> dict[int, float]:
    by = {(r.mechanism, r.n): r for r in records if r.status == "ok"}
    return {n: by[(baseline, n)].wall_ms_mean / by[(target, n)].wall_ms_mean
            for (m, n) in sorted(by) if m == target and (baseline, n) in by}


def timer_monotone(records) -> dict[str, bool]:
    """Per mechanism: wall time strictly increases between consecutive lengths."""
    out = {}
    groups: dict[str, list[BenchRecord]] = {}
    for r in records:
        if r.status == "ok":
            groups.setdefault(r.mechanism, []).append(r)
    for mech, rs in groups.items():
        rs.sort(key=lambda r: r.n)
        out[mech] = all(b.wall_ms_mean > a.wall_ms_mean for a, b in zip(rs, rs[1:]))
    return out


def write_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())


def read_csv(path) -> list[BenchRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            status = "ok"
            wall = row["wall_ms_mean"]
            if wall in ("oom",):
                status = wall
            out.append(BenchRecord(
                row["mechanism"], *(int(row[k]) for k in ("n", "d", "d_p", "d_in", "heads",
                                                          "flops", "peak_bytes")),
                math.nan if status != "ok" else float(wall),
                math.nan if status != "ok" else float(row["wall_ms_std"]),
                int(row["reps"]), status))
    return out


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_svg(records, fits: dict[str, ScalingFit], width: int = 640, height: int = 420) -> str:
    """Log-log scatter of wall time vs n with one fitted line per mechanism."""
    pts = [r for r in records if r.status == "ok"]
    if not pts:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>'
    lx = [math.log10(r.n) for r in pts]
    ly = [math.log10(r.wall_ms_mean) for r in pts]
    x0, x1 = min(lx), max(lx)
    y0, y1 = min(ly), max(ly)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    pad = 60

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2}" y="{height - 15}" text-anchor="middle">log10 n</text>',
           f'<text x="15" y="{height / 2}" transform="rotate(-90 15 {height / 2})" '
           f'text-anchor="middle">log10 wall ms</text>']
    mechs = sorted({r.mechanism for r in pts})
    for i, mech in enumerate(mechs):
        color = _COLORS[i % len(_COLORS)]
        for r in pts:
            if r.mechanism == mech:
                out.append(f'<circle cx="{sx(math.log10(r.n)):.1f}" '
                           f'cy="{sy(math.log10(r.wall_ms_mean)):.1f}" r="4" fill="{color}"/>')
        fit = fits.get(mech)
        label = mech
        if fit is not None:
            a, b = fit.n_values[0], fit.n_values[-1]
            ya = (fit.slope * math.log(a) + fit.intercept) / math.log(10)
            yb = (fit.slope * math.log(b) + fit.intercept) / math.log(10)
            out.append(f'<line x1="{sx(math.log10(a)):.1f}" y1="{sy(ya):.1f}" '
                       f'x2="{sx(math.log10(b)):.1f}" y2="{sy(yb):.1f}" stroke="{color}"/>')
            label = f"{mech} slope {fit.slope:.2f}"
        out.append(f'<text x="{pad + 10}" y="{pad + 16 * i}" fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out)


def record_dicts(records) -> list[dict]:
    return [asdict(r) for r in records]
