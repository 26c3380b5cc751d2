"""Toy study: reach a teacher's output distribution by matching hidden states (L2)
or by minimising the KL directly, as the hidden dimension grows.

Each run draws an output matrix O (V x d), a teacher state h_t and a student start h_0
from the standard normal. Both arms start from the same h_0 and run plain SGD; the
final KL(softmax(O h_t) || softmax(O h_s)) is recorded for each arm.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

from .config import ToyRunConfig
from .errors import ConfigError
from .numcore import Rng

__all__ = ["ToyRunConfig", "ToyResult", "run_toy", "sweep", "sweep_csv", "gap_trend", "ARMS"]

ARMS = ("l2", "kl")


@dataclass
class ToyResult:
    dim: int
    final_l2: np.ndarray
    final_kl: np.ndarray
    init_kl: np.ndarray
    flagged: np.ndarray
    lr_l2: float
    lr_kl: float

    @property
    def runs(self) -> int:
        return int(self.final_l2.size)

    def mean(self, arm: str) -> float:
        return float(np.mean(self.final(arm)))

    def std(self, arm: str) -> float:
        return float(np.std(self.final(arm)))

    def final(self, arm: str) -> np.ndarray:
        return self.final_l2 if arm == "l2" else self.final_kl

    @property
    def mean_gap(self) -> float:
        """Mean per-run difference, KL arm minus L2 arm."""
        return float(np.mean(self.final_kl - self.final_l2))


def _kl(log_pt: np.ndarray, logits_s: np.ndarray) -> float:
    ls = log_softmax(logits_s.astype(np.float64))
    return float(np.exp(log_pt) @ (log_pt - ls))


def _draw(cfg: ToyRunConfig, run: int):
    r = Rng(cfg.seed).spawn(("toy", cfg.dim, run))
    o = r.spawn("O").normal((cfg.vocab, cfg.dim), dtype=np.float32)
    h_t = r.spawn("teacher").normal((cfg.dim,), dtype=np.float32)
    h_0 = r.spawn("student").normal((cfg.dim,), dtype=np.float32)
    return o, h_t, h_0


def _l2_arm(h_t, h_0, steps: int, lr: float, form: str) -> np.ndarray:
    h = h_0.astype(np.float64)
    target = h_t.astype(np.float64)
    for _ in range(steps):
        diff = h - target
        if form == "squared":
            g = 2.0 * diff
        else:
            n = np.linalg.norm(diff)
            g = diff / n if n > 0 else np.zeros_like(diff)
        h = h - lr * g
    with np.errstate(over="ignore"):
        return h.astype(np.float32)


def _kl_arm(o, p_t, h_0, steps: int, lr: float) -> tuple[np.ndarray, bool]:
    """Exact gradient O^T (softmax(O h) - p_t) over the full vocabulary."""
    h = h_0.astype(np.float64)
    flagged = False
    for _ in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            z = o @ h.astype(np.float32)
        if not np.all(np.isfinite(z)):
            flagged = True
            break
        p_s = np.exp(log_softmax(z.astype(np.float64)))
        g = (p_s - p_t).astype(np.float32) @ o
        step = h - lr * g.astype(np.float64)
        if not np.all(np.isfinite(step)):
            flagged = True
            break
        h = step
    with np.errstate(over="ignore"):
        return h.astype(np.float32), flagged


def _one_run(cfg: ToyRunConfig, run: int, lr_l2: float, lr_kl: float):
    o, h_t, h_0 = _draw(cfg, run)
    log_pt = log_softmax((o @ h_t).astype(np.float64))
    init = _kl(log_pt, o @ h_0)
    h_a = _l2_arm(h_t, h_0, cfg.steps, lr_l2, cfg.l2_form)
    h_b, flagged = _kl_arm(o, np.exp(log_pt), h_0, cfg.steps, lr_kl)
    with np.errstate(over="ignore", invalid="ignore"):
        fa, fb = _kl(log_pt, o @ h_a), _kl(log_pt, o @ h_b)
    # A run that leaves the finite range is clamped to its initial KL and flagged.
    if not np.isfinite(fa):
        fa, flagged = init, True
    if not np.isfinite(fb):
        fb, flagged = init, True
    return max(fa, 0.0), max(fb, 0.0), init, flagged


def run_toy(cfg: ToyRunConfig, workers: int = 1, lr_l2: float | None = None,
            lr_kl: float | None = None) -> ToyResult:
    cfg.validate()
    lr_a = cfg.lr if lr_l2 is None else lr_l2
    lr_b = cfg.lr if lr_kl is None else lr_kl
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            out = list(pool.map(_one_run, [cfg] * cfg.runs, range(cfg.runs), [lr_a] * cfg.runs,
                                [lr_b] * cfg.runs))
    else:
        out = [_one_run(cfg, r, lr_a, lr_b) for r in range(cfg.runs)]
    cols = list(zip(*out)) if out else [(), (), (), ()]
    return ToyResult(cfg.dim, np.array(cols[0], dtype=np.float64), np.array(cols[1], dtype=np.float64),
                     np.array(cols[2], dtype=np.float64), np.array(cols[3], dtype=bool), lr_a, lr_b)


def _best_lr(results: dict[float, ToyResult], arm: str) -> float:
    return min(results, key=lambda lr: (results[lr].mean(arm), lr))


def sweep(dims: Sequence[int], cfg: ToyRunConfig, workers: int = 1) -> list[ToyResult]:
    """run_toy per dimension. With ``cfg.lr_sweep`` set, each arm is reported at the learning
    rate (from that list) giving its lowest mean final KL at that dimension."""
    dims = list(dims)
    if not dims:
        raise ConfigError("sweep needs at least one dimension")
    if any(b <= a for a, b in zip(dims, dims[1:])):
        raise ConfigError(f"sweep dimensions must be strictly ascending, got {dims}")
    out = []
    for d in dims:
        dcfg = replace(cfg, dim=d)
        if not cfg.lr_sweep:
            out.append(run_toy(dcfg, workers))
            continue
        by_lr = {lr: run_toy(dcfg, workers, lr, lr) for lr in cfg.lr_sweep}
        a, b = _best_lr(by_lr, "l2"), _best_lr(by_lr, "kl")
        ra, rb = by_lr[a], by_lr[b]
        out.append(ToyResult(d, ra.final_l2, rb.final_kl, ra.init_kl, rb.flagged, a, b))
    return out


def sweep_csv(results: Sequence[ToyResult], with_lr: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dim", "arm", "run", "final_kl"] + (["lr"] if with_lr else []))
    for res in results:
        for arm in ARMS:
            lr = res.lr_l2 if arm == "l2" else res.lr_kl
            for run, v in enumerate(res.final(arm)):
                w.writerow([res.dim, arm, run, repr(float(v))] + ([repr(lr)] if with_lr else []))
    return buf.getvalue()


def summary_table(results: Sequence[ToyResult]) -> str:
    lines = [f"{'dim':>6} {'mean_l2':>12} {'std_l2':>12} {'mean_kl':>12} {'std_kl':>12} {'gap':>12} flagged"]
    for r in results:
        lines.append(f"{r.dim:>6} {r.mean('l2'):>12.6g} {r.std('l2'):>12.6g} {r.mean('kl'):>12.6g} "
                     f"{r.std('kl'):>12.6g} {r.mean_gap:>12.6g} {int(r.flagged.sum())}")
    return "\n".join(lines)


def gap_trend(results: Sequence[ToyResult]) -> float:
    """Spearman rank correlation between dimension and mean per-run gap."""
    from scipy.stats import spearmanr

    if len(results) < 2:
        raise ConfigError("trend needs at least two dimensions")
    rho = spearmanr([r.dim for r in results], [r.mean_gap for r in results]).statistic
    return float(rho)
