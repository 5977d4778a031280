"""Divergences, divergence-bound checks, guidance composition, histogram KL."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .models.categorical import CategoricalDistribution


def _p(d) -> np.ndarray:
    return d.probs if isinstance(d, CategoricalDistribution) else np.asarray(d, dtype=np.float64)


class SupportError(ValueError):
    pass


# -- divergences ---------------------------------------------------------------------

def kl(p, q) -> float:
    """``KL(p || q)``; requires ``q > 0`` wherever ``p > 0``."""
    p, q = _p(p), _p(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise SupportError("KL(p||q) undefined: q has zero mass where p does not")
    return float(max(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))), 0.0))


def reverse_kl(p, q) -> float:
    return kl(q, p)


def js(p, q) -> float:
    p, q = _p(p), _p(q)
    m = 0.5 * (p + q)
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def tv(p, q) -> float:
    return float(0.5 * np.abs(_p(p) - _p(q)).sum())


def mixture_kl(p_data, p_ref, p_theta) -> float:
    """Generalized KL between the unnormalized sums ``p_data + p_ref`` and ``p_theta + p_ref``.

    Both measures have total mass 2, so this equals twice the KL between the
    normalized halves. It is the term that closes the loss-gap identity
    ``L - L* = KL(p_data || p_theta) - mixture_kl``.
    """
    a = _p(p_data) + _p(p_ref)
    b = _p(p_theta) + _p(p_ref)
    return 2.0 * kl(0.5 * a, 0.5 * b)


def entropy(p) -> float:
    p = _p(p)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


# -- divergence bounds -----------------------------------------------------------------

def _h(M: float) -> float:
    return 2.0 + np.exp(-M) + np.exp(M)


def bound_constants(M: float, M1: float, M2: float) -> tuple[float, float]:
    """``(C1, C2)`` exactly as published: C1 from (M, M1), C2 from (M, M2)."""
    C1 = np.sqrt(2.0 * max(_h(M) / (1.0 + np.exp(M1)), 1.0 + np.exp(-M1)))
    C2 = np.sqrt(2.0 * np.exp(M) * max(_h(M) / (1.0 + np.exp(M2)), 1.0 + np.exp(-M2)))
    return float(C1), float(C2)


def reverse_bound_constant_rederived(M: float, M2: float) -> float:
    """Reverse-KL constant re-derived with the sign of M2 flipped.

    Bounding ``p_ref / p_data`` from above by ``e^M2`` gives
    ``sqrt(2 e^M max{h(M) / (1 + e^-M2), 1 + e^M2})``; reported alongside the
    published constant.
    """
    return float(np.sqrt(2.0 * np.exp(M) * max(_h(M) / (1.0 + np.exp(-M2)), 1.0 + np.exp(M2))))


@dataclass
class BoundReport:
    forward_kl: float
    reverse_kl: float
    loss_gap: float
    mixture_kl: float
    identity_error: float
    M: float
    M1: float
    M2: float
    C1: float
    C2: float
    C2_rederived: float
    forward_bound: float
    reverse_bound: float
    reverse_bound_rederived: float
    lower_bound_ok: bool
    forward_ok: bool
    reverse_ok: bool
    reverse_rederived_ok: bool

    @property
    def passed(self) -> bool:
        return self.lower_bound_ok and self.forward_ok and self.reverse_ok

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def check_divergence_bounds(p_data, p_ref, p_theta, tol: float = 1e-12) -> BoundReport:
    """Evaluate both square-root divergence bounds on one categorical instance.

    M, M1 and M2 are the exact extremal log-ratios of the instance. ``tol``
    absorbs floating-point noise when the loss gap is ~0.
    """
    from .ddo import loss_value, optimal_loss

    pd, pr, pt = _p(p_data), _p(p_ref), _p(p_theta)
    for a in (pd, pr, pt):
        if np.any(a <= 0):
            raise SupportError("full support required for the divergence bounds")
    lr = np.log(pr) - np.log(pd)
    M = float(np.max(np.abs(np.log(pt) - np.log(pr))))
    M1, M2 = float(lr.min()), float(lr.max())
    C1, C2 = bound_constants(M, M1, M2)
    C2r = reverse_bound_constant_rederived(M, M2)
    gap = loss_value(pt, pr, pd) - optimal_loss(pr, pd)
    fwd, rev = kl(pd, pt), kl(pt, pd)
    mix = mixture_kl(pd, pr, pt)
    root = np.sqrt(max(gap, 0.0))
    return BoundReport(
        forward_kl=fwd, reverse_kl=rev, loss_gap=gap, mixture_kl=mix,
        identity_error=abs(gap - (fwd - mix)), M=M, M1=M1, M2=M2, C1=C1, C2=C2, C2_rederived=C2r,
        forward_bound=C1 * root, reverse_bound=C2 * root, reverse_bound_rederived=C2r * root,
        lower_bound_ok=gap <= fwd + tol, forward_ok=fwd <= C1 * root + tol,
        reverse_ok=rev <= C2 * root + tol, reverse_rederived_ok=rev <= C2r * root + tol,
    )


verify_theorem2 = check_divergence_bounds


# -- guidance ----------------------------------------------------------------------------

def guide_compose(base, degraded, w: float) -> CategoricalDistribution:
    """Normalized ``base * (base / degraded) ** w``."""
    pb, pq = _p(base), _p(degraded)
    if np.any(pb <= 0) or np.any(pq <= 0):
        raise SupportError("guidance composition needs full support")
    with np.errstate(over="ignore", invalid="ignore"):
        lw = (1.0 + w) * np.log(pb) - w * np.log(pq)
    if not np.all(np.isfinite(lw)):
        raise OverflowError(f"guidance weights overflow at w={w}")
    z = np.exp(lw - lw.max())
    return CategoricalDistribution(z / z.sum())


def cfg_score(cond, uncond, w: float):
    """Extrapolate a conditional output away from the unconditional one.

    Works on scores/denoiser outputs and on logits alike; for logits the
    caller renormalizes with a softmax.
    """
    cond, uncond = np.asarray(cond, dtype=np.float64), np.asarray(uncond, dtype=np.float64)
    if cond.shape != uncond.shape:
        raise ValueError(f"shape mismatch {cond.shape} vs {uncond.shape}")
    return cond + w * (cond - uncond)


# -- histogram KL ----------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    lo: tuple[float, float]
    hi: tuple[float, float]
    bins: int = 64

    @classmethod
    def around(cls, mean, std, width: float = 4.0, bins: int = 64) -> "GridSpec":
        mean, std = np.asarray(mean, float), np.asarray(std, float)
        return cls(tuple(map(float, mean - width * std)), tuple(map(float, mean + width * std)), bins)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.linspace(self.lo[0], self.hi[0], self.bins + 1),
                np.linspace(self.lo[1], self.hi[1], self.bins + 1))

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        ex, ey = self.edges()
        return 0.5 * (ex[1:] + ex[:-1]), 0.5 * (ey[1:] + ey[:-1])

    @property
    def cell_area(self) -> float:
        return (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1]) / self.bins ** 2


def cell_masses(log_density_fn, grid: GridSpec, order: int = 4) -> np.ndarray:
    """Integrate a 2-D density over each grid cell by Gauss-Legendre quadrature.

    Returns a (bins, bins) array indexed ``[ix, iy]``.
    """
    nodes, weights = np.polynomial.legendre.leggauss(order)
    ex, ey = grid.edges()
    hx, hy = np.diff(ex)[0] / 2, np.diff(ey)[0] / 2
    cx, cy = grid.centers()
    px = (cx[:, None] + hx * nodes[None, :]).reshape(-1)
    py = (cy[:, None] + hy * nodes[None, :]).reshape(-1)
    X, Y = np.meshgrid(px, py, indexing="ij")
    dens = np.exp(log_density_fn(np.stack([X.ravel(), Y.ravel()], axis=1))).reshape(X.shape)
    b = grid.bins
    dens = dens.reshape(b, order, b, order)
    return np.einsum("iajb,a,b->ij", dens, weights, weights) * hx * hy


def histogram(samples, grid: GridSpec, warn: bool = True) -> np.ndarray:
    """Counts on the grid; out-of-box samples land in the boundary cells."""
    s = np.asarray(samples, dtype=np.float64)
    lo, hi = np.array(grid.lo), np.array(grid.hi)
    outside = np.any((s < lo) | (s > hi), axis=1).mean() if len(s) else 0.0
    if warn and outside > 0.01:
        warnings.warn(f"{outside:.1%} of samples fall outside the histogram box", RuntimeWarning)
    idx = np.floor((s - lo) / (hi - lo) * grid.bins).astype(np.int64)
    idx = np.clip(idx, 0, grid.bins - 1)
    counts = np.zeros((grid.bins, grid.bins))
    np.add.at(counts, (idx[:, 0], idx[:, 1]), 1.0)
    return counts


def hist_kl_2d(samples, reference, grid: GridSpec, pseudo_count: float = 0.5,
               min_samples: int = 10_000) -> float:
    """``KL(reference cells || smoothed sample histogram)`` on a 2-D grid.

    ``reference`` is either a log-density callable or a precomputed
    (bins, bins) array of cell masses. The reference masses are renormalized
    over the box; every histogram cell receives ``pseudo_count`` before
    normalization so the divergence stays finite.
    """
    if len(samples) < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {len(samples)}")
    ref = reference if isinstance(reference, np.ndarray) else cell_masses(reference, grid)
    ref = ref / ref.sum()
    q = histogram(samples, grid) + pseudo_count
    q = q / q.sum()
    m = ref > 0
    return float(np.sum(ref[m] * (np.log(ref[m]) - np.log(q[m]))))
