"""Discriminator-style finetuning objectives with an implicit discriminator.

The discriminator is never a separate network: for a learnable target model
and a frozen reference model it is ``sigmoid(beta * (log p_target(x) -
log p_ref(x)))``. Real samples should be classified as 1 and reference
samples as 0, which pulls the target toward the data distribution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .models.categorical import CategoricalDistribution, CategoricalModel
from .models.diffusion import DiffusionModel, f_residual, draw_noise


@dataclass(frozen=True)
class DdoHyperParams:
    alpha: float = 1.0
    beta: float = 1.0
    uncond_alpha: float = 0.0
    label_dropout: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be finite and > 0, got {self.beta}")
        if not self.uncond_alpha >= 0:
            raise ValueError("uncond_alpha must be >= 0")
        if not 0.0 <= self.label_dropout <= 1.0:
            raise ValueError("label_dropout must lie in [0, 1]")


# -- helpers -------------------------------------------------------------------

def _probs(d) -> np.ndarray:
    return d.probs if isinstance(d, CategoricalDistribution) else np.asarray(d, dtype=np.float64)


def _full_support(*arrays):
    for a in arrays:
        if np.any(a <= 0):
            raise ValueError("distribution has zero-probability states; full support required")


def _ref_log_prob(reference, x, labels=None) -> np.ndarray:
    """Reference log-likelihood, always without gradient tracking."""
    if isinstance(reference, CategoricalDistribution):
        with np.errstate(divide="ignore"):
            out = np.log(reference.probs[np.asarray(x)])
    elif isinstance(reference, CategoricalModel):
        out = reference.log_prob(x).data
    else:
        out = reference.log_prob(x, labels).data
    if not np.all(np.isfinite(out)):
        raise G.NonFiniteError("reference log-likelihood")
    return out


def _target_log_prob(target, x, labels, P) -> G.Tensor:
    if isinstance(target, CategoricalModel):
        return target.log_prob(x, P)
    return target.log_prob(x, labels, P)


def log_ratio(target, reference, x, labels=None, P=None) -> G.Tensor:
    """``log p_target(x) - log p_ref(x)``, differentiable w.r.t. the target only."""
    return G.sub(_target_log_prob(target, x, labels, P), _ref_log_prob(reference, x, labels))


def implicit_discriminator(target, reference, x, labels=None, beta: float = 1.0) -> np.ndarray:
    """``sigmoid(beta * log(p_target(x) / p_ref(x)))``, elementwise in (0, 1)."""
    return G.sigmoid(G.mul(beta, log_ratio(target, reference, x, labels))).data


def pointwise_loss(r, p_data_x, p_ref_x, alpha: float = 1.0, beta: float = 1.0):
    """Contribution of one state as a function of its log-ratio ``r`` (numpy)."""
    r = np.asarray(r, dtype=np.float64)
    return p_data_x * np.logaddexp(0.0, -beta * r) + alpha * p_ref_x * np.logaddexp(0.0, beta * r)


def label_dropout(rng: np.random.Generator, labels, hp: DdoHyperParams):
    """Replace labels by the null label (-1) with probability ``hp.label_dropout``.

    Returns the new labels and the per-row weight of the reference term:
    ``hp.uncond_alpha`` for dropped rows, ``hp.alpha`` otherwise.
    """
    if labels is None:
        return None, None
    labels = np.array(labels, dtype=np.int64)
    alpha = np.full(labels.shape, hp.alpha)
    if hp.label_dropout > 0:
        drop = rng.random(labels.shape) < hp.label_dropout
        labels[drop] = -1
        alpha[drop] = hp.uncond_alpha
    return labels, alpha


# -- exact categorical objective ------------------------------------------------

def ddo_loss_exact(target: CategoricalModel, reference, data, alpha: float = 1.0,
                   beta: float = 1.0, P=None) -> G.Tensor:
    """Exact loss as a weighted sum over every state.

    ``-sum p_data log sig(beta r) - alpha sum p_ref log(1 - sig(beta r))``.
    Logits may be a batch of shape (n, K) with matching (n, K) reference and
    data tables; the result is the sum of the per-instance losses.
    """
    p_ref, p_data = _probs(reference), _probs(data)
    _full_support(p_ref, p_data)
    logp = target.log_probs(P)
    if logp.shape != np.broadcast_shapes(logp.shape, p_ref.shape, p_data.shape):
        raise G.ShapeError("ddo_loss_exact", logp.shape, p_ref.shape)
    r = G.mul(beta, G.sub(logp, np.log(p_ref)))
    pos = G.mul(p_data, G.log_sigmoid(r))
    neg = G.mul(alpha * p_ref, G.log_sigmoid(G.neg(r)))
    return G.neg(G.sum(G.add(pos, neg)))


def optimal_loss(reference, data) -> float:
    """Minimum of the plain (alpha = beta = 1) loss, attained at p_target = p_data."""
    p_ref, p_data = _probs(reference), _probs(data)
    _full_support(p_ref, p_data)
    m = p_data + p_ref
    return float(-np.sum(p_data * np.log(p_data / m)) - np.sum(p_ref * np.log(p_ref / m)))


def loss_value(p_theta, reference, data, alpha: float = 1.0, beta: float = 1.0) -> float:
    """Numpy evaluation of the exact loss for an explicit probability vector."""
    p_ref, p_data = _probs(reference), _probs(data)
    r = np.log(_probs(p_theta)) - np.log(p_ref)
    return float(np.sum(pointwise_loss(r, p_data, p_ref, alpha, beta)))


def ddo_gradient_analytic(target: CategoricalModel, reference, data) -> np.ndarray:
    """Closed-form gradient of the plain loss w.r.t. the target logits.

    ``sum_x (1 - d(x)) (p(x) - p_data(x)) grad log p(x)``, with
    ``grad_logits log p(x) = e_x - p``.
    """
    p_ref, p_data = _probs(reference), _probs(data)
    _full_support(p_ref, p_data)
    logp = target.log_probs().data
    p = np.exp(logp)
    d = G._sigmoid_np(logp - np.log(p_ref))
    w = (1.0 - d) * (p - p_data)
    return w - p * w.sum(axis=-1, keepdims=True)


# -- Monte-Carlo objectives -------------------------------------------------------

def ddo_loss_mc(target, reference, data_batch, ref_batch, hp: DdoHyperParams,
                data_labels=None, ref_labels=None, P=None,
                data_weights=None, ref_weights=None, ref_alpha=None) -> G.Tensor:
    """Sample estimate of the alpha/beta-generalized loss.

    ``ref_alpha`` optionally overrides ``hp.alpha`` per reference row (used
    for label-dropped rows). ``*_weights`` turn the batch means into weighted
    sums, which with exhaustive batches reproduces the exact expectation.
    """
    if len(data_batch) == 0 or len(ref_batch) == 0:
        raise ValueError("empty batch")
    r_data = G.mul(hp.beta, log_ratio(target, reference, data_batch, data_labels, P))
    r_ref = G.mul(hp.beta, log_ratio(target, reference, ref_batch, ref_labels, P))
    n_d, n_r = r_data.shape[0], r_ref.shape[0]
    wd = np.full(n_d, 1.0 / n_d) if data_weights is None else np.asarray(data_weights, np.float64)
    wr = np.full(n_r, 1.0 / n_r) if ref_weights is None else np.asarray(ref_weights, np.float64)
    wr = wr * (hp.alpha if ref_alpha is None else np.asarray(ref_alpha, np.float64))
    pos = G.sum(G.mul(wd, G.log_sigmoid(r_data)))
    neg = G.sum(G.mul(wr, G.log_sigmoid(G.neg(r_ref))))
    return G.neg(G.add(pos, neg))


def elbo_delta(target: DiffusionModel, reference: DiffusionModel, x0, t, eps, labels=None,
               P=None) -> G.Tensor:
    """Per-row ELBO log-ratio surrogate in F-form.

    ``-(||F_target - F_hat||^2 - ||F_ref - F_hat||^2)`` at ``x_t = x0 + t eps``.
    The reference network is evaluated without tracking.
    """
    ref_res = f_residual(reference, x0, t, eps, labels).data
    return G.neg(G.sub(f_residual(target, x0, t, eps, labels, P), ref_res))


def diffusion_ddo_loss(target: DiffusionModel, reference: DiffusionModel, data_batch, fake_batch,
                       labels, fake_labels, hp: DdoHyperParams, rng: np.random.Generator,
                       P=None, noise=None) -> G.Tensor:
    """Pointwise-Jensen surrogate of the generalized loss for diffusion models.

    One ``(t, eps)`` draw per row is shared between the real row and the fake
    row at the same index. The toy network has no dropout or normalization,
    so the train/eval distinction for the fake branch needs no switch here.
    """
    data_batch = np.asarray(data_batch, dtype=np.float64)
    fake_batch = np.asarray(fake_batch, dtype=np.float64)
    B = data_batch.shape[0]
    if B == 0 or fake_batch.shape != data_batch.shape:
        raise ValueError("real and fake batches must be nonempty and of equal shape")
    t, eps = noise if noise is not None else draw_noise(target.schedule, rng, B, data_batch.shape[1])
    alpha = np.full(B, hp.alpha)
    if labels is not None and hp.label_dropout > 0:
        drop = rng.random(B) < hp.label_dropout
        labels = np.where(drop, -1, labels)
        fake_labels = np.where(drop, -1, fake_labels)
        alpha = np.where(drop, hp.uncond_alpha, alpha)
    d_real = elbo_delta(target, reference, data_batch, t, eps, labels, P)
    d_fake = elbo_delta(target, reference, fake_batch, t, eps, fake_labels, P)
    pos = G.mean(G.log_sigmoid(G.mul(hp.beta, d_real)))
    neg = G.mean(G.mul(alpha, G.log_sigmoid(G.mul(-hp.beta, d_fake))))
    return G.neg(G.add(pos, neg))


def diffusion_ddo_grid_losses(target: DiffusionModel, reference: DiffusionModel, data_batch,
                              fake_batch, t_grid, eps, hp: DdoHyperParams,
                              labels=None, fake_labels=None) -> tuple[float, float]:
    """Loss on a fixed ``(t, eps)`` grid in two forms.

    Returns ``(pointwise_bound, averaged)``: the first applies the sigmoid
    loss per grid point and then averages; the second averages the
    log-ratio surrogate over the grid before the sigmoid. ``eps`` has shape
    ``(len(t_grid), B, dim)``.
    """
    data_batch = np.asarray(data_batch, dtype=np.float64)
    fake_batch = np.asarray(fake_batch, dtype=np.float64)
    B = data_batch.shape[0]
    d_real, d_fake = [], []
    for g, t in enumerate(np.asarray(t_grid, dtype=np.float64)):
        tt = np.full(B, t)
        d_real.append(elbo_delta(target, reference, data_batch, tt, eps[g], labels).data)
        d_fake.append(elbo_delta(target, reference, fake_batch, tt, eps[g], fake_labels).data)
    d_real, d_fake = np.array(d_real), np.array(d_fake)
    b = hp.beta

    def loss(dr, df):
        return np.mean(np.logaddexp(0.0, -b * dr), axis=-1) + hp.alpha * np.mean(np.logaddexp(0.0, b * df), axis=-1)

    return float(np.mean(loss(d_real, d_fake))), float(loss(d_real.mean(0), d_fake.mean(0)))


# -- tilted optimum -----------------------------------------------------------------

def _tilted_log_weights(reference, data, beta: float) -> np.ndarray:
    if not beta > 0:
        raise ValueError("beta must be > 0")
    p_ref, p_data = _probs(reference), _probs(data)
    _full_support(p_ref, p_data)
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        try:
            lw = (1.0 - 1.0 / beta) * np.log(p_ref) + np.log(p_data) / beta
        except FloatingPointError as exc:
            raise OverflowError(f"tilted weights overflow at beta={beta}") from exc
    if not np.all(np.isfinite(lw)):
        raise OverflowError(f"tilted weights overflow at beta={beta}")
    return lw


def alpha_star(reference, data, beta: float) -> float:
    """Reference-term weight that makes the tilted distribution the exact optimum.

    ``(sum_x p_ref^(1 - 1/beta) p_data^(1/beta))^beta``.
    """
    lw = _tilted_log_weights(reference, data, beta)
    m = lw.max()
    log_alpha = beta * (m + np.log(np.sum(np.exp(lw - m))))
    with np.errstate(over="ignore"):
        a = float(np.exp(log_alpha))
    if not np.isfinite(a) or a == 0.0:
        raise OverflowError(f"alpha_star out of float range (log alpha = {log_alpha})")
    return a


def tilted_target(reference, data, beta: float) -> CategoricalDistribution:
    """Normalized ``p_ref^(1 - 1/beta) p_data^(1/beta)``."""
    lw = _tilted_log_weights(reference, data, beta)
    w = np.exp(lw - lw.max())
    return CategoricalDistribution(w / w.sum())


theorem3_target = tilted_target
