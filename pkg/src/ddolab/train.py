"""Optimizer, EMA and the per-model-kind training tasks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grad as G
from .data import GMM2D, Dataset, MarkovChain
from .ddo import DdoHyperParams, ddo_loss_exact, ddo_loss_mc, diffusion_ddo_loss, label_dropout
from .metrics import GridSpec, cell_masses, hist_kl_2d, kl
from .models import ARModel, CategoricalDistribution, CategoricalModel, DiffusionModel, Model
from .models.diffusion import edm_mle_loss


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or parameter."""


# -- optimizer -----------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def warmup_lr(base: float, step: int, total: int, warmup: float) -> float:
    """Linear ramp from 0 to ``base`` over the first ``warmup`` fraction of steps."""
    n = int(round(warmup * total))
    return base if n <= 0 or step >= n else base * (step + 1) / n


# -- EMA ----------------------------------------------------------------------------------

@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    half_life: float

    @classmethod
    def of(cls, model: Model, half_life: float) -> "EmaState":
        return cls({k: v.copy() for k, v in model.params.items()}, half_life)


def ema_update(ema: EmaState, params: dict[str, np.ndarray], examples_seen_delta: float) -> EmaState:
    """``shadow <- decay * shadow + (1 - decay) * params``, ``decay = 2^(-delta / half_life)``."""
    if not ema.half_life > 0:
        raise ValueError("half_life must be positive")
    decay = 0.5 ** (examples_seen_delta / ema.half_life)
    shadow = {k: decay * ema.shadow[k] + (1.0 - decay) * params[k] for k in ema.shadow}
    return EmaState(shadow, ema.half_life)


def gradient_step(model: Model, loss_fn, opt: Adam, lr: float) -> float:
    """One tape-recorded loss evaluation and Adam update; returns the loss."""
    with G.Tape() as tape:
        P = model.tensors(tape)
        loss = loss_fn(P)
        names = list(P)
        grads = tape.gradient(loss, [P[k] for k in names])
    value = float(loss.data)
    if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError("non-finite loss or gradient")
    opt.step(model.params, dict(zip(names, grads)), lr)
    return value


# -- tasks ----------------------------------------------------------------------------------

@dataclass
class Task:
    """A target distribution plus everything needed to train and score a model on it."""

    kind: str = ""

    def metric(self, model: Model) -> float:
        raise NotImplementedError

    def mle_loss(self, model, P, rng, batch: int):
        raise NotImplementedError

    def ddo_loss(self, model, reference, P, rng, batch: int, hp: DdoHyperParams, cache):
        raise NotImplementedError

    def reference_batch(self, reference, rng, n, labels, cache):
        """Fake samples: from the offline cache when given, else drawn online."""
        if cache is not None:
            idx = rng.integers(0, len(cache.items), size=n)
            return cache.items[idx], (None if cache.labels is None else cache.labels[idx])
        return reference.sample(rng, n, labels) if labels is not None else reference.sample(rng, n), labels


@dataclass
class CategoricalTask(Task):
    """Explicit categorical target. ``exact`` uses full expectations instead of batches."""

    p_data: CategoricalDistribution = None
    exact: bool = True
    kind: str = "categorical"

    def metric(self, model: CategoricalModel) -> float:
        return kl(self.p_data, model.distribution())

    def mle_loss(self, model, P, rng, batch):
        if self.exact:
            return G.neg(G.sum(G.mul(self.p_data.probs, model.log_probs(P))))
        return G.neg(G.mean(model.log_prob(self.p_data.sample(rng, batch), P)))

    def ddo_loss(self, model, reference, P, rng, batch, hp, cache):
        if self.exact:
            return ddo_loss_exact(model, reference.distribution(), self.p_data, hp.alpha, hp.beta, P)
        x = self.p_data.sample(rng, batch)
        fake, _ = self.reference_batch(reference, rng, batch, None, cache)
        return ddo_loss_mc(model, reference, x, fake, hp, P=P)


@dataclass
class ARTask(Task):
    chain: MarkovChain = None
    dataset: Dataset = None
    kind: str = "ar"

    def metric(self, model: ARModel) -> float:
        return kl(self.chain.exact_pmf(), model.exact_pmf())

    def mle_loss(self, model, P, rng, batch):
        x, lab = self.dataset.batch(rng, batch)
        return G.neg(G.mean(model.log_prob(x, lab, P)))

    def ddo_loss(self, model, reference, P, rng, batch, hp, cache):
        x, lab = self.dataset.batch(rng, batch)
        lab, ref_alpha = label_dropout(rng, lab, hp)
        fake, fake_lab = self.reference_batch(reference, rng, batch, lab, cache)
        return ddo_loss_mc(model, reference, x, fake, hp, lab, fake_lab, P, ref_alpha=ref_alpha)


@dataclass
class DiffusionTask(Task):
    gmm: GMM2D = None
    dataset: Dataset = None
    grid: GridSpec = None
    eval_samples: int = 20_000
    eval_seed: int = 12345
    sampler_steps: int = 18
    kind: str = "diffusion"
    _ref_cells: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.grid is None:
            self.grid = GridSpec.around(self.gmm.mean(), self.gmm.std())

    @property
    def ref_cells(self) -> np.ndarray:
        if self._ref_cells is None:
            self._ref_cells = cell_masses(self.gmm.log_density, self.grid)
        return self._ref_cells

    def metric(self, model: DiffusionModel, n: int | None = None, seed: int | None = None) -> float:
        rng = np.random.default_rng(self.eval_seed if seed is None else seed)
        n = n or self.eval_samples
        labels = rng.choice(self.gmm.n_components, size=n, p=self.gmm.weights) if model.class_count else None
        x = model.sample(rng, n, labels, steps=self.sampler_steps)
        return hist_kl_2d(x, self.ref_cells, self.grid, min_samples=min(10_000, n))

    def mle_loss(self, model, P, rng, batch):
        x, lab = self.dataset.batch(rng, batch)
        return edm_mle_loss(model, x, lab if model.class_count else None, rng, P)

    def ddo_loss(self, model, reference, P, rng, batch, hp, cache):
        x, lab = self.dataset.batch(rng, batch)
        lab = lab if model.class_count else None
        fake, fake_lab = self.reference_batch(reference, rng, batch, lab, cache)
        return diffusion_ddo_loss(model, reference, x, fake, lab, fake_lab, hp, rng, P)


# -- pretraining ------------------------------------------------------------------------------

def pretrain(model: Model, task: Task, steps: int, lr: float, batch: int, seed: int,
             warmup: float = 0.0, log_every: int = 1):
    """Maximum-likelihood training; returns the per-step loss log."""
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr)
    log = []
    for step in range(steps):
        loss = gradient_step(model, lambda P: task.mle_loss(model, P, rng, batch), opt,
                             warmup_lr(lr, step, steps, warmup))
        if (step + 1) % log_every == 0 or step == steps - 1:
            log.append((step + 1, loss))
    return log
