"""EDM-preconditioned toy diffusion model on low-dimensional vectors."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import grad as G
from .base import Model, glorot, register

_FREQS = (1.0, 2.0, 4.0)


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-exploding schedule (alpha_t = 1, sigma_t = t) plus EDM defaults.

    ``sigma_min``/``sigma_max`` are quoted for data with std 0.5 and are
    rescaled by ``sigma_data / 0.5`` when building the sampling grid.
    """

    P_mean: float = -1.2
    P_std: float = 1.2
    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0

    def _t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t <= 0):
            raise ValueError("diffusion time must be positive")
        return t

    def c_skip(self, t):
        t = self._t(t)
        return self.sigma_data ** 2 / (self.sigma_data ** 2 + t ** 2)

    def c_out(self, t):
        t = self._t(t)
        return self.sigma_data * t / np.sqrt(self.sigma_data ** 2 + t ** 2)

    def c_in(self, t):
        t = self._t(t)
        return 1.0 / np.sqrt(self.sigma_data ** 2 + t ** 2)

    def c_noise(self, t):
        return 0.25 * np.log(self._t(t))

    def sample_t(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.exp(self.P_mean + self.P_std * rng.standard_normal(n))

    def sampling_grid(self, steps: int = 18) -> np.ndarray:
        """Decreasing sigma grid of length ``steps`` (rho-warped)."""
        scale = self.sigma_data / 0.5
        lo, hi = (self.sigma_min * scale) ** (1 / self.rho), (self.sigma_max * scale) ** (1 / self.rho)
        i = np.arange(steps)
        return (hi + i / (steps - 1) * (lo - hi)) ** self.rho


def time_features(c_noise: np.ndarray) -> np.ndarray:
    c = np.asarray(c_noise, dtype=np.float64).reshape(-1, 1)
    return np.concatenate([c] + [f(k * c) for k in _FREQS for f in (np.sin, np.cos)], axis=1)


@register
class DiffusionModel(Model):
    """``D(x, t) = c_skip x + c_out F(c_in x, c_noise)`` with an MLP ``F``.

    ``F`` has ``depth`` SiLU hidden layers of width ``hidden``; its input is
    ``c_in x`` concatenated with time features of ``c_noise``. Labels, if any,
    enter through an embedding added to the first hidden layer, with row
    ``class_count`` acting as the null label.
    """

    kind = "diffusion"

    def __init__(self, data_dim: int = 2, class_count: int = 0, hidden: int = 64,
                 depth: int = 3, schedule: NoiseSchedule | None = None, seed: int | None = 0):
        super().__init__()
        self.data_dim, self.class_count, self.hidden, self.depth = data_dim, class_count, hidden, depth
        self.schedule = schedule or NoiseSchedule()
        rng = np.random.default_rng(seed)
        n_in = data_dim + 1 + 2 * len(_FREQS)
        widths = [n_in] + [hidden] * depth
        for i in range(depth):
            self.params[f"W{i}"] = glorot(rng, widths[i], widths[i + 1])
            self.params[f"b{i}"] = np.zeros(widths[i + 1])
            if i == 0 and class_count:
                self.params["label_emb"] = 0.1 * rng.normal(size=(class_count + 1, hidden))
        self.params["W_out"] = 0.1 * glorot(rng, hidden, data_dim)
        self.params["b_out"] = np.zeros(data_dim)

    def config(self) -> dict:
        return {"data_dim": self.data_dim, "class_count": self.class_count,
                "hidden": self.hidden, "depth": self.depth, "schedule": asdict(self.schedule)}

    @classmethod
    def from_config(cls, cfg: dict) -> "DiffusionModel":
        return cls(int(cfg["data_dim"]), int(cfg.get("class_count", 0)), int(cfg.get("hidden", 64)),
                   int(cfg.get("depth", 3)), NoiseSchedule(**cfg.get("schedule", {})), seed=None)

    def _label_index(self, labels, B):
        if not self.class_count:
            return None
        if labels is None:
            return np.full(B, self.class_count)
        lab = np.broadcast_to(np.asarray(labels, dtype=np.int64), (B,))
        if np.any(lab >= self.class_count) or np.any(lab < -1):
            raise ValueError(f"label out of range [0, {self.class_count})")
        return np.where(lab < 0, self.class_count, lab)

    def F(self, x_in, c_noise, labels=None, P=None) -> G.Tensor:
        """The free-form network on preconditioned input."""
        P = self._p(P)
        x_in = np.asarray(x_in, dtype=np.float64)
        B = x_in.shape[0]
        h = np.concatenate([x_in, time_features(np.broadcast_to(c_noise, (B,)))], axis=1)
        li = self._label_index(labels, B)
        for i in range(self.depth):
            h = G.affine(h, P[f"W{i}"], P[f"b{i}"])
            if i == 0 and li is not None:
                h = h + G.take_rows(P["label_emb"], li)
            h = G.silu(h)
        return G.affine(h, P["W_out"], P["b_out"])

    def denoise(self, x_t, t, labels=None, P=None) -> G.Tensor:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x_t.shape[0],))
        s = self.schedule
        F = self.F(s.c_in(t)[:, None] * x_t, s.c_noise(t), labels, P)
        return s.c_skip(t)[:, None] * x_t + G.mul(s.c_out(t)[:, None], F)

    def sample(self, rng: np.random.Generator, n: int, labels=None, steps: int = 18,
               guidance: float = 0.0) -> np.ndarray:
        return diffusion_sample(self, labels, steps, rng, n=n, guidance=guidance)


def denoise(model: DiffusionModel, x_t, t, label=None, P=None) -> G.Tensor:
    return model.denoise(x_t, t, label, P)


def f_target(schedule: NoiseSchedule, x0, x_t, t) -> np.ndarray:
    """Regression target ``(x0 - c_skip x_t) / c_out`` for the free-form net."""
    t = np.asarray(t)[:, None]
    return (x0 - schedule.c_skip(t) * x_t) / schedule.c_out(t)


def draw_noise(schedule: NoiseSchedule, rng: np.random.Generator, n: int, dim: int):
    """One (t, eps) pair per batch row; t ~ exp(N(P_mean, P_std^2))."""
    t = schedule.sample_t(rng, n)
    eps = rng.standard_normal((n, dim))
    return t, eps


def f_residual(model: DiffusionModel, x0, t, eps, labels=None, P=None) -> G.Tensor:
    """Per-row ``||F(c_in x_t, c_noise) - F_hat||^2`` with ``x_t = x0 + t eps``."""
    s = model.schedule
    x0 = np.asarray(x0, dtype=np.float64)
    x_t = x0 + t[:, None] * eps
    F = model.F(s.c_in(t)[:, None] * x_t, s.c_noise(t), labels, P)
    return G.squared_error(F, f_target(s, x0, x_t, t))


def edm_mle_loss(model: DiffusionModel, x0, labels, rng: np.random.Generator, P=None,
                 noise=None) -> G.Tensor:
    """F-prediction MSE, averaged over the batch and summed over dimensions."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t, eps = noise if noise is not None else draw_noise(model.schedule, rng, *x0.shape)
    return G.mean(f_residual(model, x0, t, eps, labels, P))


def edm_weighted_denoiser_loss(model: DiffusionModel, x0, labels, t, eps, P=None) -> G.Tensor:
    """Denoiser-space form: mean of ``lambda(t) ||D(x_t) - x0||^2``."""
    s = model.schedule
    x0 = np.asarray(x0, dtype=np.float64)
    weight = (t ** 2 + s.sigma_data ** 2) / (t * s.sigma_data) ** 2
    D = model.denoise(x0 + t[:, None] * eps, t, labels, P)
    return G.mean(G.mul(weight, G.squared_error(D, x0)))


def diffusion_sample(model: DiffusionModel, labels, steps: int, rng: np.random.Generator,
                     n: int = 1, guidance: float = 0.0) -> np.ndarray:
    """Heun integration of the probability-flow ODE ``dx/dt = (x - D(x, t)) / t``.

    The rng is used only for the initial draw ``x ~ N(0, t_max^2 I)``. The last
    step goes from the smallest grid sigma to 0 with a single Euler step,
    which returns the denoiser output there.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    from ..metrics import cfg_score

    sig = np.append(model.schedule.sampling_grid(steps), 0.0)
    x = rng.standard_normal((n, model.data_dim)) * sig[0]
    if n == 0:
        return x

    def D(x, t):
        d = model.denoise(x, t, labels).data
        if guidance:
            d = cfg_score(d, model.denoise(x, t, None).data, guidance)
        return d

    for i in range(steps):
        t_cur, t_next = sig[i], sig[i + 1]
        d_cur = (x - D(x, t_cur)) / t_cur
        x_next = x + (t_next - t_cur) * d_cur
        if t_next > 0:
            d_next = (x_next - D(x_next, t_next)) / t_next
            x_next = x + (t_next - t_cur) * 0.5 * (d_cur + d_next)
        x = x_next
    return x
