"""Seeded synthetic targets: 2-D Gaussian mixtures, Markov chains, categoricals.

Every generator is a pure function of its parameters and seed; the dataset
provenance records both so the dataset can be rebuilt bit-identically.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .models.categorical import CategoricalDistribution
from .models.checkpoint import read_container, write_container


@dataclass
class Dataset:
    items: np.ndarray
    labels: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.items)

    def batch(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, len(self.items), size=n)
        return self.items[idx], (None if self.labels is None else self.labels[idx])

    def save(self, path):
        arrays = [("items", self.items)]
        if self.labels is not None:
            arrays.append(("labels", self.labels))
        return write_container(path, {"kind": "dataset", "provenance": self.provenance}, arrays)

    @classmethod
    def load(cls, path) -> "Dataset":
        header, arrays = read_container(path)
        if header.get("kind") != "dataset":
            raise ValueError(f"{path}: not a dataset container")
        return cls(arrays["items"], arrays.get("labels"), header["provenance"])


# -- Gaussian mixtures ------------------------------------------------------------------

@dataclass(frozen=True)
class GMM2D:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64).reshape(len(w), 2)
        S = np.asarray(self.covs, dtype=np.float64).reshape(len(w), 2, 2)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        for k, c in enumerate(S):
            if not np.allclose(c, c.T) or np.any(np.linalg.eigvalsh(c) <= 0):
                raise ValueError(f"covariance {k} is not symmetric positive-definite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", S)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def component_log_density(self, x) -> np.ndarray:
        """(N, K) log N(x | mu_k, S_k)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty((x.shape[0], self.n_components))
        for k in range(self.n_components):
            L = np.linalg.cholesky(self.covs[k])
            z = np.linalg.solve(L, (x - self.means[k]).T)
            out[:, k] = -0.5 * np.sum(z * z, axis=0) - np.log(np.diag(L)).sum() - np.log(2 * np.pi)
        return out

    def log_density(self, x) -> np.ndarray:
        lc = self.component_log_density(x) + np.log(self.weights)
        m = lc.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(lc - m).sum(axis=1, keepdims=True)))[:, 0]

    def sample(self, rng: np.random.Generator, n: int, labels=None):
        comp = rng.choice(self.n_components, size=n, p=self.weights) if labels is None \
            else np.asarray(labels, dtype=np.int64)
        z = rng.standard_normal((n, 2))
        L = np.linalg.cholesky(self.covs)
        x = self.means[comp] + np.einsum("nij,nj->ni", L[comp], z)
        return x, comp

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def cov(self) -> np.ndarray:
        mu = self.mean()
        d = self.means - mu
        return np.einsum("k,kij->ij", self.weights, self.covs + np.einsum("ki,kj->kij", d, d))

    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov()))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covs": self.covs.tolist()}


def _rot(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def default_gmm2d() -> GMM2D:
    """Artifact default toy target: one dominant mode and two minor ones.

    Weights 0.7/0.2/0.1, means on a unit-side triangle, anisotropic
    covariances. These are artifact defaults, not published values.
    """
    means = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    scales = [(0.16, 0.06, 30.0), (0.06, 0.14, 0.0), (0.10, 0.05, -45.0)]
    covs = np.array([_rot(a) @ np.diag([sx ** 2, sy ** 2]) @ _rot(a).T for sx, sy, a in scales])
    return GMM2D(np.array([0.7, 0.2, 0.1]), means, covs)


def make_gmm2d(n_components: int | None = None, weights=None, means=None, covs=None,
               n_samples: int = 10_000, seed: int = 0) -> tuple[Dataset, GMM2D]:
    """Sample a mixture dataset; labels are the component indices."""
    if weights is None:
        gmm = default_gmm2d()
    else:
        gmm = GMM2D(weights, means, covs)
    if n_components is not None and n_components != gmm.n_components:
        raise ValueError(f"n_components={n_components} but {gmm.n_components} given")
    x, comp = gmm.sample(np.random.default_rng(seed), n_samples)
    prov = {"generator": "gmm2d", "seed": seed, "n_samples": n_samples, "params": gmm.to_dict()}
    return Dataset(x, comp, prov), gmm


def make_two_moons(n_samples: int = 10_000, noise: float = 0.05, seed: int = 0) -> Dataset:
    """Two interleaved half circles; labels mark the moon. No exact density."""
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, 2, size=n_samples)
    a = rng.uniform(0.0, np.pi, size=n_samples)
    x = np.where(lab[:, None] == 0,
                 np.stack([np.cos(a), np.sin(a)], axis=1),
                 np.stack([1.0 - np.cos(a), 0.5 - np.sin(a)], axis=1))
    x = x + noise * rng.standard_normal((n_samples, 2))
    prov = {"generator": "two_moons", "seed": seed, "n_samples": n_samples, "params": {"noise": noise}}
    return Dataset(x, lab, prov)


# -- Markov chains -----------------------------------------------------------------------

@dataclass(frozen=True)
class MarkovChain:
    initial: np.ndarray
    transition: np.ndarray
    seq_len: int

    def __post_init__(self):
        init = np.asarray(self.initial, dtype=np.float64)
        T = np.asarray(self.transition, dtype=np.float64)
        if T.ndim != 2 or T.shape[0] != T.shape[1] or init.shape != (T.shape[0],):
            raise ValueError("transition must be V x V and initial length V")
        if np.any(T < 0) or np.any(np.abs(T.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("transition matrix is not row-stochastic")
        if np.any(init < 0) or abs(init.sum() - 1.0) > 1e-12:
            raise ValueError("initial distribution is not normalized")
        object.__setattr__(self, "initial", init)
        object.__setattr__(self, "transition", T)

    @property
    def V(self) -> int:
        return self.initial.size

    def all_sequences(self) -> np.ndarray:
        return np.array(list(itertools.product(range(self.V), repeat=self.seq_len)), dtype=np.int64)

    def log_prob(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.int64))
        with np.errstate(divide="ignore"):
            lp = np.log(self.initial[x[:, 0]])
            for n in range(1, x.shape[1]):
                lp = lp + np.log(self.transition[x[:, n - 1], x[:, n]])
        return lp

    def exact_pmf(self) -> np.ndarray:
        """Probabilities of all V**d sequences in lexicographic order."""
        if self.V ** self.seq_len > 10 ** 4:
            raise ValueError("sequence space exceeds 1e4; exact pmf disabled")
        return np.exp(self.log_prob(self.all_sequences()))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        x = np.empty((n, self.seq_len), dtype=np.int64)
        cum0 = np.cumsum(self.initial)
        x[:, 0] = np.searchsorted(cum0, rng.random(n) * cum0[-1], side="right")
        cumT = np.cumsum(self.transition, axis=1)
        for k in range(1, self.seq_len):
            rows = cumT[x[:, k - 1]]
            u = rng.random((n, 1)) * rows[:, -1:]
            x[:, k] = np.minimum((u >= rows).sum(axis=1), self.V - 1)
        return x


def default_markov_chain(V: int = 3, d: int = 4) -> MarkovChain:
    """Sticky chain with a preferred successor per state (artifact default)."""
    T = np.full((V, V), 0.1 / max(V - 2, 1))
    for i in range(V):
        T[i, i] = 0.6
        T[i, (i + 1) % V] = 0.3 if V > 2 else 0.4
    if V == 2:
        T = np.array([[0.6, 0.4], [0.4, 0.6]])
    T = T / T.sum(axis=1, keepdims=True)
    init = np.linspace(1.0, 2.0, V)
    return MarkovChain(init / init.sum(), T, d)


def make_markov_dataset(V: int = 3, d: int = 4, transition_matrix=None, n_samples: int = 10_000,
                        seed: int = 0, initial=None) -> tuple[Dataset, MarkovChain]:
    if transition_matrix is None:
        chain = default_markov_chain(V, d)
    else:
        init = np.full(V, 1.0 / V) if initial is None else initial
        chain = MarkovChain(init, transition_matrix, d)
    x = chain.sample(np.random.default_rng(seed), n_samples)
    prov = {"generator": "markov_chain", "seed": seed, "n_samples": n_samples,
            "params": {"initial": chain.initial.tolist(), "transition": chain.transition.tolist(),
                       "seq_len": d}}
    return Dataset(x, None, prov), chain


def make_categorical_dataset(probs, n_samples: int, seed: int = 0) -> tuple[Dataset, CategoricalDistribution]:
    dist = CategoricalDistribution.normalized(probs)
    x = dist.sample(np.random.default_rng(seed), n_samples)
    prov = {"generator": "categorical", "seed": seed, "n_samples": n_samples,
            "params": {"probs": dist.probs.tolist()}}
    return Dataset(x, None, prov), dist


def regenerate(provenance: dict) -> Dataset:
    """Rebuild a dataset from its provenance record."""
    g, p = provenance["generator"], provenance["params"]
    n, seed = provenance["n_samples"], provenance["seed"]
    if g == "gmm2d":
        return make_gmm2d(None, p["weights"], p["means"], p["covs"], n, seed)[0]
    if g == "markov_chain":
        T = np.array(p["transition"])
        return make_markov_dataset(T.shape[0], p["seq_len"], T, n, seed, p["initial"])[0]
    if g == "categorical":
        return make_categorical_dataset(p["probs"], n, seed)[0]
    if g == "two_moons":
        return make_two_moons(n, p["noise"], seed)
    raise ValueError(f"unknown generator {g!r}")
