"""Autoregressive token-sequence model with a shared per-position network."""
from __future__ import annotations

import itertools

import numpy as np

from .. import grad as G
from .base import Model, glorot, register


@register
class ARModel(Model):
    """``log p(x) = sum_n log p(x_n | x_<n, label)``.

    The conditional at position ``n`` is one tanh layer over the sum of
    position-specific token embeddings of the prefix plus a position
    embedding (the "context summary"), followed by a softmax over the
    vocabulary. The weights are shared across positions. For class-conditional
    models a label embedding is added to the hidden layer; row
    ``class_count`` is the learned null label used for unconditional
    (label-dropped) evaluation.
    """

    kind = "ar"

    def __init__(self, vocab_size: int, seq_len: int, class_count: int = 0,
                 hidden: int = 8, seed: int | None = 0, init: str = "normal"):
        super().__init__()
        self.V, self.d, self.class_count, self.hidden = vocab_size, seq_len, class_count, hidden
        n_in = seq_len * vocab_size + seq_len
        rng = np.random.default_rng(seed)
        zeros = init == "zeros"
        self.params["W_in"] = np.zeros((n_in, hidden)) if zeros else glorot(rng, n_in, hidden)
        self.params["b_in"] = np.zeros(hidden)
        if class_count:
            self.params["label_emb"] = np.zeros((class_count + 1, hidden)) if zeros \
                else 0.5 * rng.normal(size=(class_count + 1, hidden))
        self.params["W_out"] = np.zeros((hidden, vocab_size)) if zeros \
            else glorot(rng, hidden, vocab_size)
        self.params["b_out"] = np.zeros(vocab_size)

    def config(self) -> dict:
        return {"vocab_size": self.V, "seq_len": self.d,
                "class_count": self.class_count, "hidden": self.hidden}

    @classmethod
    def from_config(cls, cfg: dict) -> "ARModel":
        return cls(int(cfg["vocab_size"]), int(cfg["seq_len"]), int(cfg.get("class_count", 0)),
                   int(cfg.get("hidden", 8)), seed=None, init="zeros")

    # -- features ------------------------------------------------------------

    def _features(self, x: np.ndarray) -> np.ndarray:
        """One row per (sequence, position): prefix one-hots + position one-hot."""
        B, d, V = x.shape[0], self.d, self.V
        feats = np.zeros((B, d, d * V + d))
        for n in range(d):
            feats[:, n, d * V + n] = 1.0
            for m in range(n):
                feats[np.arange(B), n, m * V + x[:, m]] = 1.0
        return feats.reshape(B * d, d * V + d)

    def _label_index(self, labels, B: int) -> np.ndarray | None:
        if not self.class_count:
            if labels is not None and np.any(np.asarray(labels) >= 0):
                raise ValueError("unconditional model does not accept labels")
            return None
        if labels is None:
            return np.full(B, self.class_count)
        lab = np.broadcast_to(np.asarray(labels, dtype=np.int64), (B,))
        if np.any(lab >= self.class_count) or np.any(lab < -1):
            raise ValueError(f"label out of range [0, {self.class_count})")
        return np.where(lab < 0, self.class_count, lab)

    def _logits(self, feats: np.ndarray, label_idx, P) -> G.Tensor:
        h = G.matmul(feats, P["W_in"]) + P["b_in"]
        if label_idx is not None:
            h = h + G.take_rows(P["label_emb"], label_idx)
        h = G.tanh(h)
        return G.matmul(h, P["W_out"]) + P["b_out"]

    def _check_tokens(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.int64))
        if x.shape[1] != self.d:
            raise ValueError(f"sequence length {x.shape[1]} != {self.d}")
        if np.any(x < 0) or np.any(x >= self.V):
            raise ValueError(f"token out of vocabulary [0, {self.V})")
        return x

    # -- likelihood ------------------------------------------------------------

    def position_log_probs(self, x, labels=None, P=None) -> G.Tensor:
        """(B*d, V) log-softmax of every conditional along the batch."""
        x = self._check_tokens(x)
        P = self._p(P)
        li = self._label_index(labels, x.shape[0])
        if li is not None:
            li = np.repeat(li, self.d)
        return G.log_softmax(self._logits(self._features(x), li, P))

    def log_prob(self, x, labels=None, P=None) -> G.Tensor:
        """Per-sequence log-likelihood, shape (B,)."""
        x = self._check_tokens(x)
        lp = self.position_log_probs(x, labels, P)
        picked = G.pick(lp, x.reshape(-1))
        return G.sum(G.reshape(picked, (x.shape[0], self.d)), axis=1)

    def all_sequences(self) -> np.ndarray:
        return np.array(list(itertools.product(range(self.V), repeat=self.d)), dtype=np.int64)

    def exact_pmf(self, label=None) -> np.ndarray:
        """Probabilities of all V**d sequences in lexicographic order."""
        if self.V ** self.d > 10 ** 6:
            raise ValueError("sequence space too large to enumerate")
        seqs = self.all_sequences()
        labels = None if label is None else np.full(len(seqs), label)
        return np.exp(self.log_prob(seqs, labels).data)

    # -- sampling --------------------------------------------------------------

    def step_logits(self, prefix: np.ndarray, n: int, labels=None) -> np.ndarray:
        """Logits of the conditional at position ``n`` for each row of ``prefix``."""
        B = prefix.shape[0]
        feats = np.zeros((B, self.d * self.V + self.d))
        feats[:, self.d * self.V + n] = 1.0
        for m in range(n):
            feats[np.arange(B), m * self.V + prefix[:, m]] = 1.0
        return self._logits(feats, self._label_index(labels, B), self.tensors()).data

    def sample(self, rng: np.random.Generator, n: int, labels=None,
               guidance: float = 0.0) -> np.ndarray:
        """Ancestral sampling; ``guidance`` > 0 applies logit-space CFG."""
        from ..metrics import cfg_score

        x = np.zeros((n, self.d), dtype=np.int64)
        for pos in range(self.d):
            logits = self.step_logits(x, pos, labels)
            if guidance:
                uncond = self.step_logits(x, pos, None)
                logits = cfg_score(logits, uncond, guidance)
            logp = G.log_softmax(logits).data
            cum = np.cumsum(np.exp(logp), axis=1)
            u = rng.random((n, 1)) * cum[:, -1:]
            x[:, pos] = np.minimum((u > cum).sum(axis=1), self.V - 1)
        return x


def ar_log_prob(model: ARModel, x, label=None, P=None) -> G.Tensor:
    return model.log_prob(x, None if label is None else np.atleast_1d(label), P)


def ar_sample(model: ARModel, label, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    return model.sample(rng, n, None if label is None else np.full(n, label))
