"""Transition discriminators: learned (MLP or table), exact oracles, and held-out accuracy."""
from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import DiscreteEnv, State
from .nn import DenseNet, OptimState, net_from_bytes, net_to_bytes, opt_step, sigmoid, soft_update
from .replay import PairBatch, ReplayBuffer

EPS = 1e-7
_CKPT_MAGIC = b"TDISC1\n"


def _ids(states) -> np.ndarray:
    return np.asarray([s.id if isinstance(s, State) else int(s) for s in np.atleast_1d(states)], dtype=np.int64)


def bce_terms(p_pos: np.ndarray, p_neg: np.ndarray, alpha: float) -> float:
    """Weighted BCE with probabilities clamped to [EPS, 1 - EPS]."""
    pos = np.log(np.clip(p_pos, EPS, 1 - EPS)).mean() if len(p_pos) else 0.0
    neg = np.log(1 - np.clip(p_neg, EPS, 1 - EPS)).mean() if len(p_neg) else 0.0
    return float(-(alpha * pos + (1 - alpha) * neg))


def _split(positives: PairBatch, negatives: list[PairBatch]):
    neg_left = np.concatenate([b.left for b in negatives]) if negatives else np.zeros(0, np.int64)
    neg_right = np.concatenate([b.right for b in negatives]) if negatives else np.zeros(0, np.int64)
    if len(positives) == 0 and len(neg_left) == 0:
        raise ValueError("train_step needs at least one pair")
    return positives.left, positives.right, neg_left, neg_right


class TransitionDiscriminator:
    """MLP D(s_i, s_j) over concatenated state features, with a soft-updated target copy.

    ``lam`` is applied exactly as ``target <- (1 - lam) * online + lam * target``.
    """

    backend = "mlp"

    def __init__(self, features: np.ndarray, hidden=(64, 64), alpha: float = 0.99, lam: float = 1e-4,
                 learning_rate: float = 1e-3, seed: int = 0, zero_init: bool = False):
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
        self.features = np.asarray(features, dtype=np.float64)
        self.alpha = alpha
        self.lam = lam
        dims = [2 * self.features.shape[1], *hidden, 1]
        self.online = DenseNet.create(dims, np.random.default_rng(seed), zero=zero_init)
        self.target = self.online.copy()
        self.opt = OptimState.for_net(self.online, learning_rate)

    def _inputs(self, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        return np.concatenate([self.features[left], self.features[right]], axis=1)

    def predict(self, s_i: State, s_j: State, use_target: bool = True) -> float:
        x = np.concatenate([np.asarray(s_i.features, float), np.asarray(s_j.features, float)])
        net = self.target if use_target else self.online
        return float(net.forward(x)[0])

    def predict_ids(self, left, right, use_target: bool = True) -> np.ndarray:
        left, right = np.asarray(left, np.int64), np.asarray(right, np.int64)
        net = self.target if use_target else self.online
        return net.forward(self._inputs(left, right))[:, 0]

    def predict_matrix(self, rows, cols, use_target: bool = True) -> np.ndarray:
        """``out[i, j] = D(rows[i], cols[j])``."""
        rows, cols = np.asarray(rows, np.int64), np.asarray(cols, np.int64)
        left = np.repeat(rows, len(cols))
        right = np.tile(cols, len(rows))
        return self.predict_ids(left, right, use_target).reshape(len(rows), len(cols))

    def loss(self, positives: PairBatch, negatives: list[PairBatch], use_target: bool = False) -> float:
        pl, pr, nl, nr = _split(positives, negatives)
        return bce_terms(self.predict_ids(pl, pr, use_target), self.predict_ids(nl, nr, use_target), self.alpha)

    def train_step(self, positives: PairBatch, negatives: list[PairBatch]) -> float:
        pl, pr, nl, nr = _split(positives, negatives)
        x = self._inputs(np.concatenate([pl, nl]), np.concatenate([pr, nr]))
        p, cache = self.online.forward_cached(x)
        p = p[:, 0]
        n_pos = len(pl)
        loss = bce_terms(p[:n_pos], p[n_pos:], self.alpha)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite discriminator loss; batch sizes pos={n_pos} neg={len(nl)}, "
                                     f"prob range [{p.min()}, {p.max()}]")
        # d loss / d p, with the clamp's zero gradient outside [EPS, 1 - EPS]
        grad = np.zeros_like(p)
        if n_pos:
            pp = p[:n_pos]
            grad[:n_pos] = np.where(pp > EPS, -self.alpha / (n_pos * np.maximum(pp, EPS)), 0.0)
        if len(nl):
            pn = p[n_pos:]
            grad[n_pos:] = np.where(pn < 1 - EPS, (1 - self.alpha) / (len(nl) * np.maximum(1 - pn, EPS)), 0.0)
        opt_step(self.online, self.opt, self.online.backward(cache, grad[:, None]))
        soft_update(self.target, self.online, self.lam)
        return loss

    # checkpoints: two nn snapshots (online, target) behind a small header
    def to_bytes(self) -> bytes:
        extra = {"alpha": self.alpha, "lam": self.lam, "backend": self.backend}
        blobs = [net_to_bytes(self.online, {**extra, "role": "online"}),
                 net_to_bytes(self.target, {**extra, "role": "target"})]
        out = [_CKPT_MAGIC]
        for b in blobs:
            out += [struct.pack("<Q", len(b)), b]
        return b"".join(out)

    def save(self, path: str | Path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, features: np.ndarray, learning_rate: float = 1e-3) -> "TransitionDiscriminator":
        blob = Path(path).read_bytes()
        if not blob.startswith(_CKPT_MAGIC):
            raise ValueError(f"{path} is not a discriminator checkpoint")
        off = len(_CKPT_MAGIC)
        nets = []
        for _ in range(2):
            (n,) = struct.unpack_from("<Q", blob, off)
            off += 8
            nets.append(net_from_bytes(blob[off:off + n]))
            off += n
        (online, header), (target, _) = nets
        d = cls.__new__(cls)
        d.features = np.asarray(features, dtype=np.float64)
        d.alpha, d.lam = header["alpha"], header["lam"]
        d.online, d.target = online, target
        d.opt = OptimState.for_net(online, learning_rate)
        return d


class TabularDiscriminator:
    """One logit per ordered state pair; a debugging backend that removes function approximation."""

    backend = "table"

    def __init__(self, n_states: int, alpha: float = 0.99, lam: float = 1e-4, learning_rate: float = 1.0):
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
        self.alpha, self.lam, self.learning_rate = alpha, lam, learning_rate
        self.logits = np.zeros((n_states, n_states))
        self.target_logits = self.logits.copy()

    def predict(self, s_i: State, s_j: State, use_target: bool = True) -> float:
        return float(self.predict_ids([s_i.id], [s_j.id], use_target)[0])

    def predict_ids(self, left, right, use_target: bool = True) -> np.ndarray:
        table = self.target_logits if use_target else self.logits
        return sigmoid(table[np.asarray(left, np.int64), np.asarray(right, np.int64)])

    def predict_matrix(self, rows, cols, use_target: bool = True) -> np.ndarray:
        table = self.target_logits if use_target else self.logits
        return sigmoid(table[np.ix_(np.asarray(rows, np.int64), np.asarray(cols, np.int64))])

    def loss(self, positives: PairBatch, negatives: list[PairBatch], use_target: bool = False) -> float:
        pl, pr, nl, nr = _split(positives, negatives)
        return bce_terms(self.predict_ids(pl, pr, use_target), self.predict_ids(nl, nr, use_target), self.alpha)

    def train_step(self, positives: PairBatch, negatives: list[PairBatch]) -> float:
        pl, pr, nl, nr = _split(positives, negatives)
        p_pos, p_neg = self.predict_ids(pl, pr, False), self.predict_ids(nl, nr, False)
        loss = bce_terms(p_pos, p_neg, self.alpha)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite tabular discriminator loss")
        grad = np.zeros_like(self.logits)
        if len(pl):
            np.add.at(grad, (pl, pr), -self.alpha * (1 - p_pos) / len(pl))
        if len(nl):
            np.add.at(grad, (nl, nr), (1 - self.alpha) * p_neg / len(nl))
        self.logits -= self.learning_rate * grad
        self.target_logits = (1 - self.lam) * self.logits + self.lam * self.target_logits
        return loss


class OracleDiscriminator:
    """Exact reachability as a discriminator; never trained."""

    backend = "oracle"

    def __init__(self, env: DiscreteEnv, k: int = 1):
        self.env = env
        self.table = reachability_within(env, k).astype(np.float64)

    def predict(self, s_i: State, s_j: State, use_target: bool = True) -> float:
        return float(self.table[s_i.id, s_j.id])

    def predict_ids(self, left, right, use_target: bool = True) -> np.ndarray:
        return self.table[np.asarray(left, np.int64), np.asarray(right, np.int64)]

    def predict_matrix(self, rows, cols, use_target: bool = True) -> np.ndarray:
        return self.table[np.ix_(np.asarray(rows, np.int64), np.asarray(cols, np.int64))]

    def train_step(self, positives, negatives) -> float:
        return 0.0


# --------------------------------------------------------------------------- oracles

def oracle_reachable(env: DiscreteEnv, s_i: State | int, s_j: State | int) -> int:
    i, j = _ids([s_i, s_j])
    return int(np.any(env.next_table[i] == j))


def oracle_reachable_k(env: DiscreteEnv, s_i: State | int, s_j: State | int, k: int) -> int:
    """1 iff ``s_j`` is reached from ``s_i`` by some sequence of 1..k actions (bounded BFS)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    i, j = _ids([s_i, s_j])
    frontier = deque([(int(i), 0)])
    seen = {int(i)}
    while frontier:
        s, depth = frontier.popleft()
        if depth == k:
            continue
        for nxt in env.next_table[s]:
            nxt = int(nxt)
            if nxt == j:
                return 1
            if nxt not in seen:
                seen.add(nxt)
                frontier.append((nxt, depth + 1))
    return 0


def reachability_within(env: DiscreteEnv, k: int) -> np.ndarray:
    """Boolean matrix of ``oracle_reachable_k`` over all pairs, by repeated one-step expansion."""
    if k < 1:
        raise ValueError("k must be >= 1")
    one = env.support.astype(np.int64)
    reach = one.copy()
    for _ in range(k - 1):
        reach = ((reach + reach @ one) > 0).astype(np.int64)
    return reach.astype(bool)


# --------------------------------------------------------------------------- accuracy protocol

@dataclass
class AccuracyReport:
    acc_positive: float
    acc_contrastive: float
    acc_reversed: float
    n_positive: int
    n_contrastive: int
    n_reversed: int
    n_contrastive_excluded: int
    n_reversed_excluded: int
    threshold: float = 0.5

    def as_row(self) -> dict:
        return {"acc_positive": self.acc_positive, "acc_contrastive": self.acc_contrastive,
                "acc_reversed": self.acc_reversed}


def _acc(pred_positive: np.ndarray, truth: bool) -> float:
    if len(pred_positive) == 0:
        return float("nan")
    return float(np.mean(pred_positive == truth))


def evaluate_accuracy(d, env: DiscreteEnv, heldout: ReplayBuffer, threshold: float = 0.5,
                      n_contrastive: int = 2000, seed: int = 0, use_target: bool = True) -> AccuracyReport:
    """Per-category accuracy on held-out transitions.

    Contrastive and reversed pairs that the env oracle says are actually
    reachable are dropped from their category and only counted; a category
    with nothing left reports NaN.
    """
    if heldout is None or len(heldout) == 0:
        raise ValueError("evaluate_accuracy needs a nonempty held-out buffer")
    data = heldout.contents()
    rng = np.random.default_rng(seed)
    pos = d.predict_ids(data.s, data.s_next, use_target) >= threshold

    i = rng.integers(len(data.s), size=n_contrastive)
    j = rng.integers(len(data.s), size=n_contrastive)
    cl, cr = data.s[i], data.s[j]
    keep_c = ~env.support[cl, cr]
    con = d.predict_ids(cl[keep_c], cr[keep_c], use_target) >= threshold

    keep_r = ~env.support[data.s_next, data.s]
    rev = d.predict_ids(data.s_next[keep_r], data.s[keep_r], use_target) >= threshold

    return AccuracyReport(_acc(pos, True), _acc(con, False), _acc(rev, False),
                          int(len(pos)), int(keep_c.sum()), int(keep_r.sum()),
                          int((~keep_c).sum()), int((~keep_r).sum()), threshold)


def oracle_agreement(d, env: DiscreteEnv, threshold: float = 0.5, use_target: bool = True) -> float:
    """Fraction of all ordered state pairs where the thresholded discriminator matches the oracle."""
    ids = np.arange(env.n_states)
    pred = d.predict_matrix(ids, ids, use_target) >= threshold
    return float(np.mean(pred == env.support))


def contrastive_noise_rate(buffer: ReplayBuffer, env: DiscreteEnv, n: int = 10_000, seed: int = 0) -> float:
    """Share of contrastive draws that are in fact reachable pairs (label noise)."""
    data = buffer.contents()
    rng = np.random.default_rng(seed)
    i = rng.integers(len(data.s), size=n)
    j = rng.integers(len(data.s), size=n)
    return float(env.support[data.s[i], data.s[j]].mean())


def describe(d) -> str:
    return json.dumps({"backend": d.backend, "alpha": getattr(d, "alpha", None), "lam": getattr(d, "lam", None)})
