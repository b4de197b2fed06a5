"""Tabular discrete soft actor-critic with a behaviour-cloning term."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .env import ExpertDemo

GREEDY, SAMPLE = "greedy", "sample"
_TINY = np.finfo(np.float64).tiny


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) for strictly positive q."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


@dataclass
class SoftQAgent:
    """Q table plus a categorical policy stored as logits.

    Both the actor step and the BC step are cross-entropy steps taken in
    probability space: the policy row moves a fraction ``lr`` of the way
    toward its target distribution and the logits are reset to the log of
    the result. Convexity of KL then guarantees each actor step reduces
    KL(pi || Boltzmann(Q / ent_temp)) on a frozen critic.
    """

    n_states: int
    n_actions: int
    gamma: float = 0.97
    ent_temp: float = 0.05
    critic_lr: float = 0.5
    actor_lr: float = 0.3
    bc_lr: float = 0.5
    bc_weight: float = 1.0
    seed: int = 0
    q_init: float = 0.0
    q: np.ndarray = field(init=False, repr=False)
    logits: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.ent_temp <= 0:
            raise ValueError("ent_temp must be positive")
        for name in ("critic_lr", "actor_lr", "bc_lr"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.bc_weight < 0 or self.bc_lr * self.bc_weight >= 1.0:
            raise ValueError("bc_lr * bc_weight must lie in [0, 1)")
        self.q = np.full((self.n_states, self.n_actions), float(self.q_init))
        self.logits = np.zeros((self.n_states, self.n_actions))
        self.rng = np.random.default_rng(self.seed)

    # ------------------------------------------------------------------ policy
    def policy(self, states=None) -> np.ndarray:
        z = self.logits if states is None else self.logits[states]
        return softmax(z, axis=-1)

    def boltzmann(self, states=None) -> np.ndarray:
        q = self.q if states is None else self.q[states]
        return softmax(q / self.ent_temp, axis=-1)

    def v_soft(self, states=None) -> np.ndarray:
        q = self.q if states is None else self.q[states]
        return self.ent_temp * logsumexp(q / self.ent_temp, axis=-1)

    def act(self, s: int, mode: str = SAMPLE) -> int:
        if mode == GREEDY:
            return int(np.argmax(self.logits[s]))  # argmax returns the first maximum
        if mode != SAMPLE:
            raise ValueError(f"unknown action mode {mode!r}")
        p = softmax(self.logits[s])
        return int(min(np.searchsorted(np.cumsum(p), self.rng.random(), side="right"), self.n_actions - 1))

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)

    # ------------------------------------------------------------------ critic
    def critic_update(self, s, a, r, s_next, terminal) -> float:
        """One squared-error step of Q(s, a) toward r + gamma * (1 - terminal) * V_soft(s').

        Duplicate (s, a) entries in the batch are averaged, so ``critic_lr=1``
        jumps straight to the mean target.
        """
        s, a, s_next = (np.asarray(x, np.int64) for x in (s, a, s_next))
        r = np.asarray(r, np.float64)
        cont = 1.0 - np.asarray(terminal, np.float64)
        y = r + self.gamma * cont * self.v_soft(s_next)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"non-finite critic target (reward range [{r.min()}, {r.max()}])")
        err = y - self.q[s, a]
        flat = s * self.n_actions + a
        size = self.n_states * self.n_actions
        counts = np.bincount(flat, minlength=size)
        sums = np.bincount(flat, weights=err, minlength=size)
        hit = counts > 0
        self.q.ravel()[hit] += self.critic_lr * sums[hit] / counts[hit]
        return float(np.mean(err ** 2))

    # ------------------------------------------------------------------ actor
    def actor_gradient(self, states) -> np.ndarray:
        """Gradient of CE(Boltzmann(Q), softmax(logits)) with respect to the logits."""
        states = np.asarray(states, np.int64)
        return self.policy(states) - self.boltzmann(states)

    def _mix_toward(self, states: np.ndarray, target: np.ndarray, lr: float):
        pi = self.policy(states)
        # the floor keeps logits finite once BC has driven other actions to ~0
        self.logits[states] = np.log(np.maximum((1.0 - lr) * pi + lr * target, _TINY))

    def actor_update(self, states) -> float:
        """Move pi(.|s) toward Boltzmann(Q / ent_temp) once per distinct batch state; returns mean KL before the step."""
        states = np.unique(np.asarray(states, np.int64))
        if len(states) == 0:
            return 0.0
        target = self.boltzmann(states)
        kl = _kl(self.policy(states), target)
        self._mix_toward(states, target, self.actor_lr)
        return float(kl.mean())

    def kl_to_boltzmann(self, states=None) -> np.ndarray:
        return _kl(self.policy(states), self.boltzmann(states))

    # ------------------------------------------------------------------ behaviour cloning
    def bc_update(self, demo: ExpertDemo) -> float:
        """Cross-entropy step toward the one-hot expert action at every demo pair; returns mean -log pi before."""
        s, a = demo.state_ids, demo.action_ids
        if len(s) == 0:
            raise ValueError("bc_update needs a nonempty demo")
        loss = float(-np.mean(np.log(self.policy(s)[np.arange(len(s)), a])))
        if self.bc_weight == 0.0:
            return loss
        # one step per distinct expert state; a repeated state keeps its last action
        pairs = dict(zip(s.tolist(), a.tolist()))
        states = np.fromiter(pairs.keys(), np.int64)
        onehot = np.eye(self.n_actions)[np.fromiter(pairs.values(), np.int64)]
        self._mix_toward(states, onehot, self.bc_lr * self.bc_weight)
        return loss

    def snapshot(self) -> "SoftQAgent":
        return copy.deepcopy(self)
