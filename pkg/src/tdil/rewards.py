"""Surrogate and baseline rewards: transition-discriminator sums, IRL, L2 distance, mixtures."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .discriminator import EPS, OracleDiscriminator, bce_terms, reachability_within
from .env import CHAIN_ACTION_LABELS, GRID_ACTION_LABELS, DiscreteEnv, ExpertDemo, State, Trajectory, Transition
from .nn import DenseNet, OptimState, opt_step

IRL_MODES = ("indicator", "learned")
TDIL_BACKENDS = ("learned_target", "oracle", "oracle_multistep")
REWARD_KINDS = ("agg", "l2")


@dataclass
class RewardConfig:
    beta: float = 0.0
    irl_mode: str = "indicator"
    l2_scale: float = 1.0
    tdil_backend: str = "learned_target"
    k_max: int = 1
    weights: tuple[float, ...] = (1.0,)
    normalize_tdil: bool = False
    kind: str = "agg"  # "l2" swaps the whole reward for the L2 baseline

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.irl_mode not in IRL_MODES:
            raise ValueError(f"irl_mode must be one of {IRL_MODES}")
        if self.tdil_backend not in TDIL_BACKENDS:
            raise ValueError(f"tdil_backend must be one of {TDIL_BACKENDS}")
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"reward kind must be one of {REWARD_KINDS}")
        if self.l2_scale <= 0:
            raise ValueError("l2_scale must be positive")
        w = np.asarray(self.weights, dtype=float)
        if self.tdil_backend == "oracle_multistep":
            if len(w) != self.k_max or not np.all(np.isfinite(w)) or np.any(w < 0):
                raise ValueError("weights must be nonnegative, finite and have length k_max")


def _sid(s) -> int:
    return s.id if isinstance(s, State) else int(s)


# --------------------------------------------------------------------------- R_TDIL

def tdil_table(d, demo: ExpertDemo, n_states: int, normalize: bool = False) -> np.ndarray:
    """``out[s] = sum_e D_target(s, e)`` over deduplicated expert states e, for every state s."""
    experts = demo.unique_state_ids
    out = d.predict_matrix(np.arange(n_states), experts, use_target=True).sum(axis=1)
    return out / len(experts) if normalize else out


def r_tdil(t: Transition, demo: ExpertDemo, d, normalize: bool = False) -> float:
    experts = demo.unique_state_ids
    p = d.predict_ids(np.full(len(experts), t.s_next.id), experts, use_target=True)
    return float(p.sum() / len(experts) if normalize else p.sum())


def multistep_table(env: DiscreteEnv, demo: ExpertDemo, k_max: int, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if len(w) != k_max:
        raise ValueError("need one weight per horizon")
    experts = demo.unique_state_ids
    out = np.zeros(env.n_states)
    for k in range(1, k_max + 1):
        if w[k - 1] != 0.0:
            out += w[k - 1] * reachability_within(env, k)[:, experts].sum(axis=1)
    return out


def r_tdil_multistep(t: Transition, demo: ExpertDemo, env: DiscreteEnv, k_max: int, weights) -> float:
    """Weighted count of expert states reachable from ``t.s_next`` within k steps, k = 1..k_max."""
    return float(multistep_table(env, demo, k_max, weights)[t.s_next.id])


# --------------------------------------------------------------------------- R_IRL

def irl_indicator_table(demo: ExpertDemo, n_states: int, n_actions: int) -> np.ndarray:
    out = np.zeros((n_states, n_actions))
    out[demo.state_ids, demo.action_ids] = 1.0
    return out


def r_irl_indicator(s, a, demo: ExpertDemo) -> float:
    sid, aid = _sid(s), a.id if hasattr(a, "id") else int(a)
    return 1.0 if (sid, aid) in demo.expert_pairs else 0.0


class GailDiscriminator:
    """D_g(s, a) over [features(s), onehot(a)]; expert pairs are labelled 1, agent pairs 0."""

    def __init__(self, features: np.ndarray, n_actions: int, hidden=(64, 64), learning_rate: float = 1e-3,
                 seed: int = 0, zero_init: bool = False):
        self.features = np.asarray(features, dtype=np.float64)
        self.n_actions = n_actions
        dims = [self.features.shape[1] + n_actions, *hidden, 1]
        self.net = DenseNet.create(dims, np.random.default_rng(seed), zero=zero_init)
        self.opt = OptimState.for_net(self.net, learning_rate)

    def _inputs(self, s, a) -> np.ndarray:
        s, a = np.asarray(s, np.int64), np.asarray(a, np.int64)
        return np.concatenate([self.features[s], np.eye(self.n_actions)[a]], axis=1)

    def prob(self, s, a) -> np.ndarray:
        return self.net.forward(self._inputs(s, a))[:, 0]

    def reward_table(self) -> np.ndarray:
        n = len(self.features)
        s = np.repeat(np.arange(n), self.n_actions)
        a = np.tile(np.arange(self.n_actions), n)
        return gail_reward(self.prob(s, a)).reshape(n, self.n_actions)


def gail_reward(p: np.ndarray) -> np.ndarray:
    return -np.log(1.0 - np.clip(p, EPS, 1.0 - EPS))


def gail_train_step(g: GailDiscriminator, expert_pairs, agent_pairs) -> float:
    """One balanced BCE step; each argument is an (state_ids, action_ids) pair of arrays."""
    (es, ea), (as_, aa) = expert_pairs, agent_pairs
    n_e, n_a = len(es), len(as_)
    if n_e == 0 or n_a == 0:
        raise ValueError("gail_train_step needs both expert and agent pairs")
    x = np.concatenate([g._inputs(es, ea), g._inputs(as_, aa)])
    p, cache = g.net.forward_cached(x)
    p = p[:, 0]
    loss = 2.0 * bce_terms(p[:n_e], p[n_e:], 0.5)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite GAIL loss")
    grad = np.empty_like(p)
    grad[:n_e] = np.where(p[:n_e] > EPS, -1.0 / (n_e * np.maximum(p[:n_e], EPS)), 0.0)
    grad[n_e:] = np.where(p[n_e:] < 1 - EPS, 1.0 / (n_a * np.maximum(1 - p[n_e:], EPS)), 0.0)
    opt_step(g.net, g.opt, g.net.backward(cache, grad[:, None]))
    return loss


def r_irl_learned(g: GailDiscriminator, s, a) -> float:
    aid = a.id if hasattr(a, "id") else int(a)
    return float(gail_reward(g.prob([_sid(s)], [aid]))[0])


# --------------------------------------------------------------------------- L2 baseline

def _l2_expert_matrix(demo: ExpertDemo, features: np.ndarray, n_actions: int) -> np.ndarray:
    return np.concatenate([features[demo.state_ids], np.eye(n_actions)[demo.action_ids]], axis=1)


def l2_table(env: DiscreteEnv, demo: ExpertDemo, l2_scale: float = 1.0) -> np.ndarray:
    experts = _l2_expert_matrix(demo, env.features, env.n_actions)
    s = np.repeat(np.arange(env.n_states), env.n_actions)
    a = np.tile(np.arange(env.n_actions), env.n_states)
    q = np.concatenate([env.features[s], np.eye(env.n_actions)[a]], axis=1)
    dist = np.sqrt(((q[:, None, :] - experts[None, :, :]) ** 2).sum(-1)).min(axis=1)
    return np.exp(-l2_scale * dist).reshape(env.n_states, env.n_actions)


def r_l2(s: State, a, demo: ExpertDemo, l2_scale: float = 1.0, n_actions: int | None = None) -> float:
    """exp(-scale * min distance) from [features(s), onehot(a)] to the demo's state-action pairs."""
    aid = a.id if hasattr(a, "id") else int(a)
    if n_actions is None:
        n_actions = _ACTION_COUNTS[demo.trajectory.transitions[0].a.label]
    experts = np.array([[*t.s.features, *np.eye(n_actions)[t.a.id]] for t in demo.trajectory.transitions])
    q = np.array([*s.features, *np.eye(n_actions)[aid]])
    return float(np.exp(-l2_scale * np.sqrt(((experts - q) ** 2).sum(1)).min()))


_ACTION_COUNTS = {**{lab: len(GRID_ACTION_LABELS) for lab in GRID_ACTION_LABELS},
                  **{lab: len(CHAIN_ACTION_LABELS) for lab in CHAIN_ACTION_LABELS}}


# --------------------------------------------------------------------------- mixture

@dataclass
class RewardModel:
    """Reward tables for one snapshot: ``r_irl[s, a]``, ``r_tdil[s_next]``, ``r_l2[s, a]``."""

    cfg: RewardConfig
    r_irl: np.ndarray
    r_tdil: np.ndarray
    r_l2: np.ndarray | None = None

    def components(self, s, a, s_next):
        return self.r_irl[s, a], self.r_tdil[s_next]

    def reward(self, s, a, s_next) -> np.ndarray:
        if self.cfg.kind == "l2":
            return self.r_l2[s, a]
        irl, tdil = self.components(s, a, s_next)
        return self.cfg.beta * irl + (1.0 - self.cfg.beta) * tdil


def irl_table(cfg: RewardConfig, demo: ExpertDemo, env: DiscreteEnv, g: GailDiscriminator | None) -> np.ndarray:
    if cfg.irl_mode == "learned":
        if g is None:
            raise ValueError("learned IRL mode needs a GAIL discriminator")
        return g.reward_table()
    return irl_indicator_table(demo, env.n_states, env.n_actions)


def tdil_table_for(cfg: RewardConfig, demo: ExpertDemo, env: DiscreteEnv, d) -> np.ndarray:
    if cfg.tdil_backend == "oracle":
        return tdil_table(OracleDiscriminator(env), demo, env.n_states, cfg.normalize_tdil)
    if cfg.tdil_backend == "oracle_multistep":
        return multistep_table(env, demo, cfg.k_max, cfg.weights)
    return tdil_table(d, demo, env.n_states, cfg.normalize_tdil)


def r_agg(t: Transition, demo: ExpertDemo, d, g: GailDiscriminator | None, cfg: RewardConfig,
          env: DiscreteEnv | None = None) -> float:
    """beta * R_IRL(s, a) + (1 - beta) * R_TDIL(s_next)."""
    if cfg.irl_mode == "learned":
        irl = r_irl_learned(g, t.s, t.a)
    else:
        irl = r_irl_indicator(t.s, t.a, demo)
    if cfg.tdil_backend == "learned_target":
        tdil = r_tdil(t, demo, d, cfg.normalize_tdil)
    elif cfg.tdil_backend == "oracle":
        tdil = r_tdil(t, demo, OracleDiscriminator(env), cfg.normalize_tdil)
    else:
        tdil = r_tdil_multistep(t, demo, env, cfg.k_max, cfg.weights)
    return cfg.beta * irl + (1.0 - cfg.beta) * tdil


# --------------------------------------------------------------------------- relative return

def raw_return(next_state_ids, table: np.ndarray) -> float:
    return float(np.asarray(table)[np.asarray(next_state_ids, np.int64)].sum())


def relative_return(agent_traj: Trajectory, demo: ExpertDemo, d, cfg: RewardConfig | None = None) -> float:
    """Agent's summed R_TDIL over the expert's, both under the same discriminator snapshot."""
    normalize = cfg.normalize_tdil if cfg is not None else False
    agent = sum(r_tdil(t, demo, d, normalize) for t in agent_traj.transitions)
    expert = sum(r_tdil(t, demo, d, normalize) for t in demo.trajectory.transitions)
    if expert == 0.0:
        raise ZeroDivisionError("expert raw return is zero; the discriminator is degenerate")
    return agent / expert


# --------------------------------------------------------------------------- traces

TRACE_COLUMNS = ("step", "r_tdil", "r_irl", "r_agg", "gt_reward")


def export_reward_trace(path: str | Path, traj: Trajectory, model: RewardModel):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for k, t in enumerate(traj.transitions):
            irl, tdil = model.components(t.s.id, t.a.id, t.s_next.id)
            gt = 1.0 if t.terminal else 0.0
            w.writerow([k, repr(float(tdil)), repr(float(irl)),
                        repr(float(model.reward(t.s.id, t.a.id, t.s_next.id))), repr(gt)])
