"""Training loop, greedy evaluation, checkpoint registry and blind model selection."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .agent import GREEDY, SAMPLE, SoftQAgent
from .discriminator import (EPS, OracleDiscriminator, TabularDiscriminator, TransitionDiscriminator,
                            evaluate_accuracy)
from .env import (ChainEnv, DiscreteEnv, ExpertDemo, GridWorld, Trajectory, bfs_distances, chain_demo,
                  default_demo, default_grid, load_grid, make_expert_demo, parse_route)
from .replay import ReplayBuffer, build_negative_batch, build_positive_batch
from .rewards import (GailDiscriminator, RewardConfig, RewardModel, gail_train_step, irl_table, l2_table,
                      tdil_table_for)

METRIC_COLUMNS = ("env_steps", "td_loss", "disc_loss", "bc_loss", "raw_return", "relative_return",
                  "gt_return", "steps_per_episode", "success_rate", "acc_positive", "acc_contrastive",
                  "acc_reversed")


@dataclass
class TrainConfig:
    # environment
    env: str = "grid"
    map_path: str = ""
    route_path: str = ""
    chain_length: int = 10
    episode_cap: int = 50
    # reward
    reward_kind: str = "agg"
    beta: float = 0.0
    irl_mode: str = "indicator"
    l2_scale: float = 1.0
    tdil_backend: str = "learned_target"
    k_max: int = 1
    multistep_weights: str = "1"
    normalize_tdil: bool = False
    # discriminators
    disc_backend: str = "mlp"
    alpha: float = 0.99
    lam: float = 1e-4
    disc_lr: float = 1e-3
    disc_hidden: int = 64
    n_positive: int = 64
    n_contrastive: int = 32
    n_reversed: int = 32
    use_reversed: bool = True
    disc_updates_per_step: int = 1
    always_train_disc: bool = True  # train D even when the reward ignores it, for reporting
    gail_lr: float = 1e-3
    gail_batch: int = 32
    # agent
    gamma: float = 0.8
    ent_temp: float = 0.05
    critic_lr: float = 0.5
    actor_lr: float = 0.3
    bc_lr: float = 0.5
    bc_weight: float = 1.0
    agent_batch: int = 32
    expert_batch: int = 8
    updates_per_step: int = 1
    q_init: float = -1.0  # negative = optimistic bound r_max / (1 - gamma)
    # schedule
    total_steps: int = 20_000
    warmup_steps: int = 200
    eval_interval: int = 500
    eval_episodes: int = 0  # 0 = one greedy episode from every start-support state
    buffer_capacity: int = 100_000
    holdout_every: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.env not in ("grid", "chain"):
            raise ValueError(f"env must be 'grid' or 'chain', got {self.env!r}")
        if self.disc_backend not in ("mlp", "table", "oracle"):
            raise ValueError(f"unknown disc_backend {self.disc_backend!r}")
        for name in ("lam",):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("disc_lr", "gail_lr", "critic_lr", "actor_lr", "bc_lr", "ent_temp", "eval_interval",
                     "episode_cap", "buffer_capacity", "agent_batch", "n_positive"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.env == "grid" and self.episode_cap != 50:
            raise ValueError("the grid-world episode cap is fixed at 50 steps")
        self.reward_config()  # validates beta, modes and weights

    def reward_config(self) -> RewardConfig:
        weights = tuple(float(w) for w in str(self.multistep_weights).split(",") if w.strip())
        return RewardConfig(self.beta, self.irl_mode, self.l2_scale, self.tdil_backend, self.k_max, weights,
                            self.normalize_tdil, self.reward_kind)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        out = {}
        for k, v in values.items():
            default = known[k].default
            if isinstance(v, str) and not isinstance(default, str):
                if isinstance(default, bool):
                    if v.strip().lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(f"{k}: expected a boolean, got {v!r}")
                    v = v.strip().lower() in ("true", "1", "yes")
                elif isinstance(default, int):
                    v = int(v)
                else:
                    v = float(v)
            out[k] = v
        return cls(**out)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})


@dataclass
class CheckpointRecord:
    env_steps: int
    agent_id: str
    disc_id: str
    raw_return: float
    relative_return: float
    gt_return: float
    steps_per_episode: float
    success_rate: float


@dataclass
class EvalResult:
    gt_return: float
    steps_per_episode: float
    success_rate: float
    trajectories: list[Trajectory] = field(repr=False, default_factory=list)


@dataclass
class RunArtifact:
    cfg: TrainConfig
    env: DiscreteEnv
    demo: ExpertDemo
    agent: SoftQAgent
    disc: object
    gail: GailDiscriminator | None
    buffer: ReplayBuffer
    registry: list[CheckpointRecord]
    metrics: list[dict]
    snapshots: dict[str, SoftQAgent] = field(repr=False, default_factory=dict)


# --------------------------------------------------------------------------- setup

def build_env(cfg: TrainConfig) -> tuple[DiscreteEnv, ExpertDemo]:
    if cfg.env == "chain":
        env = ChainEnv(cfg.chain_length, episode_cap=cfg.episode_cap)
        return env, chain_demo(env)
    env = load_grid(cfg.map_path) if cfg.map_path else default_grid()
    if cfg.route_path:
        s0, route = parse_route(Path(cfg.route_path).read_text(), env)
        return env, make_expert_demo(env, route, s0)
    if cfg.map_path:
        raise ValueError("a custom map needs a route_path for its expert demo")
    return env, default_demo(env)


def build_discriminator(cfg: TrainConfig, env: DiscreteEnv, seed: int):
    if cfg.disc_backend == "table":
        return TabularDiscriminator(env.n_states, cfg.alpha, cfg.lam)
    if cfg.disc_backend == "oracle":
        return OracleDiscriminator(env)
    return TransitionDiscriminator(env.features, (cfg.disc_hidden, cfg.disc_hidden), cfg.alpha, cfg.lam,
                                   cfg.disc_lr, seed)


def initial_q(cfg: TrainConfig, rcfg: RewardConfig, demo: ExpertDemo) -> float:
    """Optimistic start: the largest per-step reward the configured reward can pay, over (1 - gamma)."""
    if cfg.q_init >= 0:
        return cfg.q_init
    if rcfg.kind == "l2":
        r_max = 1.0
    else:
        irl_max = 1.0 if rcfg.irl_mode == "indicator" else float(-np.log(EPS))
        tdil_max = 1.0 if rcfg.normalize_tdil else float(len(demo.unique_state_ids))
        if rcfg.tdil_backend == "oracle_multistep":
            tdil_max *= float(np.sum(rcfg.weights))
        r_max = rcfg.beta * irl_max + (1.0 - rcfg.beta) * tdil_max
    return r_max / (1.0 - cfg.gamma)


def shortest_path_mean(env: DiscreteEnv) -> float:
    """Mean BFS distance to the goal over the start support."""
    return float(bfs_distances(env, [env.goal_id])[env.start_support].mean())


# --------------------------------------------------------------------------- evaluation

def rollout(agent: SoftQAgent, env: DiscreteEnv, s0: int, cap: int, mode: str = GREEDY) -> Trajectory:
    transitions, s = [], s0
    for _ in range(cap):
        t = env.transition(s, agent.act(s, mode))
        transitions.append(t)
        if t.terminal:
            break
        s = t.s_next.id
    return Trajectory(transitions, float(sum(t.terminal for t in transitions)))


def evaluate(agent: SoftQAgent, env: DiscreteEnv, n_episodes: int = 0, cap: int | None = None,
             rng: np.random.Generator | None = None, starts=None, mode: str = GREEDY) -> EvalResult:
    """Roll out the policy; ``n_episodes=0`` runs one episode from every start-support state.

    Episodes that never reach the goal count ``cap`` steps and a failure.
    """
    cap = cap or env.episode_cap
    if starts is None:
        if n_episodes == 0:
            starts = env.start_support
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            starts = [env.sample_start(rng) for _ in range(n_episodes)]
    starts = [int(s) for s in starts]
    if not starts:
        raise ValueError("evaluate needs at least one episode")
    trajs = [rollout(agent, env, s, cap, mode) for s in starts]
    gt = np.array([t.total_gt_return for t in trajs])
    steps = np.array([len(t) if t.total_gt_return > 0 else cap for t in trajs])
    return EvalResult(float(gt.mean()), float(steps.mean()), float((gt > 0).mean()), trajs)


def _agent_id(agent: SoftQAgent) -> str:
    return hashlib.sha256(agent.q.tobytes() + agent.logits.tobytes()).hexdigest()[:16]


def _disc_id(d) -> str:
    if isinstance(d, TransitionDiscriminator):
        return hashlib.sha256(d.to_bytes()).hexdigest()[:16]
    if isinstance(d, TabularDiscriminator):
        return hashlib.sha256(d.target_logits.tobytes()).hexdigest()[:16]
    return "oracle"


# --------------------------------------------------------------------------- training

def run_training(cfg: TrainConfig, observe=None) -> RunArtifact:
    """Interact, store, update D, soft-update the target, compute rewards with the target, update the agent, BC.

    ``observe(iteration, artifact)``, when given, is called after every iteration.
    """
    env, demo = build_env(cfg)
    rcfg = cfg.reward_config()
    seeds = np.random.SeedSequence(cfg.seed).generate_state(6)
    env_rng = np.random.default_rng(seeds[0])
    batch_rng = np.random.default_rng(seeds[1])
    agent = SoftQAgent(env.n_states, env.n_actions, cfg.gamma, cfg.ent_temp, cfg.critic_lr, cfg.actor_lr,
                       cfg.bc_lr, cfg.bc_weight, seed=int(seeds[2]), q_init=initial_q(cfg, rcfg, demo))
    buffer = ReplayBuffer(cfg.buffer_capacity, int(seeds[3]), cfg.holdout_every)
    disc = build_discriminator(cfg, env, int(seeds[4]))
    gail = (GailDiscriminator(env.features, env.n_actions, (cfg.disc_hidden, cfg.disc_hidden), cfg.gail_lr,
                              int(seeds[5])) if rcfg.irl_mode == "learned" else None)
    art = RunArtifact(cfg, env, demo, agent, disc, gail, buffer, [], [])

    static_irl = irl_table(rcfg, demo, env, None) if rcfg.irl_mode == "indicator" else None
    static_tdil = tdil_table_for(rcfg, demo, env, disc) if rcfg.tdil_backend != "learned_target" else None
    r_l2 = l2_table(env, demo, cfg.l2_scale) if rcfg.kind == "l2" else None
    need_disc = rcfg.kind == "agg" and rcfg.beta < 1.0 and rcfg.tdil_backend == "learned_target"
    train_disc = cfg.disc_backend != "oracle" and (need_disc or cfg.always_train_disc)
    demo_s, demo_a, demo_n = demo.state_ids, demo.action_ids, demo.next_state_ids
    demo_term = np.array([t.terminal for t in demo.trajectory.transitions])

    losses = {"td_loss": [], "disc_loss": [], "bc_loss": []}

    experts = demo.unique_state_ids
    zero_tdil = np.zeros(env.n_states)

    def reward_model(next_states: np.ndarray) -> RewardModel:
        """Reward tables from this iteration's target snapshot, filled in only where the batch needs them."""
        irl = static_irl if static_irl is not None else gail.reward_table()
        if static_tdil is not None:
            tdil = static_tdil
        elif need_disc:
            rows = np.unique(next_states)
            tdil = np.zeros(env.n_states)
            tdil[rows] = disc.predict_matrix(rows, experts, use_target=True).sum(axis=1)
            if rcfg.normalize_tdil:
                tdil /= len(experts)
        else:
            tdil = zero_tdil
        return RewardModel(rcfg, irl, tdil, r_l2)

    def checkpoint(env_steps: int):
        record_checkpoint(art, env_steps, losses)
        for v in losses.values():
            v.clear()

    checkpoint(0)
    s, ep_t = env.sample_start(env_rng), 0
    for it in range(cfg.total_steps):
        try:
            a = agent.act(s, SAMPLE)
            s_next, done, _gt = env.step_id(s, a)  # ground truth is never used below
            buffer.push_ids(s, a, s_next, done)
            ep_t += 1

            if len(buffer) >= cfg.warmup_steps:
                if train_disc:
                    for _ in range(cfg.disc_updates_per_step):
                        pos = build_positive_batch(buffer, cfg.n_positive)
                        neg = build_negative_batch(buffer, cfg.n_contrastive, cfg.n_reversed, cfg.use_reversed)
                        losses["disc_loss"].append(disc.train_step(pos, neg))
                if gail is not None:
                    e = batch_rng.integers(len(demo_s), size=cfg.gail_batch)
                    ab = buffer.sample(cfg.gail_batch)
                    gail_train_step(gail, (demo_s[e], demo_a[e]), (ab.s, ab.a))

                for _ in range(cfg.updates_per_step):
                    ab = buffer.sample(cfg.agent_batch)
                    e = batch_rng.integers(len(demo_s), size=cfg.expert_batch)
                    bs = np.concatenate([ab.s, demo_s[e]])
                    ba = np.concatenate([ab.a, demo_a[e]])
                    bn = np.concatenate([ab.s_next, demo_n[e]])
                    bt = np.concatenate([ab.terminal, demo_term[e]])
                    model = reward_model(bn)
                    losses["td_loss"].append(agent.critic_update(bs, ba, model.reward(bs, ba, bn), bn, bt))
                    agent.actor_update(bs)
                losses["bc_loss"].append(agent.bc_update(demo))
        except Exception as exc:
            raise RuntimeError(f"training aborted at iteration {it}: {exc}") from exc

        s = s_next
        if done or ep_t >= env.episode_cap:
            s, ep_t = env.sample_start(env_rng), 0
        if (it + 1) % cfg.eval_interval == 0:
            checkpoint(it + 1)
        if observe is not None:
            observe(it, art)
    return art


def record_checkpoint(art: RunArtifact, env_steps: int, losses: dict | None = None) -> CheckpointRecord:
    cfg, env, demo, agent, disc = art.cfg, art.env, art.demo, art.agent, art.disc
    result = evaluate(agent, env, cfg.eval_episodes, env.episode_cap,
                      rng=np.random.default_rng([cfg.seed, env_steps]))
    # raw and relative returns always use the discriminator's target snapshot
    table = tdil_table_for(RewardConfig(normalize_tdil=cfg.normalize_tdil,
                                        tdil_backend="oracle" if cfg.disc_backend == "oracle" else "learned_target"),
                           demo, env, disc)
    raw = float(np.mean([table[t.next_state_ids()].sum() for t in result.trajectories]))
    expert_raw = float(table[demo.next_state_ids].sum())
    if expert_raw == 0.0:
        raise ZeroDivisionError("expert raw return is zero; the discriminator is degenerate")
    rec = CheckpointRecord(env_steps, _agent_id(agent), _disc_id(disc), raw, raw / expert_raw,
                           result.gt_return, result.steps_per_episode, result.success_rate)
    art.registry.append(rec)
    art.snapshots[rec.agent_id] = agent.snapshot()

    acc = {"acc_positive": math.nan, "acc_contrastive": math.nan, "acc_reversed": math.nan}
    if art.buffer.heldout is not None and len(art.buffer.heldout):
        acc = evaluate_accuracy(disc, env, art.buffer.heldout, seed=cfg.seed).as_row()
    mean = lambda xs: float(np.mean(xs)) if xs else math.nan  # noqa: E731
    losses = losses or {}
    art.metrics.append({"env_steps": env_steps, "td_loss": mean(losses.get("td_loss", [])),
                        "disc_loss": mean(losses.get("disc_loss", [])), "bc_loss": mean(losses.get("bc_loss", [])),
                        "raw_return": raw, "relative_return": rec.relative_return, "gt_return": rec.gt_return,
                        "steps_per_episode": rec.steps_per_episode, "success_rate": rec.success_rate, **acc})
    return rec


# --------------------------------------------------------------------------- selection and reports

def blind_select(registry: list[CheckpointRecord]) -> CheckpointRecord:
    """Highest relative return; ties go to the later checkpoint."""
    if not registry:
        raise ValueError("blind_select needs a nonempty registry")
    return max(registry, key=lambda r: (r.relative_return, r.env_steps))


def oracle_select(registry: list[CheckpointRecord]) -> CheckpointRecord:
    if not registry:
        raise ValueError("oracle_select needs a nonempty registry")
    return max(registry, key=lambda r: (r.gt_return, r.env_steps))


def selection_regret(registry: list[CheckpointRecord]) -> float:
    """(gt(blind) - gt(oracle)) / gt(oracle); 0 when the oracle's gt return is 0."""
    best = oracle_select(registry).gt_return
    return 0.0 if best == 0 else (blind_select(registry).gt_return - best) / best


@dataclass
class CorrelationReport:
    rho: float
    n: int
    degenerate: bool


def spearman(x, y) -> CorrelationReport:
    """Spearman rank correlation with average ranks for ties; a constant series gives rho 0 and a flag."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) != len(y):
        raise ValueError("series lengths differ")
    if len(x) < 3:
        raise ValueError("need at least 3 checkpoints")
    rx, ry = rankdata(x), rankdata(y)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        return CorrelationReport(0.0, len(x), True)
    rho = float(np.corrcoef(rx, ry)[0, 1])
    return CorrelationReport(rho, len(x), False)


def correlation_report(registry: list[CheckpointRecord]) -> CorrelationReport:
    return spearman([r.relative_return for r in registry], [r.gt_return for r in registry])


def steps_to_threshold(registry: list[CheckpointRecord], threshold: float) -> int | None:
    """First env_steps at which mean steps-per-episode drops below ``threshold``."""
    for r in registry:
        if r.steps_per_episode < threshold:
            return r.env_steps
    return None


# --------------------------------------------------------------------------- files

def write_metrics_csv(path: str | Path, metrics: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in metrics:
            w.writerow({k: repr(float(row[k])) if k != "env_steps" else int(row[k]) for k in METRIC_COLUMNS})


def save_run(art: RunArtifact, out_dir: str | Path, command: list[str] | None = None) -> Path:
    """Write metrics.csv, snapshot files named by content hash, and a line-delimited registry manifest."""
    out = Path(out_dir)
    snaps = out / "snapshots"
    snaps.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", art.metrics)
    for rec in art.registry:
        agent = art.snapshots[rec.agent_id]
        np.savez(snaps / f"agent-{rec.agent_id}.npz", q=agent.q, logits=agent.logits)
    if isinstance(art.disc, TransitionDiscriminator):
        art.disc.save(snaps / f"disc-{_disc_id(art.disc)}.bin")
    with open(out / "registry.jsonl", "w") as fh:
        for rec in art.registry:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
    manifest = {"config": art.cfg.to_dict(), "seeds": [art.cfg.seed], "command": command or [],
                "inputs": {"map": art.env.map_hash(), "demo": demo_hash(art.demo)},
                "evaluation": "greedy", "output_dir": str(out)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def demo_hash(demo: ExpertDemo) -> str:
    body = np.stack([demo.state_ids, demo.action_ids, demo.next_state_ids]).astype("<i8").tobytes()
    return hashlib.sha256(body).hexdigest()


# --------------------------------------------------------------------------- discriminator study

@dataclass
class DiscStudy:
    disc: object
    buffer: ReplayBuffer
    report: object
    agreement: float
    noise_rate: float


def collect_random(env: DiscreteEnv, n_transitions: int, seed: int, holdout_every: int = 20,
                   capacity: int = 100_000) -> ReplayBuffer:
    """Uniform-random actions from the start distribution, episodes capped as in training."""
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(capacity, seed, holdout_every)
    s, t = env.sample_start(rng), 0
    for _ in range(n_transitions):
        a = int(rng.integers(env.n_actions))
        s_next, done, _ = env.step_id(s, a)
        buf.push_ids(s, a, s_next, done)
        s, t = s_next, t + 1
        if done or t >= env.episode_cap:
            s, t = env.sample_start(rng), 0
    return buf


def discriminator_study(env: DiscreteEnv, cfg: TrainConfig, steps: int = 20_000, n_transitions: int = 20_000,
                        seed: int | None = None) -> DiscStudy:
    """Train a discriminator on exploration data and score it on the held-out split and against the oracle."""
    from .discriminator import contrastive_noise_rate, oracle_agreement

    seed = cfg.seed if seed is None else seed
    buf = collect_random(env, n_transitions, seed, cfg.holdout_every, cfg.buffer_capacity)
    d = build_discriminator(cfg, env, seed)
    for _ in range(steps):
        d.train_step(build_positive_batch(buf, cfg.n_positive),
                     build_negative_batch(buf, cfg.n_contrastive, cfg.n_reversed, cfg.use_reversed))
    report = evaluate_accuracy(d, env, buf.heldout, seed=seed)
    return DiscStudy(d, buf, report, oracle_agreement(d, env), contrastive_noise_rate(buf, env, seed=seed))
