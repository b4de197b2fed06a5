"""Command-line entry point: training, the reward comparison study, sweeps, reports and exports."""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .agent import SoftQAgent
from .env import GRID_ACTION_LABELS, GridWorld
from .rewards import irl_indicator_table, l2_table, tdil_table
from .trainer import (RunArtifact, TrainConfig, CheckpointRecord, blind_select, build_env, correlation_report,
                      discriminator_study, evaluate, oracle_select, run_training, save_run, selection_regret,
                      shortest_path_mean, steps_to_threshold)

BETA_SWEEP = ("0+BC", "0", "0.1", "0.2", "0.5", "0.8", "0.9", "0.95", "0.99", "1.0")
ALPHA_SWEEP = (0.5, 0.67, 0.9, 0.99)
ARROWS = {"Up": "^", "Down": "v", "Left": "<", "Right": ">"}

# config file sections; keys are flat TrainConfig field names
SECTIONS = {
    "env": ("env", "map_path", "route_path", "chain_length", "episode_cap"),
    "reward": ("reward_kind", "beta", "irl_mode", "l2_scale", "tdil_backend", "k_max", "multistep_weights",
               "normalize_tdil"),
    "discriminator": ("disc_backend", "alpha", "lam", "disc_lr", "disc_hidden", "n_positive", "n_contrastive",
                      "n_reversed", "use_reversed", "disc_updates_per_step", "always_train_disc", "gail_lr",
                      "gail_batch"),
    "agent": ("gamma", "ent_temp", "critic_lr", "actor_lr", "bc_lr", "bc_weight", "agent_batch", "expert_batch",
              "updates_per_step", "q_init"),
    "schedule": ("total_steps", "warmup_steps", "eval_interval", "eval_episodes", "buffer_capacity",
                 "holdout_every", "seed"),
}


class CliError(Exception):
    pass


# --------------------------------------------------------------------------- config files

def config_to_text(cfg: TrainConfig) -> str:
    parser = configparser.ConfigParser()
    values = cfg.to_dict()
    for section, keys in SECTIONS.items():
        parser[section] = {k: str(values[k]) for k in keys}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load_config(path: str | Path | None, overrides: dict | None = None) -> TrainConfig:
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {p}")
        parser = configparser.ConfigParser()
        try:
            parser.read_string(p.read_text())
        except configparser.Error as exc:
            raise CliError(f"cannot parse {p}: {exc}") from exc
        for section in parser.sections():
            if section not in SECTIONS:
                raise CliError(f"{p}: unknown section [{section}]")
            for key, value in parser[section].items():
                if key not in SECTIONS[section]:
                    raise CliError(f"{p}: unknown key '{key}' in [{section}]")
                values[key] = value
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        out["total_steps"] = args.steps
    if getattr(args, "map", None):
        out["map_path"] = str(args.map)
    if getattr(args, "route", None):
        out["route_path"] = str(args.route)
    return out


# --------------------------------------------------------------------------- text panels

def policy_panel(agent: SoftQAgent, env: GridWorld) -> str:
    """Greedy action per cell as arrow glyphs, top row first; the goal is drawn as G."""
    greedy = agent.greedy_actions()
    lines = []
    for y in range(env.height - 1, -1, -1):
        row = []
        for x in range(env.width):
            sid = env.cell_id(x, y)
            row.append("G" if sid == env.goal_id else ARROWS[GRID_ACTION_LABELS[greedy[sid]]])
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def heatmap_grid(values: np.ndarray, env: GridWorld) -> str:
    """One number per cell, top row first, whitespace separated."""
    grid = np.asarray(values, float).reshape(env.height, env.width)[::-1]
    return "\n".join(" ".join(f"{v:.6f}" for v in row) for row in grid) + "\n"


def train_bc_only(env, demo, steps: int, cfg: TrainConfig) -> SoftQAgent:
    agent = SoftQAgent(env.n_states, env.n_actions, cfg.gamma, cfg.ent_temp, cfg.critic_lr, cfg.actor_lr,
                       cfg.bc_lr, max(cfg.bc_weight, 1e-9), cfg.seed)
    for _ in range(steps):
        agent.bc_update(demo)
    return agent


# --------------------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    if args.print_config:
        sys.stdout.write(config_to_text(cfg))
        return 0
    art = run_training(cfg)
    out = save_run(art, args.out or f"runs/seed{cfg.seed}", sys.argv)
    last = art.registry[-1]
    print(f"run written to {out}: {len(art.registry)} checkpoints, final steps/episode "
          f"{last.steps_per_episode:.2f}, success {last.success_rate:.3f}")
    return 0


def _curve_rows(arts: list[RunArtifact]) -> list[tuple[int, float]]:
    steps = [r.env_steps for r in arts[0].registry]
    med = np.median([[r.steps_per_episode for r in a.registry] for a in arts], axis=0)
    return list(zip(steps, med.tolist()))


def cmd_compare_rewards(args) -> int:
    base = load_config(args.config, _overrides(args))
    if base.env != "grid":
        raise CliError("compare-rewards needs a grid-world map")
    seeds = _seeds(args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variants = {"irl": dict(beta=1.0, reward_kind="agg"), "l2": dict(reward_kind="l2"),
                "tdil": dict(beta=0.0, reward_kind="agg")}
    runs: dict[str, list[RunArtifact]] = {}
    for name, kw in variants.items():
        runs[name] = [run_training(base.replace(seed=s, **kw)) for s in seeds]
        with open(out / f"curve-{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["env_steps", "steps_per_episode"])
            for step, value in _curve_rows(runs[name]):
                w.writerow([step, repr(value)])
    env, demo = runs["tdil"][0].env, runs["tdil"][0].demo
    heat = {"irl": irl_indicator_table(demo, env.n_states, env.n_actions).max(axis=1),
            "l2": l2_table(env, demo, base.l2_scale).max(axis=1),
            "tdil": tdil_table(runs["tdil"][0].disc, demo, env.n_states)}
    for name, values in heat.items():
        (out / f"heatmap-{name}.txt").write_text(heatmap_grid(values, env))
    panels = {"bc": train_bc_only(env, demo, 200, base)}
    panels.update({name: runs[name][0].agent for name in variants})
    for name, agent in panels.items():
        (out / f"policy-{name}.txt").write_text(policy_panel(agent, env))
    threshold = 1.25 * shortest_path_mean(env)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["reward", "seed", "steps_to_threshold", "final_steps_per_episode", "final_success_rate"])
        for name, arts in runs.items():
            for seed, art in zip(seeds, arts):
                hit = steps_to_threshold(art.registry, threshold)
                w.writerow([name, seed, "" if hit is None else hit, repr(art.registry[-1].steps_per_episode),
                            repr(art.registry[-1].success_rate)])
    print(f"comparison written to {out} (threshold {threshold:.3f} steps/episode)")
    return 0


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise CliError(f"bad seed list {text!r}") from exc


def cmd_sweep_beta(args) -> int:
    base = load_config(args.config, _overrides(args))
    seeds = _seeds(args.seeds)
    out = Path(args.out) if args.out else None
    rows = []
    for label in BETA_SWEEP:
        beta = float(label.split("+")[0])
        kw = dict(beta=beta, reward_kind="agg")
        if label != "0+BC":
            kw["bc_weight"] = 0.0
        arts = [run_training(base.replace(seed=s, **kw)) for s in seeds]
        threshold = 1.25 * shortest_path_mean(arts[0].env)
        hits = [steps_to_threshold(a.registry, threshold) for a in arts]
        finals = [a.registry[-1] for a in arts]
        rows.append({"beta": label, "bc": label == "0+BC",
                     "median_steps_to_threshold": _median_or_blank(hits),
                     "final_steps_per_episode": float(np.median([f.steps_per_episode for f in finals])),
                     "final_success_rate": float(np.median([f.success_rate for f in finals]))})
    _emit(rows, out / "sweep-beta.csv" if out else None)
    return 0


def _median_or_blank(hits):
    # runs that never reach the bar count as infinitely slow
    vals = [np.inf if h is None else h for h in hits]
    m = float(np.median(vals))
    return "" if not np.isfinite(m) else m


def cmd_sweep_alpha(args) -> int:
    base = load_config(args.config, _overrides(args))
    seeds = _seeds(args.seeds)
    rows = []
    for alpha in ALPHA_SWEEP:
        for env_name in ("grid", "chain"):
            cfg = base.replace(alpha=alpha, env=env_name)
            env, _ = build_env(cfg)
            studies = [discriminator_study(env, cfg, args.disc_steps, seed=s) for s in seeds]
            rows.append({"alpha": alpha, "env": env_name, **_acc_medians(studies)})
    _emit(rows, Path(args.out) / "sweep-alpha.csv" if args.out else None)
    return 0


def _acc_medians(studies) -> dict:
    med = lambda xs: float(np.nanmedian(xs)) if not np.all(np.isnan(xs)) else float("nan")  # noqa: E731
    return {"acc_positive": med([s.report.acc_positive for s in studies]),
            "acc_contrastive": med([s.report.acc_contrastive for s in studies]),
            "acc_reversed": med([s.report.acc_reversed for s in studies]),
            "oracle_agreement": med([s.agreement for s in studies]),
            "contrastive_noise": med([s.noise_rate for s in studies])}


def cmd_disc_report(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    seeds = _seeds(args.seeds)
    rows = []
    for env_name in ("grid", "chain") if args.env == "both" else (args.env,):
        c = cfg.replace(env=env_name)
        env, _ = build_env(c)
        studies = [discriminator_study(env, c, args.disc_steps, seed=s) for s in seeds]
        rows.append({"env": env_name, "alpha": c.alpha, **_acc_medians(studies)})
    _emit(rows, Path(args.out) / "disc-report.csv" if args.out else None)
    return 0


def _load_registry(run_dir: Path) -> list[CheckpointRecord]:
    path = run_dir / "registry.jsonl"
    if not path.exists():
        raise CliError(f"no registry.jsonl in {run_dir}")
    return [CheckpointRecord(**json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


def cmd_blind_select(args) -> int:
    registry = _load_registry(Path(args.run))
    pick, best = blind_select(registry), oracle_select(registry)
    print(f"blind pick: env_steps={pick.env_steps} relative_return={pick.relative_return:.4f} "
          f"gt_return={pick.gt_return:.4f}")
    print(f"oracle pick: env_steps={best.env_steps} gt_return={best.gt_return:.4f}")
    print(f"regret: {selection_regret(registry):+.4f}")
    if len(registry) >= 3:
        rep = correlation_report(registry)
        print(f"spearman rho: {rep.rho:.4f}{' (degenerate)' if rep.degenerate else ''}")
    return 0


def cmd_export(args) -> int:
    run_dir = Path(args.run)
    registry = _load_registry(run_dir)
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.exists():
        raise CliError(f"no metrics.csv in {run_dir}")
    with open(metrics_path, newline="") as fh:
        metrics = list(csv.DictReader(fh))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "json":
        manifest = json.loads((run_dir / "manifest.json").read_text()) if (run_dir / "manifest.json").exists() else {}
        out.write_text(json.dumps({"manifest": manifest, "registry": [asdict(r) for r in registry],
                                   "metrics": metrics}, indent=2) + "\n")
    else:
        names = [f.name for f in fields(CheckpointRecord)]
        with open(out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=names)
            w.writeheader()
            for r in registry:
                w.writerow(asdict(r))
    print(f"exported {len(registry)} checkpoints to {out}")
    return 0


def _emit(rows: list[dict], path: Path | None):
    if not rows:
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)
    sys.stdout.write(buf.getvalue())
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue())


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdil", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds: bool = False):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--steps", type=int, help="override total env steps")
        p.add_argument("--map", help="grid map file")
        p.add_argument("--route", help="expert route file for --map")
        p.add_argument("--out", help="output directory")
        if seeds:
            p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
        else:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="one training run from a config file")
    common(p)
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare-rewards", help="indicator IRL vs L2 vs TDIL on one map")
    common(p, seeds=True)
    p.set_defaults(func=cmd_compare_rewards)

    p = sub.add_parser("sweep-beta", help="mixture weight sweep")
    common(p, seeds=True)
    p.set_defaults(func=cmd_sweep_beta)

    for name, func in (("sweep-alpha", cmd_sweep_alpha), ("disc-report", cmd_disc_report)):
        p = sub.add_parser(name, help="discriminator accuracy " + ("per alpha" if name == "sweep-alpha" else "table"))
        common(p, seeds=True)
        p.add_argument("--disc-steps", type=int, default=20_000)
        if name == "disc-report":
            p.add_argument("--env", choices=("grid", "chain", "both"), default="both")
        p.set_defaults(func=func)

    p = sub.add_parser("blind-select", help="checkpoint chosen by relative return, and its regret")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.set_defaults(func=cmd_blind_select)

    p = sub.add_parser("export", help="bundle a run's registry and metrics")
    p.add_argument("--run", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
