"""Deterministic discrete MDPs: the barrier grid-world and the highway chain.

Both environments are immutable once built. Dynamics live in a precomputed
``next_table[s, a]`` so that stepping, reachability checks and batch lookups
are plain array indexing.
"""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GRID_EPISODE_CAP = 50

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
GRID_ACTION_LABELS = ("Up", "Down", "Left", "Right")
GRID_MOVES = {UP: (0, 1), DOWN: (0, -1), LEFT: (-1, 0), RIGHT: (1, 0)}

ADVANCE, BRAKE = 0, 1
CHAIN_ACTION_LABELS = ("Advance", "Brake")


class MapParseError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ConnectivityError(ValueError):
    def __init__(self, cell: tuple[int, int]):
        super().__init__(f"cell {cell} cannot reach the goal")
        self.cell = cell


class RouteError(ValueError):
    pass


class ChainViolation(ValueError):
    pass


@dataclass(frozen=True)
class State:
    id: int
    features: tuple[float, ...] = field(compare=False)


@dataclass(frozen=True)
class Action:
    id: int
    label: str = field(compare=False)


@dataclass(frozen=True)
class Transition:
    s: State
    a: Action
    s_next: State
    terminal: bool


@dataclass
class Trajectory:
    transitions: list[Transition]
    total_gt_return: float = 0.0

    def __post_init__(self):
        for k in range(len(self.transitions) - 1):
            if self.transitions[k].s_next.id != self.transitions[k + 1].s.id:
                raise ChainViolation(
                    f"step {k} ends in state {self.transitions[k].s_next.id} "
                    f"but step {k + 1} starts in {self.transitions[k + 1].s.id}"
                )

    def __len__(self) -> int:
        return len(self.transitions)

    def state_ids(self) -> np.ndarray:
        return np.array([t.s.id for t in self.transitions], dtype=np.int64)

    def action_ids(self) -> np.ndarray:
        return np.array([t.a.id for t in self.transitions], dtype=np.int64)

    def next_state_ids(self) -> np.ndarray:
        return np.array([t.s_next.id for t in self.transitions], dtype=np.int64)


@dataclass
class ExpertDemo:
    trajectory: Trajectory
    expert_states: list[State]
    expert_pairs: frozenset[tuple[int, int]]

    @classmethod
    def from_trajectory(cls, trajectory: Trajectory) -> "ExpertDemo":
        if not trajectory.transitions:
            raise RouteError("an expert demonstration needs at least one transition")
        states = [t.s for t in trajectory.transitions] + [trajectory.transitions[-1].s_next]
        pairs = frozenset((t.s.id, t.a.id) for t in trajectory.transitions)
        return cls(trajectory, states, pairs)

    @property
    def unique_state_ids(self) -> np.ndarray:
        """Expert state ids, deduplicated, in first-visit order."""
        return np.array(list(dict.fromkeys(s.id for s in self.expert_states)), dtype=np.int64)

    @property
    def state_ids(self) -> np.ndarray:
        return self.trajectory.state_ids()

    @property
    def action_ids(self) -> np.ndarray:
        return self.trajectory.action_ids()

    @property
    def next_state_ids(self) -> np.ndarray:
        return self.trajectory.next_state_ids()

    def __len__(self) -> int:
        return len(self.trajectory)


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    barriers: frozenset[frozenset[tuple[int, int]]]
    goal: tuple[int, int]
    start: tuple[int, int] | None = None  # None means uniform over free cells

    def blocked(self, a: tuple[int, int], b: tuple[int, int]) -> bool:
        return frozenset((a, b)) in self.barriers

    def in_bounds(self, cell: tuple[int, int]) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height


class DiscreteEnv:
    """Shared machinery for table-driven deterministic environments."""

    name: str
    n_states: int
    n_actions: int
    action_labels: tuple[str, ...]
    next_table: np.ndarray
    features: np.ndarray
    goal_id: int
    episode_cap: int
    start_support: np.ndarray

    def _finalize(self):
        self.next_table.setflags(write=False)
        self.features.setflags(write=False)
        self._states = [State(i, tuple(float(v) for v in self.features[i])) for i in range(self.n_states)]
        self._actions = [Action(i, lab) for i, lab in enumerate(self.action_labels)]
        # support[s, s'] is the exact one-step reachability indicator
        support = np.zeros((self.n_states, self.n_states), dtype=bool)
        rows = np.repeat(np.arange(self.n_states), self.n_actions)
        support[rows, self.next_table.ravel()] = True
        support.setflags(write=False)
        self.support = support

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def state(self, sid: int) -> State:
        self._check_state(sid)
        return self._states[sid]

    def action(self, aid: int) -> Action:
        self._check_action(aid)
        return self._actions[aid]

    def _check_state(self, sid: int):
        if not 0 <= int(sid) < self.n_states:
            raise ValueError(f"state id {sid} out of range [0, {self.n_states})")

    def _check_action(self, aid: int):
        if not 0 <= int(aid) < self.n_actions:
            raise ValueError(f"action id {aid} out of range [0, {self.n_actions})")

    def step_id(self, s: int, a: int) -> tuple[int, bool, float]:
        s_next = int(self.next_table[s, a])
        done = s_next == self.goal_id
        return s_next, done, 1.0 if done else 0.0

    def sample_start(self, rng: np.random.Generator) -> int:
        return int(self.start_support[rng.integers(len(self.start_support))])

    def map_hash(self) -> str:
        raise NotImplementedError

    def transition(self, s: int, a: int) -> Transition:
        s_next, done, _ = self.step_id(s, a)
        return Transition(self._states[s], self._actions[a], self._states[s_next], done)


class GridWorld(DiscreteEnv):
    """4-connected grid with bump-stay barriers; state id = y * width + x, y=0 is the bottom row."""

    name = "grid"
    action_labels = GRID_ACTION_LABELS
    n_actions = 4

    def __init__(self, spec: GridSpec, source_text: str | None = None, episode_cap: int = GRID_EPISODE_CAP):
        self.spec = spec
        self.width, self.height = spec.width, spec.height
        self.n_states = spec.width * spec.height
        self.episode_cap = episode_cap
        self._source_text = source_text if source_text is not None else dump_map(spec)
        self.goal_id = self.cell_id(*spec.goal)

        nxt = np.empty((self.n_states, 4), dtype=np.int64)
        feats = np.empty((self.n_states, 2), dtype=np.float64)
        for sid in range(self.n_states):
            cell = self.cell(sid)
            feats[sid] = (cell[0] / max(self.width - 1, 1), cell[1] / max(self.height - 1, 1))
            for a, (dx, dy) in GRID_MOVES.items():
                target = (cell[0] + dx, cell[1] + dy)
                if spec.in_bounds(target) and not spec.blocked(cell, target):
                    nxt[sid, a] = self.cell_id(*target)
                else:
                    nxt[sid, a] = sid
        self.next_table = nxt
        self.features = feats
        if spec.start is None:
            self.start_support = np.array([i for i in range(self.n_states) if i != self.goal_id], dtype=np.int64)
        else:
            self.start_support = np.array([self.cell_id(*spec.start)], dtype=np.int64)
        self._finalize()

    def cell_id(self, x: int, y: int) -> int:
        return y * self.width + x

    def cell(self, sid: int) -> tuple[int, int]:
        return sid % self.width, sid // self.width

    def map_hash(self) -> str:
        return hashlib.sha256(self._source_text.encode()).hexdigest()

    @property
    def bottom_left(self) -> int:
        return self.cell_id(0, 0)


class ChainEnv(DiscreteEnv):
    """Highway chain: Advance moves one position forward, Brake holds position.

    Nothing ever moves backward, so reversed transitions (p+1, p) are invalid.
    The last position is the goal; Advance there stays put.
    """

    name = "chain"
    action_labels = CHAIN_ACTION_LABELS
    n_actions = 2

    def __init__(self, length: int = 10, episode_cap: int | None = None, fixed_start: bool = False):
        if length < 2:
            raise ValueError("chain length must be at least 2")
        self.length = length
        self.n_states = length
        self.goal_id = length - 1
        self.episode_cap = episode_cap if episode_cap is not None else 5 * length
        nxt = np.empty((length, 2), dtype=np.int64)
        for p in range(length):
            nxt[p, ADVANCE] = min(p + 1, length - 1)
            nxt[p, BRAKE] = p
        self.next_table = nxt
        self.features = (np.arange(length, dtype=np.float64) / (length - 1))[:, None]
        self.start_support = np.array([0] if fixed_start else list(range(length - 1)), dtype=np.int64)
        self._finalize()

    def map_hash(self) -> str:
        return hashlib.sha256(f"chain:{self.length}".encode()).hexdigest()


# --------------------------------------------------------------------------- map files

def load_map(text: str) -> GridSpec:
    """Parse a double-resolution ASCII map.

    Cell rows alternate with wall rows. ``+`` sits on every lattice corner,
    ``|`` and ``-`` draw barriers, ``G`` marks the goal and an optional ``S``
    the fixed start. The outer frame must be closed.
    """
    lines = [ln.rstrip("\n").rstrip("\r") for ln in text.splitlines()]
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) < 3 or len(lines) % 2 == 0:
        raise MapParseError("map needs an odd number (>= 3) of lines", len(lines), 1)
    n_cols = len(lines[0])
    if n_cols < 3 or n_cols % 2 == 0:
        raise MapParseError("map lines need an odd length (>= 3)", 1, n_cols)
    for i, ln in enumerate(lines):
        if len(ln) != n_cols:
            raise MapParseError(f"ragged line: expected {n_cols} characters, got {len(ln)}", i + 1, len(ln) + 1)
    width, height = (n_cols - 1) // 2, (len(lines) - 1) // 2

    def cell_of(row: int, col: int) -> tuple[int, int]:
        return (col - 1) // 2, height - 1 - (row - 1) // 2

    barriers: set[frozenset[tuple[int, int]]] = set()
    goal = start = None
    for r, ln in enumerate(lines):
        for c, ch in enumerate(ln):
            where = (r + 1, c + 1)
            edge_r, edge_c = r in (0, len(lines) - 1), c in (0, n_cols - 1)
            if r % 2 == 0 and c % 2 == 0:
                if ch != "+":
                    raise MapParseError(f"expected '+' at lattice corner, got {ch!r}", *where)
            elif r % 2 == 0:
                if ch not in "- ":
                    raise MapParseError(f"expected '-' or ' ' in wall row, got {ch!r}", *where)
                if edge_r:
                    if ch != "-":
                        raise MapParseError("outer frame must be closed", *where)
                elif ch == "-":
                    x, y_above = cell_of(r - 1, c)
                    barriers.add(frozenset(((x, y_above), (x, y_above - 1))))
            elif c % 2 == 0:
                if ch not in "| ":
                    raise MapParseError(f"expected '|' or ' ' between cells, got {ch!r}", *where)
                if edge_c:
                    if ch != "|":
                        raise MapParseError("outer frame must be closed", *where)
                elif ch == "|":
                    x_left, y = cell_of(r, c - 1)
                    barriers.add(frozenset(((x_left, y), (x_left + 1, y))))
            else:
                if ch == "G":
                    if goal is not None:
                        raise MapParseError("more than one goal", *where)
                    goal = cell_of(r, c)
                elif ch == "S":
                    if start is not None:
                        raise MapParseError("more than one start", *where)
                    start = cell_of(r, c)
                elif ch != " ":
                    raise MapParseError(f"unknown cell marker {ch!r}", *where)
    if goal is None:
        raise MapParseError("map has no goal cell 'G'", 1, 1)
    spec = GridSpec(width, height, frozenset(barriers), goal, start)
    _check_connected(spec)
    return spec


def _check_connected(spec: GridSpec):
    seen = {spec.goal}
    queue = deque([spec.goal])
    while queue:
        x, y = queue.popleft()
        for dx, dy in GRID_MOVES.values():
            nb = (x + dx, y + dy)
            if spec.in_bounds(nb) and nb not in seen and not spec.blocked((x, y), nb):
                seen.add(nb)
                queue.append(nb)
    support = [spec.start] if spec.start is not None else [
        (x, y) for y in range(spec.height) for x in range(spec.width)
    ]
    for cell in support:
        if cell not in seen:
            raise ConnectivityError(cell)


def dump_map(spec: GridSpec) -> str:
    """Inverse of :func:`load_map`."""
    w, h = spec.width, spec.height
    rows = []
    for line in range(2 * h + 1):
        chars = []
        for col in range(2 * w + 1):
            if line % 2 == 0 and col % 2 == 0:
                chars.append("+")
            elif line % 2 == 0:
                x = (col - 1) // 2
                if line in (0, 2 * h):
                    chars.append("-")
                else:
                    y_above = h - 1 - (line - 2) // 2
                    chars.append("-" if spec.blocked((x, y_above), (x, y_above - 1)) else " ")
            elif col % 2 == 0:
                y = h - 1 - (line - 1) // 2
                if col in (0, 2 * w):
                    chars.append("|")
                else:
                    x_left = (col - 2) // 2
                    chars.append("|" if spec.blocked((x_left, y), (x_left + 1, y)) else " ")
            else:
                cell = ((col - 1) // 2, h - 1 - (line - 1) // 2)
                chars.append("G" if cell == spec.goal else "S" if cell == spec.start else " ")
        rows.append("".join(chars))
    return "\n".join(rows) + "\n"


def load_grid(path: str | Path) -> GridWorld:
    text = Path(path).read_text()
    return GridWorld(load_map(text), source_text=text)


# --------------------------------------------------------------------------- public operations

def step(env: DiscreteEnv, s: State | int, a: Action | int) -> tuple[State, bool, float]:
    sid = s.id if isinstance(s, State) else int(s)
    aid = a.id if isinstance(a, Action) else int(a)
    env._check_state(sid)
    env._check_action(aid)
    s_next, done, r = env.step_id(sid, aid)
    return env.state(s_next), done, r


def transition_support(env: DiscreteEnv, s: State | int, s_j: State | int) -> bool:
    """True iff some action moves ``s`` to ``s_j`` in one step."""
    sid = s.id if isinstance(s, State) else int(s)
    jid = s_j.id if isinstance(s_j, State) else int(s_j)
    env._check_state(sid)
    env._check_state(jid)
    return bool(env.support[sid, jid])


def enumerate_states(env: DiscreteEnv) -> list[State]:
    return [env.state(i) for i in range(env.n_states)]


def bfs_distances(env: DiscreteEnv, targets: Iterable[int]) -> np.ndarray:
    """Fewest actions from every state to the nearest target (-1 if unreachable)."""
    dist = np.full(env.n_states, -1, dtype=np.int64)
    queue = deque()
    for t in targets:
        dist[int(t)] = 0
        queue.append(int(t))
    predecessors = [np.flatnonzero(env.support[:, j]) for j in range(env.n_states)]
    while queue:
        j = queue.popleft()
        for i in predecessors[j]:
            if dist[i] < 0:
                dist[i] = dist[j] + 1
                queue.append(int(i))
    return dist


def rollout_actions(env: DiscreteEnv, s0: int, route: Sequence[int]) -> Trajectory:
    transitions = []
    s = s0
    for a in route:
        t = env.transition(s, int(a))
        transitions.append(t)
        s = t.s_next.id
    return Trajectory(transitions, float(sum(t.terminal for t in transitions)))


def make_expert_demo(env: DiscreteEnv, route: Sequence[Action | int], s0: State | int) -> ExpertDemo:
    """Replay ``route`` from ``s0``; every move must change state and only the last may terminate."""
    sid = s0.id if isinstance(s0, State) else int(s0)
    env._check_state(sid)
    ids = [a.id if isinstance(a, Action) else int(a) for a in route]
    for a in ids:
        env._check_action(a)
    traj = rollout_actions(env, sid, ids)
    for k, t in enumerate(traj.transitions):
        if t.s_next.id == t.s.id:
            raise RouteError(f"route bumps at step {k} (state {t.s.id}, action {env.action_labels[t.a.id]})")
        if t.terminal and k != len(traj) - 1:
            raise RouteError(f"route reaches the goal early at step {k}")
    if not traj.transitions or not traj.transitions[-1].terminal:
        raise RouteError("route does not reach the goal")
    return ExpertDemo.from_trajectory(traj)


def parse_route(text: str, env: DiscreteEnv) -> tuple[int, list[int]]:
    """Read a route file: ``start = x, y`` (or a state id) and ``route = L L D ...``."""
    fields = {}
    for ln in text.splitlines():
        ln = ln.split("#", 1)[0].strip()
        if ln:
            key, _, value = ln.partition("=")
            fields[key.strip()] = value.strip()
    if "start" not in fields or "route" not in fields:
        raise RouteError("route file needs 'start' and 'route' entries")
    start = [int(v) for v in fields["start"].replace(",", " ").split()]
    if len(start) == 2 and isinstance(env, GridWorld):
        s0 = env.cell_id(*start)
    elif len(start) == 1:
        s0 = start[0]
    else:
        raise RouteError(f"bad start {fields['start']!r}")
    lookup = {lab[0].upper(): i for i, lab in enumerate(env.action_labels)}
    lookup.update({lab.upper(): i for i, lab in enumerate(env.action_labels)})
    try:
        route = [lookup[tok.upper()] for tok in fields["route"].split()]
    except KeyError as exc:
        raise RouteError(f"unknown action {exc.args[0]!r}") from None
    return s0, route


# --------------------------------------------------------------------------- demo files

def save_demo(path: str | Path, demo: ExpertDemo, env: DiscreteEnv):
    lines = [json.dumps({"env": env.name, "map_hash": env.map_hash(), "n_transitions": len(demo)})]
    for k, t in enumerate(demo.trajectory.transitions):
        lines.append(json.dumps({
            "step_index": k, "state_id": t.s.id, "action_id": t.a.id,
            "next_state_id": t.s_next.id, "terminal": t.terminal,
        }))
    Path(path).write_text("\n".join(lines) + "\n")


def save_trajectory(path: str | Path, traj: Trajectory, env: DiscreteEnv):
    save_demo(path, ExpertDemo(traj, [], frozenset()), env)


def load_demo(path: str | Path, env: DiscreteEnv) -> ExpertDemo:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty demo file")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed record: {exc}") from None
    if header.get("env") != env.name or header.get("map_hash") != env.map_hash():
        raise ValueError(f"{path}: demo was recorded on a different environment")
    transitions = []
    for k, rec in enumerate(records):
        try:
            if rec["step_index"] != k:
                raise ValueError(f"{path}: step_index {rec['step_index']} out of order at record {k}")
            s, a, s_next = env.state(rec["state_id"]), env.action(rec["action_id"]), env.state(rec["next_state_id"])
            terminal = rec["terminal"]
        except KeyError as exc:
            raise ValueError(f"{path}: record {k} missing field {exc.args[0]!r}") from None
        if not isinstance(terminal, bool):
            raise ValueError(f"{path}: record {k} terminal flag must be boolean")
        transitions.append(Transition(s, a, s_next, terminal))
    traj = Trajectory(transitions, float(sum(t.terminal for t in transitions)))
    return ExpertDemo.from_trajectory(traj)


# --------------------------------------------------------------------------- shipped data

DATA_DIR = Path(__file__).parent / "data"


def default_grid() -> GridWorld:
    return load_grid(DATA_DIR / "barrier8.grid")


def default_demo(env: GridWorld | None = None) -> ExpertDemo:
    env = env or default_grid()
    s0, route = parse_route((DATA_DIR / "barrier8.route").read_text(), env)
    return make_expert_demo(env, route, s0)


def chain_demo(env: ChainEnv) -> ExpertDemo:
    return make_expert_demo(env, [ADVANCE] * (env.length - 1), 0)
