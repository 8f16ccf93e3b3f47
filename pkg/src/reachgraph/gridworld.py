"""Gridworld environments under a uniform five-action random walk.

States are the free cells of a rectangular map, indexed in row-major order.
Moving into a wall or off the grid leaves the agent where it is.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

Cell = tuple[int, int]


class MapError(ValueError):
    """Raised for malformed or disconnected map text."""


class Action(enum.IntEnum):
    LEFT = 0
    RIGHT = 1
    UP = 2
    DOWN = 3
    STOP = 4


ACTION_DELTAS: dict[Action, Cell] = {
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.STOP: (0, 0),
}


BUILTIN_MAPS: dict[str, str] = {
    # 11x11, cross-shaped wall, doorways at (2,5) (8,5) (5,2) (5,8)
    "four_rooms": "\n".join([
        ".....#.....",
        ".S...#.....",
        "...........",
        ".....#.....",
        ".....#.....",
        "##.#####.##",
        ".....#.....",
        ".....#.....",
        "...........",
        ".....#.....",
        ".....#.....",
    ]),
    # two 5x5 rooms, corridor (2,5)..(2,11)
    "dumbbell": "\n".join([
        ".....#######.....",
        ".S...#######.....",
        ".................",
        ".....#######.....",
        ".....#######.....",
    ]),
    # two 7x5 rooms stacked, opening (5,2)..(5,4)
    "wide_door": "\n".join([
        ".......",
        ".S.....",
        ".......",
        ".......",
        ".......",
        "##...##",
        ".......",
        ".......",
        ".......",
        ".......",
        ".......",
    ]),
    # 5x3 mouth on top, neck (3,3)..(6,3), 7x5 bulb below
    "flask": "\n".join([
        "#.....#",
        "#.....#",
        "#.....#",
        "###.###",
        "###.###",
        "###.###",
        "###.###",
        ".......",
        ".......",
        ".......",
        "...S...",
        ".......",
    ]),
    # 7x7 room, dead-end corridor (3,7)..(3,11)
    "nail": "\n".join([
        ".......#####",
        ".S.....#####",
        ".......#####",
        "............",
        ".......#####",
        ".......#####",
        ".......#####",
    ]),
}

# Cells the subgoal checks expect to come out as DBSCAN noise.
BOTTLENECKS: dict[str, list[Cell]] = {
    "four_rooms": [(2, 5), (8, 5), (5, 2), (5, 8)],
    "dumbbell": [(2, c) for c in range(5, 12)],
    "wide_door": [(5, 2), (5, 3), (5, 4)],
    "flask": [(r, 3) for r in range(3, 7)],
    "nail": [(3, c) for c in range(7, 12)],
}


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    walls: frozenset[Cell]
    start: Cell
    name: str = "custom"
    free_cells: tuple[Cell, ...] = field(init=False, repr=False, compare=False)
    _index: dict[Cell, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise MapError("empty map")
        if not self.in_bounds(self.start) or self.start in self.walls:
            raise MapError(f"start {self.start} is not a free in-bounds cell")
        free = tuple(
            (r, c)
            for r in range(self.height)
            for c in range(self.width)
            if (r, c) not in self.walls
        )
        object.__setattr__(self, "free_cells", free)
        object.__setattr__(self, "_index", {cell: i for i, cell in enumerate(free)})
        if not _connected(free):
            raise MapError("free region is not 4-connected")

    @property
    def n_states(self) -> int:
        return len(self.free_cells)

    @property
    def start_index(self) -> int:
        return self._index[self.start]

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.walls

    def index(self, cell: Cell) -> int:
        try:
            return self._index[tuple(cell)]
        except KeyError:
            raise KeyError(f"{cell} is not a free cell of {self.name}") from None

    def coord(self, index: int) -> Cell:
        return self.free_cells[index]

    def coords(self) -> np.ndarray:
        """(n_states, 2) integer array of (row, col)."""
        return np.array(self.free_cells, dtype=int).reshape(-1, 2)

    def features(self) -> np.ndarray:
        """Cell coordinates mapped affinely onto [-1, 1]^2 (row, col order)."""
        rc = self.coords().astype(float)
        scale = np.array([max(self.height - 1, 1), max(self.width - 1, 1)], dtype=float)
        return 2.0 * rc / scale - 1.0


def _connected(cells: Sequence[Cell]) -> bool:
    if not cells:
        return False
    pool = set(cells)
    seen = {cells[0]}
    queue = deque([cells[0]])
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            nb = (r + dr, c + dc)
            if nb in pool and nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return len(seen) == len(pool)


def regions(spec: GridSpec, bottlenecks: Sequence[Cell] | None = None) -> np.ndarray:
    """Per-state region id: 4-connected components of the free cells once the
    bottleneck cells are removed, numbered in row-major order of their first
    cell. Bottleneck cells get -1."""
    if bottlenecks is None:
        bottlenecks = BOTTLENECKS.get(spec.name, [])
    blocked = set(map(tuple, bottlenecks))
    labels = np.full(spec.n_states, -1, dtype=np.int64)
    current = 0
    for i, cell in enumerate(spec.free_cells):
        if labels[i] >= 0 or cell in blocked:
            continue
        labels[i] = current
        queue = deque([cell])
        while queue:
            r, c = queue.popleft()
            for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                nb = (r + dr, c + dc)
                if spec.is_free(nb) and nb not in blocked and labels[spec.index(nb)] < 0:
                    labels[spec.index(nb)] = current
                    queue.append(nb)
        current += 1
    return labels


def parse_map(text: str, name: str = "custom") -> GridSpec:
    lines = [line.rstrip("\r") for line in text.strip("\n").split("\n")]
    if not lines or not lines[0]:
        raise MapError("empty map")
    width = len(lines[0])
    if any(len(line) != width for line in lines):
        raise MapError("map is not rectangular")
    walls = set()
    starts = []
    for r, line in enumerate(lines):
        for c, ch in enumerate(line):
            if ch == "#":
                walls.add((r, c))
            elif ch == "S":
                starts.append((r, c))
            elif ch != ".":
                raise MapError(f"unexpected character {ch!r} at ({r}, {c})")
    if len(starts) != 1:
        raise MapError(f"expected exactly one 'S', found {len(starts)}")
    return GridSpec(width, len(lines), frozenset(walls), starts[0], name)


def render_map(spec: GridSpec) -> str:
    rows = []
    for r in range(spec.height):
        row = []
        for c in range(spec.width):
            if (r, c) == spec.start:
                row.append("S")
            elif (r, c) in spec.walls:
                row.append("#")
            else:
                row.append(".")
        rows.append("".join(row))
    return "\n".join(rows)


def load_map(name_or_path: str | Path) -> GridSpec:
    """Resolve a builtin map name, falling back to an ASCII map file."""
    key = str(name_or_path)
    if key in BUILTIN_MAPS:
        return parse_map(BUILTIN_MAPS[key], key)
    path = Path(name_or_path)
    if not path.exists():
        raise FileNotFoundError(f"no builtin map or file named {key!r}")
    return parse_map(path.read_text(encoding="utf-8"), path.stem)


def step(spec: GridSpec, s: int, a: Action | int) -> int:
    r, c = spec.coord(s)
    dr, dc = ACTION_DELTAS[Action(a)]
    nxt = (r + dr, c + dc)
    return spec.index(nxt) if spec.is_free(nxt) else s


def successor_table(spec: GridSpec) -> np.ndarray:
    """(n_states, 5) array: successor of each state under each action."""
    return np.array(
        [[step(spec, s, a) for a in Action] for s in range(spec.n_states)], dtype=np.int64
    )


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    episode_id: int

    @property
    def horizon(self) -> int:
        return len(self.states) - 1


@dataclass(frozen=True)
class TrajectoryDataset:
    """N trajectories of equal horizon T, stored as an (N, T+1) index array.

    ``features`` holds the model input for every state index; gridworld
    datasets use normalized cell coordinates.
    """

    states: np.ndarray
    features: np.ndarray
    name: str = "custom"
    spec: GridSpec | None = None

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=np.int64)
        if states.ndim != 2 or states.shape[1] < 2:
            raise ValueError("states must be (N, T+1) with T >= 1")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float))

    @property
    def n_episodes(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1] - 1

    @property
    def n_states(self) -> int:
        return self.features.shape[0]

    def visited(self) -> np.ndarray:
        return np.unique(self.states)

    def __len__(self) -> int:
        return self.n_episodes

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], i)

    def __iter__(self) -> Iterator[Trajectory]:
        return (self[i] for i in range(len(self)))


def collect(spec: GridSpec, episodes: int, horizon: int, rng_seed: int) -> TrajectoryDataset:
    """Roll out the uniform policy from the start cell.

    Every episode draws from its own generator spawned off ``rng_seed`` so
    episodes are independent of how many others are collected.
    """
    if episodes < 1 or horizon < 1:
        raise ValueError("need episodes >= 1 and horizon >= 1")
    succ = successor_table(spec)
    children = np.random.SeedSequence(rng_seed).spawn(episodes)
    actions = np.stack(
        [np.random.default_rng(seq).integers(0, len(Action), size=horizon) for seq in children]
    )
    out = np.empty((episodes, horizon + 1), dtype=np.int64)
    s = out[:, 0] = spec.start_index
    for t in range(horizon):
        s = out[:, t + 1] = succ[s, actions[:, t]]
    return TrajectoryDataset(out, spec.features(), spec.name, spec)


def simulate_chain(
    p: np.ndarray, init: int, episodes: int, horizon: int, rng_seed: int,
    features: np.ndarray | None = None, name: str = "chain",
) -> TrajectoryDataset:
    """Sample trajectories from an arbitrary row-stochastic matrix.

    Default features place the states evenly on the segment [-1, 1] x {0}.
    """
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    cdf = np.cumsum(p, axis=1)
    cdf[:, -1] = 1.0
    children = np.random.SeedSequence(rng_seed).spawn(episodes)
    out = np.empty((episodes, horizon + 1), dtype=np.int64)
    for i, seq in enumerate(children):
        u = np.random.default_rng(seq).random(horizon)
        s = init
        out[i, 0] = s
        for t in range(horizon):
            s = int(np.searchsorted(cdf[s], u[t], side="right"))
            out[i, t + 1] = s
    if features is None:
        xs = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
        features = np.column_stack([xs, np.zeros(n)])
    return TrajectoryDataset(out, features, name)


def validate(spec: GridSpec, data: TrajectoryDataset) -> None:
    """Raise ValueError unless every trajectory starts at S and moves legally."""
    succ = successor_table(spec)
    if np.any(data.states[:, 0] != spec.start_index):
        raise ValueError("trajectory does not start at the start cell")
    s, nxt = data.states[:, :-1], data.states[:, 1:]
    ok = (succ[s] == nxt[..., None]).any(axis=-1)
    if not ok.all():
        ep, t = map(int, np.argwhere(~ok)[0])
        raise ValueError(f"infeasible transition in episode {ep} at t={t}")


TRAJ_MAGIC = "reachgraph-traj v1"


def save_trajectories(data: TrajectoryDataset, path: str | Path) -> None:
    if data.spec is None:
        raise ValueError("only gridworld datasets can be written as cell coordinates")
    cells = data.spec.coords()
    n, width = data.states.shape
    ep = np.repeat(np.arange(n), width)
    t = np.tile(np.arange(width), n)
    rc = cells[data.states.ravel()]
    table = np.column_stack([ep, t, rc])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{TRAJ_MAGIC} {data.name} {n} {width - 1}\n")
        np.savetxt(fh, table, fmt="%d", delimiter=",")


def load_trajectories(path: str | Path, spec: GridSpec | None = None) -> TrajectoryDataset:
    """Read a trajectory file; the map is resolved from the header if not given."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if header[:2] != TRAJ_MAGIC.split() or len(header) != 5:
            raise ValueError(f"{path}: not a {TRAJ_MAGIC} file")
        name, n, horizon = header[2], int(header[3]), int(header[4])
        table = np.loadtxt(fh, dtype=np.int64, delimiter=",", ndmin=2)
    if spec is None:
        spec = load_map(name)
    if table.shape != (n * (horizon + 1), 4):
        raise ValueError(f"{path}: expected {n * (horizon + 1)} rows, got {table.shape[0]}")
    ep, t, rows, cols = table.T
    states = np.empty((n, horizon + 1), dtype=np.int64)
    lookup = {cell: i for i, cell in enumerate(spec.free_cells)}
    states[ep, t] = [lookup[(r, c)] for r, c in zip(rows.tolist(), cols.tolist())]
    return TrajectoryDataset(states, spec.features(), name, spec)
