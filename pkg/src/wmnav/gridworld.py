"""Deterministic occupancy-grid simulator.

Cells are addressed as ``(x, y)`` with ``y`` growing downwards.  One cell is
taken to be 0.25 m, so the distance rules of the multi-goal dataset scale to
cell counts (10 m -> 40 cells, 1.5 m -> 6 cells, 1 m -> 2 cells).
"""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

Cell = tuple[int, int]

# heading index -> (dx, dy); 0=N, 1=E, 2=S, 3=W
HEADINGS: tuple[Cell, ...] = ((0, -1), (1, 0), (0, 1), (-1, 0))

STEP_BUDGET = 500


class Action(IntEnum):
    STOP = 0
    FORWARD = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3


class MapFormatError(ValueError):
    pass


class InvalidPoseError(ValueError):
    pass


class EpisodeGenerationError(RuntimeError):
    """No valid episode could be placed; ``rule`` names the rule that kept failing."""

    def __init__(self, rule: str, message: str):
        super().__init__(f"rule {rule}: {message}")
        self.rule = rule


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: int = 0

    @property
    def cell(self) -> Cell:
        return (self.x, self.y)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "heading": self.heading}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(int(d["x"]), int(d["y"]), int(d.get("heading", 0)))


@dataclass(frozen=True)
class ObservationConfig:
    view_radius: int = 3
    feature_dim: int = 32
    noise_std: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be >= 8")
        if self.view_radius < 1:
            raise ValueError("view_radius must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


class GridMap:
    """Immutable wall/free grid.  ``walls[y, x]`` is True for a wall."""

    def __init__(self, walls: np.ndarray, scene_id: str = "scene"):
        walls = np.array(walls, dtype=bool)
        if walls.ndim != 2:
            raise MapFormatError("walls must be a 2-D array")
        walls[0, :] = True
        walls[-1, :] = True
        walls[:, 0] = True
        walls[:, -1] = True
        if walls.all():
            raise MapFormatError("map has no free cell")
        walls.setflags(write=False)
        self.walls = walls
        self.scene_id = scene_id
        self._dist_cache: dict[Cell, np.ndarray] = {}
        self._vis_cache: dict[tuple[Cell, int], np.ndarray] = {}
        self._emb_cache: dict[tuple[Cell, int, int], np.ndarray] = {}
        self._cellvec_cache: dict[int, np.ndarray] = {}

    @property
    def height(self) -> int:
        return self.walls.shape[0]

    @property
    def width(self) -> int:
        return self.walls.shape[1]

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and not self.walls[y, x]

    def free_cells(self) -> list[Cell]:
        ys, xs = np.nonzero(~self.walls)
        return sorted(zip(xs.tolist(), ys.tolist()), key=lambda c: (c[1], c[0]))

    def neighbors(self, cell: Cell) -> Iterable[Cell]:
        x, y = cell
        for dx, dy in HEADINGS:
            if self.is_free(x + dx, y + dy):
                yield (x + dx, y + dy)

    def distance_field(self, src: Cell) -> np.ndarray:
        """BFS distances (4-connected) from ``src``; -1 marks unreachable cells."""
        if src in self._dist_cache:
            return self._dist_cache[src]
        if not self.is_free(*src):
            raise InvalidPoseError(f"{src} is not a free cell")
        free = ~self.walls
        dist = np.full(self.walls.shape, -1, dtype=np.int32)
        front = np.zeros(self.walls.shape, dtype=bool)
        front[src[1], src[0]] = True
        reached = front.copy()
        dist[src[1], src[0]] = 0
        k = 0
        # breadth-first wavefront, one ring per iteration
        while front.any():
            k += 1
            ring = np.zeros_like(front)
            ring[1:, :] |= front[:-1, :]
            ring[:-1, :] |= front[1:, :]
            ring[:, 1:] |= front[:, :-1]
            ring[:, :-1] |= front[:, 1:]
            ring &= free & ~reached
            dist[ring] = k
            reached |= ring
            front = ring
        dist.setflags(write=False)
        self._dist_cache[src] = dist
        return dist

    def components(self) -> np.ndarray:
        """Label array of 4-connected free components (walls are -1), labels ordered by size."""
        labels = np.full(self.walls.shape, -1, dtype=np.int64)
        sizes = []
        for cell in self.free_cells():
            if labels[cell[1], cell[0]] >= 0:
                continue
            field_ = self.distance_field(cell)
            mask = field_ >= 0
            labels[mask] = len(sizes)
            sizes.append(int(mask.sum()))
        order = np.argsort(-np.asarray(sizes), kind="stable")
        remap = np.empty(len(sizes), dtype=np.int64)
        remap[order] = np.arange(len(sizes))
        out = np.where(labels >= 0, remap[np.maximum(labels, 0)], -1)
        return out

    def to_ascii(self) -> str:
        rows = ["".join("#" if w else "." for w in row) for row in self.walls]
        return f"{self.width} {self.height}\n" + "\n".join(rows) + "\n"

    def __repr__(self) -> str:
        return f"GridMap({self.scene_id!r}, {self.width}x{self.height})"


def parse_map(text: str, scene_id: str = "scene") -> GridMap:
    lines = [ln.rstrip("\r") for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MapFormatError("empty map file")
    try:
        w, h = (int(v) for v in lines[0].split())
    except ValueError as exc:
        raise MapFormatError(f"bad header line {lines[0]!r}, expected 'W H'") from exc
    rows = lines[1:]
    if len(rows) != h:
        raise MapFormatError(f"expected {h} rows, got {len(rows)}")
    walls = np.zeros((h, w), dtype=bool)
    for y, row in enumerate(rows):
        if len(row) != w:
            raise MapFormatError(f"row {y} has width {len(row)}, expected {w}")
        for x, ch in enumerate(row):
            if ch == "#":
                walls[y, x] = True
            elif ch != ".":
                raise MapFormatError(f"unknown cell character {ch!r} at ({x}, {y})")
    return GridMap(walls, scene_id)


def load_map(path: str | Path) -> GridMap:
    path = Path(path)
    return parse_map(path.read_text(), scene_id=path.stem)


def save_map(grid: GridMap, path: str | Path) -> None:
    Path(path).write_text(grid.to_ascii())


def random_maze(width: int, height: int, seed: int, scene_id: Optional[str] = None) -> GridMap:
    """Perfect maze carved by randomized DFS on odd coordinates (1-cell corridors)."""
    rng = np.random.default_rng(seed)
    walls = np.ones((height, width), dtype=bool)
    start = (1, 1)
    walls[1, 1] = False
    stack = [start]
    while stack:
        x, y = stack[-1]
        options = []
        for dx, dy in HEADINGS:
            nx, ny = x + 2 * dx, y + 2 * dy
            if 0 < nx < width - 1 and 0 < ny < height - 1 and walls[ny, nx]:
                options.append((nx, ny, dx, dy))
        if not options:
            stack.pop()
            continue
        nx, ny, dx, dy = options[rng.integers(len(options))]
        walls[y + dy, x + dx] = False
        walls[ny, nx] = False
        stack.append((nx, ny))
    return GridMap(walls, scene_id or f"maze{seed}")


def random_scene(
    width: int,
    height: int,
    seed: int,
    n_walls: Optional[int] = None,
    n_blocks: Optional[int] = None,
    scene_id: Optional[str] = None,
) -> GridMap:
    """Room-like scene: partition walls with door gaps plus scattered rectangular obstacles."""
    rng = np.random.default_rng(seed)
    walls = np.zeros((height, width), dtype=bool)
    area = width * height
    n_walls = max(1, area // 120) if n_walls is None else n_walls
    n_blocks = max(1, area // 150) if n_blocks is None else n_blocks
    for _ in range(n_walls):
        if rng.random() < 0.5:
            x = int(rng.integers(3, width - 3))
            walls[:, x] = True
            for _ in range(int(rng.integers(1, 3))):
                y = int(rng.integers(1, height - 3))
                walls[y : y + 3, x] = False
        else:
            y = int(rng.integers(3, height - 3))
            walls[y, :] = True
            for _ in range(int(rng.integers(1, 3))):
                x = int(rng.integers(1, width - 3))
                walls[y, x : x + 3] = False
    for _ in range(n_blocks):
        bw, bh = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x, y = int(rng.integers(1, width - bw)), int(rng.integers(1, height - bh))
        walls[y : y + bh, x : x + bw] = True
    return GridMap(walls, scene_id or f"scene{seed}")


# ---------------------------------------------------------------------------
# motion and sensing


def check_pose(grid: GridMap, pose: Pose) -> None:
    if not grid.is_free(pose.x, pose.y):
        raise InvalidPoseError(f"pose {pose} is not on a free cell")
    if pose.heading not in (0, 1, 2, 3):
        raise InvalidPoseError(f"heading {pose.heading} is not a cardinal index")


def step(grid: GridMap, pose: Pose, action: Action) -> Pose:
    """Forward moves one cell unless blocked (then nothing happens); turns are 90 degrees."""
    check_pose(grid, pose)
    action = Action(action)
    if action == Action.FORWARD:
        dx, dy = HEADINGS[pose.heading]
        nx, ny = pose.x + dx, pose.y + dy
        if grid.is_free(nx, ny):
            return Pose(nx, ny, pose.heading)
        return pose
    if action == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, (pose.heading - 1) % 4)
    if action == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, (pose.heading + 1) % 4)
    return pose


def _line_of_sight(grid: GridMap, a: Cell, b: Cell) -> bool:
    # Bresenham; endpoints excluded from the blocking test
    x0, y0 = a
    x1, y1 = b
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while (x, y) != (x1, y1):
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy
        if (x, y) != (x1, y1) and grid.walls[y, x]:
            return False
    return True


def visible_cells(grid: GridMap, cell: Cell, view_radius: int) -> np.ndarray:
    """Free cells within a Euclidean disk of ``view_radius`` having line of sight; shape (k, 2)."""
    key = (cell, view_radius)
    cached = grid._vis_cache.get(key)
    if cached is not None:
        return cached
    x0, y0 = cell
    out = []
    r2 = view_radius * view_radius
    for y in range(y0 - view_radius, y0 + view_radius + 1):
        for x in range(x0 - view_radius, x0 + view_radius + 1):
            if (x - x0) ** 2 + (y - y0) ** 2 > r2 or not grid.is_free(x, y):
                continue
            if _line_of_sight(grid, cell, (x, y)):
                out.append((x, y))
    arr = np.array(out, dtype=np.int64).reshape(-1, 2)
    arr.setflags(write=False)
    grid._vis_cache[key] = arr
    return arr


def cell_vector(scene_id: str, x: int, y: int, d: int) -> np.ndarray:
    """Fixed pseudo-random unit vector for one cell of one scene."""
    digest = hashlib.blake2b(f"{scene_id}|{x}|{y}".encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def observe(
    grid: GridMap,
    pose: Pose,
    cfg: ObservationConfig,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Heading-invariant embedding of the visible free-cell set at ``pose``.

    With ``noise_std > 0`` Gaussian noise is added and the result renormalized;
    the noise is drawn from ``rng`` (or a generator seeded by ``cfg.rng_seed``).
    """
    check_pose(grid, pose)
    d = cfg.feature_dim
    key = (pose.cell, cfg.view_radius, d)
    base = grid._emb_cache.get(key)
    if base is None:
        table = grid._cellvec_cache.get(d)
        if table is None:
            table = np.zeros((grid.height, grid.width, d))
            for x, y in grid.free_cells():
                table[y, x] = cell_vector(grid.scene_id, x, y, d)
            grid._cellvec_cache[d] = table
        cells = visible_cells(grid, pose.cell, cfg.view_radius)
        total = table[cells[:, 1], cells[:, 0]].sum(axis=0)
        base = total / np.linalg.norm(total)
        base.setflags(write=False)
        grid._emb_cache[key] = base
    if cfg.noise_std == 0:
        return base.copy()
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    noisy = base + rng.normal(0.0, cfg.noise_std, size=d)
    return noisy / np.linalg.norm(noisy)


# ---------------------------------------------------------------------------
# distances and success


def geodesic(grid: GridMap, a: Cell, b: Cell) -> Optional[int]:
    """Shortest 4-connected path length in cells, or None when unreachable."""
    if not grid.is_free(*a) or not grid.is_free(*b):
        raise InvalidPoseError(f"geodesic endpoints must be free cells: {a}, {b}")
    d = int(grid.distance_field(a)[b[1], b[0]])
    return None if d < 0 else d


def success_check(grid: GridMap, pose: Pose, goal: Cell, radius: int = 2) -> bool:
    """Chebyshev distance <= radius, guarded by a geodesic of at most ``2 * radius``.

    The geodesic guard rejects poses that are close in the plane but separated
    by a wall.
    """
    if max(abs(pose.x - goal[0]), abs(pose.y - goal[1])) > radius:
        return False
    g = geodesic(grid, pose.cell, goal)
    return g is not None and g <= 2 * radius


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class EpisodeParams:
    max_leg: int = 40
    final_radius: int = 6
    min_leg: int = 3
    max_attempts: int = 200


@dataclass(frozen=True)
class Episode:
    scene_id: str
    start: Pose
    goals: tuple[Cell, ...]
    leg_geodesics: tuple[int, ...]
    episode_id: str = ""

    @property
    def total_geodesic(self) -> int:
        return int(sum(self.leg_geodesics))

    @property
    def n_goals(self) -> int:
        return len(self.goals)

    def to_dict(self) -> dict:
        out = {
            "scene_id": self.scene_id,
            "start": self.start.to_dict(),
            "goals": [list(g) for g in self.goals],
            "leg_geodesics": list(self.leg_geodesics),
            "total_geodesic": self.total_geodesic,
        }
        if self.episode_id:
            out["episode_id"] = self.episode_id
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        ep = cls(
            scene_id=d["scene_id"],
            start=Pose.from_dict(d["start"]),
            goals=tuple((int(g[0]), int(g[1])) for g in d["goals"]),
            leg_geodesics=tuple(int(v) for v in d["leg_geodesics"]),
            episode_id=d.get("episode_id", ""),
        )
        if "total_geodesic" in d and int(d["total_geodesic"]) != ep.total_geodesic:
            raise ValueError("total_geodesic does not match the sum of leg_geodesics")
        return ep

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def has_clearance(grid: GridMap, cell: Cell) -> bool:
    x, y = cell
    return all(grid.is_free(x + dx, y + dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1))


def validate_episode(grid: GridMap, ep: Episode, params: EpisodeParams = EpisodeParams()) -> list[str]:
    """Return the list of violated dataset rules (empty when the episode is valid)."""
    problems = []
    if any(not has_clearance(grid, g) for g in ep.goals):
        problems.append("1")
    points = [ep.start.cell, *ep.goals]
    legs = []
    for a, b in zip(points, points[1:]):
        legs.append(geodesic(grid, a, b))
    if any(l is None or l > params.max_leg for l in legs):
        problems.append("2")
    comps = grid.components()
    if any(comps[c[1], c[0]] != 0 for c in points):
        problems.append("3")
    if any(geodesic(grid, a, b) is None for a in points for b in points):
        problems.append("4")
    if ep.n_goals >= 2:
        last = ep.goals[-1]
        near = [geodesic(grid, g, last) for g in ep.goals[:-1]]
        if not any(n is not None and n <= params.final_radius for n in near):
            problems.append("5")
    if any(l is not None and l < params.min_leg for l in legs):
        problems.append("min_leg")
    if tuple(legs) != ep.leg_geodesics:
        problems.append("leg_geodesics")
    return problems


def generate_episode(
    grid: GridMap,
    n_goals: int,
    params: EpisodeParams = EpisodeParams(),
    rng_seed: int = 0,
    episode_id: str = "",
) -> Episode:
    """Sample a start and ``n_goals`` ordered goals satisfying the five placement rules."""
    if n_goals not in (1, 2, 3, 4):
        raise ValueError("n_goals must be in 1..4")
    rng = np.random.default_rng(rng_seed)
    comps = grid.components()
    main = {c for c in grid.free_cells() if comps[c[1], c[0]] == 0}
    goal_pool = sorted(c for c in main if has_clearance(grid, c))
    if not goal_pool:
        raise EpisodeGenerationError("1", f"{grid.scene_id}: no free cell with a clear 8-neighbourhood")
    starts = sorted(main)
    failed = "2"
    for _ in range(params.max_attempts):
        start_cell = starts[int(rng.integers(len(starts)))]
        points = [start_cell]
        ok = True
        for k in range(n_goals):
            field_ = grid.distance_field(points[-1])
            cands = []
            for c in goal_pool:
                d = field_[c[1], c[0]]
                if d < params.min_leg or d > params.max_leg:
                    continue
                if k == n_goals - 1 and n_goals >= 2:
                    if not any(
                        0 <= grid.distance_field(g)[c[1], c[0]] <= params.final_radius for g in points[1:]
                    ):
                        continue
                cands.append(c)
            if not cands:
                failed = "5" if (k == n_goals - 1 and n_goals >= 2) else "2"
                ok = False
                break
            points.append(cands[int(rng.integers(len(cands)))])
        if not ok:
            continue
        legs = tuple(int(grid.distance_field(a)[b[1], b[0]]) for a, b in zip(points, points[1:]))
        return Episode(
            scene_id=grid.scene_id,
            start=Pose(start_cell[0], start_cell[1], int(rng.integers(4))),
            goals=tuple(points[1:]),
            leg_geodesics=legs,
            episode_id=episode_id,
        )
    raise EpisodeGenerationError(failed, f"{grid.scene_id}: no placement after {params.max_attempts} attempts")


def episodes_to_goal(
    grid: GridMap,
    goal: Cell,
    n: int,
    params: EpisodeParams = EpisodeParams(),
    rng_seed: int = 0,
) -> list[Episode]:
    """``n`` one-goal episodes that all share ``goal``, with random starts and headings.

    Used for small imitation sets where only the start varies.
    """
    if not has_clearance(grid, goal):
        raise EpisodeGenerationError("1", f"goal {goal} lacks a clear 8-neighbourhood")
    field_ = grid.distance_field(goal)
    starts = sorted(c for c in grid.free_cells() if params.min_leg <= field_[c[1], c[0]] <= params.max_leg)
    if not starts:
        raise EpisodeGenerationError("2", f"no start within leg bounds of {goal}")
    rng = np.random.default_rng(rng_seed)
    out = []
    for i in range(n):
        c = starts[int(rng.integers(len(starts)))]
        out.append(
            Episode(
                scene_id=grid.scene_id,
                start=Pose(c[0], c[1], int(rng.integers(4))),
                goals=(goal,),
                leg_geodesics=(int(field_[c[1], c[0]]),),
                episode_id=f"{grid.scene_id}-g{goal[0]}_{goal[1]}-{i:04d}",
            )
        )
    return out


def write_episodes(path: str | Path, episodes: Sequence[Episode]) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(ep.to_json() + "\n")


def read_episodes(path: str | Path) -> list[Episode]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Episode.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad episode record ({exc})") from exc
    return out


# ---------------------------------------------------------------------------
# teacher


def turn_toward(heading: int, target_heading: int) -> Action:
    if heading == target_heading:
        return Action.FORWARD
    if (heading - 1) % 4 == target_heading:
        return Action.TURN_LEFT
    if (heading + 1) % 4 == target_heading:
        return Action.TURN_RIGHT
    return Action.TURN_LEFT


def action_toward(grid: GridMap, pose: Pose, target: Cell) -> Action:
    """First primitive action of a shortest path to ``target``.

    Among shortest-path successors the one reachable by forward is preferred,
    then turn_left, then turn_right.  Returns STOP on the target cell and
    also when the target is unreachable.
    """
    if pose.cell == target:
        return Action.STOP
    field_ = grid.distance_field(target)
    here = field_[pose.y, pose.x]
    if here < 0:
        return Action.STOP
    for h in (pose.heading, (pose.heading - 1) % 4, (pose.heading + 1) % 4, (pose.heading + 2) % 4):
        dx, dy = HEADINGS[h]
        nx, ny = pose.x + dx, pose.y + dy
        if grid.is_free(nx, ny) and field_[ny, nx] == here - 1:
            return turn_toward(pose.heading, h)
    return Action.STOP


def teacher_actions(grid: GridMap, ep: Episode) -> list[Action]:
    """Shortest-path action sequence visiting every goal cell in order, with a stop on each."""
    pose = ep.start
    actions: list[Action] = []
    for goal in ep.goals:
        while True:
            a = action_toward(grid, pose, goal)
            actions.append(a)
            if a == Action.STOP:
                break
            pose = step(grid, pose, a)
    return actions
