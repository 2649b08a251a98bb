"""Navigation loop, policies and imitation training.

Each step runs in a fixed order: observe, localize and update the map, apply
forgetting with the attention scores of the *previous* step, encode, decode,
store the new scores, then pick an action.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import gridworld as gw
from . import neural as nn
from . import topomem as tm
from .gridworld import Action, Episode, GridMap, ObservationConfig, Pose
from .metrics import EpisodeResult

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EngineConfig:
    p: float = 0.2
    s_th: float = 0.75
    policy: str = "planner"  # planner | learned
    budget: int = gw.STEP_BUDGET
    success_radius: int = 2
    forgetting: bool = True
    exempt_last: bool = True
    head_reduce: str = "mean"
    # ablations
    no_ltm: bool = False
    random_replace_ltm: bool = False
    no_decode_ltm: bool = False
    random_forget: bool = False
    deccur_scores: bool = False
    # learned policy
    greedy: bool = False
    # planner
    goal_sim: float = 0.5
    entropy_threshold: float = 0.38
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.policy not in ("planner", "learned"):
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.budget <= 0:
            raise ValueError("budget must be positive")

    @property
    def forgetting_active(self) -> bool:
        return self.forgetting and self.p > 0


@dataclass
class TrajectoryRecord:
    t: int
    pose: dict
    action: int
    goal_idx: int
    n_nodes: int
    n_forgotten: int
    att_entropy: float
    localized_node: Optional[int]
    delta: str
    newly_forgotten: list[int]
    att_node_ids: list[int]
    att_scores: list[float]
    ltm_delta: float
    subgoal: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AgentState:
    graph: tm.TopoGraph
    goal_idx: int = 0
    pending_ids: tuple[int, ...] = ()
    pending_scores: Optional[np.ndarray] = None
    policy: str = "planner"
    t: int = 0


@dataclass
class PlannerMemory:
    """Simulator-side bookkeeping the planner is allowed to use."""

    seen: np.ndarray
    visited: np.ndarray
    exhausted: set = field(default_factory=set)
    reached: set = field(default_factory=set)

    @classmethod
    def fresh(cls, grid: GridMap) -> "PlannerMemory":
        return cls(np.zeros(grid.walls.shape, bool), np.zeros(grid.walls.shape, bool))

    def new_leg(self):
        self.exhausted.clear()
        self.reached.clear()


def normalized_entropy(scores: np.ndarray) -> float:
    s = np.asarray(scores, dtype=float)
    if s.size < 2:
        return 0.0
    s = s / s.sum()
    nz = s[s > 0]
    return float(-(nz * np.log(nz)).sum() / math.log(s.size))


def _nearest(grid: GridMap, origin: gw.Cell, mask: np.ndarray) -> Optional[gw.Cell]:
    field_ = grid.distance_field(origin)
    cand = mask & (field_ > 0)
    if not cand.any():
        return None
    dist = np.where(cand, field_, np.iinfo(field_.dtype).max)
    flat = int(np.argmin(dist))  # row-major -> lowest (y, x) on ties
    y, x = divmod(flat, grid.width)
    return (x, y)


def planner_policy(
    grid: GridMap,
    pose: Pose,
    goal: gw.Cell,
    e_cur: np.ndarray,
    e_target: np.ndarray,
    node_ids: Sequence[int],
    alpha: np.ndarray,
    graph: tm.TopoGraph,
    memory: PlannerMemory,
    cfg: EngineConfig,
    view_radius: int,
) -> tuple[Action, Optional[int]]:
    """Deterministic stand-in policy driven by target-decoder attention.

    Returns the action and the chosen subgoal node (None while exploring).
    """
    cos = float(e_cur @ e_target / (np.linalg.norm(e_cur) * np.linalg.norm(e_target)))
    if cos > cfg.goal_sim and gw.success_check(grid, pose, goal, cfg.success_radius):
        return Action.STOP, None

    alpha = np.asarray(alpha, dtype=float)
    if alpha.size and normalized_entropy(alpha) < cfg.entropy_threshold:
        order = sorted(range(len(node_ids)), key=lambda k: (-alpha[k], node_ids[k]))
        for k in order:
            node = node_ids[k]
            if node in memory.exhausted:
                continue
            target_cell = graph.node_meta[node].cell
            if node not in memory.reached and pose.cell != target_cell:
                return gw.action_toward(grid, pose, target_cell), node
            memory.reached.add(node)
            # sweep unvisited cells around the subgoal
            ys, xs = np.ogrid[: grid.height, : grid.width]
            near = (np.abs(xs - target_cell[0]) <= view_radius) & (np.abs(ys - target_cell[1]) <= view_radius)
            cell = _nearest(grid, pose.cell, near & ~memory.visited & ~grid.walls)
            if cell is not None:
                return gw.action_toward(grid, pose, cell), node
            memory.exhausted.add(node)
            break

    cell = _nearest(grid, pose.cell, ~memory.seen & ~grid.walls)
    if cell is None:
        cell = _nearest(grid, pose.cell, ~memory.visited & ~grid.walls)
    if cell is None:
        return Action.TURN_LEFT, None
    return gw.action_toward(grid, pose, cell), None


def learned_policy(
    f_cur: np.ndarray,
    f_target: np.ndarray,
    e_cur: np.ndarray,
    params: nn.Params,
    rng: Optional[np.random.Generator] = None,
    greedy: bool = False,
) -> tuple[Action, np.ndarray]:
    _, probs = nn.policy_distribution(f_cur, f_target, e_cur, params["policy.W"], params["policy.b"])
    if greedy or rng is None:
        return Action(int(np.argmax(probs))), probs
    return Action(int(rng.choice(nn.N_ACTIONS, p=probs))), probs


def step_options(cfg: EngineConfig, n_active: int, rng: np.random.Generator) -> nn.StepOptions:
    replace = int(rng.integers(n_active)) if cfg.random_replace_ltm and not cfg.no_ltm else None
    return nn.StepOptions(use_global_key=not cfg.no_decode_ltm, replace_global_with=replace)


def aligned_scores(graph: tm.TopoGraph, ids: Sequence[int], scores: np.ndarray) -> np.ndarray:
    """Scores for the current active nodes; nodes without a score (the current node) get +inf."""
    lookup = dict(zip(ids, scores))
    return np.array([lookup.get(i, np.inf) for i in graph.active_ids()])


def apply_forgetting(
    state: AgentState, cfg: EngineConfig, rng: np.random.Generator
) -> set[int]:
    if not cfg.forgetting_active or state.pending_scores is None:
        return set()
    g = state.graph
    if cfg.random_forget:
        scores = rng.random(len(g.active_ids()))
    else:
        scores = aligned_scores(g, state.pending_ids, state.pending_scores)
    return tm.forget(g, scores, cfg.p)


class Navigator:
    """Runs one episode with the given weights and configuration."""

    def __init__(
        self,
        grid: GridMap,
        episode: Episode,
        params: nn.Params,
        cfg: EngineConfig,
        obs_cfg: ObservationConfig,
    ):
        d = nn.dims(params)[0]
        if d != obs_cfg.feature_dim:
            raise ValueError(f"weights have d={d}, observations d={obs_cfg.feature_dim}")
        self.grid = grid
        self.episode = episode
        self.params = params
        self.cfg = cfg
        self.obs_cfg = obs_cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.noise_rng = np.random.default_rng([cfg.seed, obs_cfg.rng_seed])
        self.state = AgentState(tm.TopoGraph(d, exempt_last=cfg.exempt_last), policy=cfg.policy)
        self.pose = episode.start
        self.e_target = self.goal_embedding(0)
        self.memory = PlannerMemory.fresh(grid)
        self.path_len = 0
        self.goals_reached = 0
        self.done = False
        self.success = False
        self.records: list[TrajectoryRecord] = []
        self.last_output: Optional[nn.StepOutput] = None

    def goal_embedding(self, k: int) -> np.ndarray:
        gx, gy = self.episode.goals[k]
        return gw.observe(self.grid, Pose(gx, gy, 0), self.obs_cfg, self.noise_rng)

    @property
    def goal(self) -> gw.Cell:
        return self.episode.goals[self.state.goal_idx]

    def agent_step(self) -> tuple[Action, TrajectoryRecord]:
        st, g, cfg = self.state, self.state.graph, self.cfg
        e_cur = gw.observe(self.grid, self.pose, self.obs_cfg, self.noise_rng)
        loc, _ = tm.localize(g, e_cur, cfg.s_th)
        delta = tm.update_map(g, e_cur, loc, meta=self.pose)
        newly = apply_forgetting(st, cfg, self.rng)

        view = tm.active_view(g, include_global=not cfg.no_ltm)
        opts = step_options(cfg, len(view.node_ids), self.rng)
        out = nn.forward_step(self.params, view, self.e_target, e_cur, opts)
        self.last_output = out
        old_global = g.global_feature
        if out.new_global is not None:
            g.global_feature = out.new_global
        ltm_delta = float(np.linalg.norm(g.global_feature - old_global))

        n_active = len(view.node_ids)
        alpha_target = nn.extract_forgetting_scores(out.report_target, n_active, cfg.head_reduce)
        source = out.report_cur if cfg.deccur_scores else out.report_target
        st.pending_ids = view.node_ids
        st.pending_scores = nn.extract_forgetting_scores(source, n_active, cfg.head_reduce)

        cells = gw.visible_cells(self.grid, self.pose.cell, self.obs_cfg.view_radius)
        self.memory.seen[cells[:, 1], cells[:, 0]] = True
        self.memory.visited[self.pose.y, self.pose.x] = True

        subgoal = None
        if cfg.policy == "planner":
            action, subgoal = planner_policy(
                self.grid, self.pose, self.goal, e_cur, self.e_target, view.node_ids, alpha_target, g,
                self.memory, cfg, self.obs_cfg.view_radius,
            )
        else:
            action, _ = learned_policy(out.f_cur, out.f_target, e_cur, self.params, self.rng, cfg.greedy)

        rec = TrajectoryRecord(
            t=st.t,
            pose=self.pose.to_dict(),
            action=int(action),
            goal_idx=st.goal_idx,
            n_nodes=g.n_nodes,
            n_forgotten=len(g.forgotten),
            att_entropy=out.report_target.entropy(),
            localized_node=g.last_localized,
            delta=delta.kind.value,
            newly_forgotten=sorted(newly),
            att_node_ids=list(view.node_ids),
            att_scores=[float(v) for v in st.pending_scores],
            ltm_delta=ltm_delta,
            subgoal=subgoal,
        )
        return action, rec

    def on_goal_reached(self) -> None:
        st = self.state
        tm.restore_all(st.graph)
        self.goals_reached += 1
        st.pending_ids, st.pending_scores = (), None
        if st.goal_idx == self.episode.n_goals - 1:
            self.done = True
            self.success = True
            return
        st.goal_idx += 1
        self.e_target = self.goal_embedding(st.goal_idx)
        self.memory.new_leg()

    def advance(self) -> TrajectoryRecord:
        """One agent step plus the environment transition."""
        if self.done:
            raise RuntimeError("episode already finished")
        action, rec = self.agent_step()
        self.records.append(rec)
        if action == Action.STOP:
            if gw.success_check(self.grid, self.pose, self.goal, self.cfg.success_radius):
                self.on_goal_reached()
            else:
                self.done = True
        else:
            new_pose = gw.step(self.grid, self.pose, action)
            if new_pose.cell != self.pose.cell:
                self.path_len += 1
            self.pose = new_pose
        self.state.t += 1
        if not self.done and self.state.t >= self.cfg.budget:
            self.done = True
        return rec

    def run(self) -> "EpisodeRun":
        while not self.done:
            self.advance()
        return EpisodeRun(self.records, self.result())

    def result(self) -> EpisodeResult:
        return EpisodeResult(
            n_goals=self.episode.n_goals,
            goals_reached=self.goals_reached,
            success=self.success,
            shortest=self.episode.total_geodesic,
            path_len=self.path_len,
            steps=self.state.t,
            episode_id=self.episode.episode_id,
        )


@dataclass
class EpisodeRun:
    records: list[TrajectoryRecord]
    result: EpisodeResult

    def active_fraction(self) -> float:
        """Mean share of map nodes that were encoded per step."""
        fr = [(r.n_nodes - r.n_forgotten) / r.n_nodes for r in self.records]
        return float(np.mean(fr))


def run_episode(
    grid: GridMap,
    episode: Episode,
    params: nn.Params,
    cfg: EngineConfig,
    obs_cfg: ObservationConfig,
) -> EpisodeRun:
    return Navigator(grid, episode, params, cfg, obs_cfg).run()


# ---------------------------------------------------------------------------
# imitation learning


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    train_with_forgetting: bool = False
    checkpoint_every: int = 0  # epochs; 0 disables


@dataclass
class TrainResult:
    params: nn.Params
    step_losses: list[float]
    epoch_losses: list[float]
    initial_loss: float


class Adam:
    def __init__(self, params: nn.Params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params: nn.Params, grads: nn.Params) -> None:
        c = self.cfg
        self.t += 1
        b1t = 1 - c.beta1**self.t
        b2t = 1 - c.beta2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            params[k] -= c.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + c.adam_eps)


def teacher_pass(
    grid: GridMap,
    episode: Episode,
    params: nn.Params,
    cfg: EngineConfig,
    obs_cfg: ObservationConfig,
    grads: Optional[nn.Params] = None,
    forgetting: bool = False,
) -> float:
    """Replay the shortest-path teacher through the memory pipeline.

    Returns the mean per-step NLL of the teacher actions.  When ``grads`` is
    given the gradient of that mean is accumulated into it; the incoming
    global feature of every step is treated as a constant.
    """
    actions = gw.teacher_actions(grid, episode)
    d = nn.dims(params)[0]
    rng = np.random.default_rng(cfg.seed)
    state = AgentState(tm.TopoGraph(d, exempt_last=cfg.exempt_last))
    fcfg = cfg if forgetting else EngineConfig(**{**asdict(cfg), "forgetting": False})
    pose = episode.start
    k = 0
    noise_rng = np.random.default_rng([cfg.seed, obs_cfg.rng_seed])
    gx, gy = episode.goals[0]
    e_target = gw.observe(grid, Pose(gx, gy, 0), obs_cfg, noise_rng)
    total = 0.0
    scale = 1.0 / len(actions)
    for a in actions:
        g = state.graph
        e_cur = gw.observe(grid, pose, obs_cfg, noise_rng)
        loc, _ = tm.localize(g, e_cur, cfg.s_th)
        tm.update_map(g, e_cur, loc, meta=pose)
        apply_forgetting(state, fcfg, rng)
        view = tm.active_view(g, include_global=not cfg.no_ltm)
        opts = step_options(cfg, len(view.node_ids), rng)
        out = nn.forward_step(params, view, e_target, e_cur, opts)
        total += nn.step_nll(out, int(a))
        if grads is not None:
            nn.backward_step(params, out, int(a), grads, scale)
        if out.new_global is not None:
            g.global_feature = out.new_global
        n_active = len(view.node_ids)
        source = out.report_cur if cfg.deccur_scores else out.report_target
        state.pending_ids = view.node_ids
        state.pending_scores = nn.extract_forgetting_scores(source, n_active, cfg.head_reduce)
        if a == Action.STOP:
            tm.restore_all(g)
            state.pending_ids, state.pending_scores = (), None
            k += 1
            if k < episode.n_goals:
                gx, gy = episode.goals[k]
                e_target = gw.observe(grid, Pose(gx, gy, 0), obs_cfg, noise_rng)
        else:
            pose = gw.step(grid, pose, a)
    loss = total * scale
    if not math.isfinite(loss):
        raise nn.NumericalError(f"non-finite loss on episode {episode.episode_id or episode.scene_id}")
    return loss


def dataset_loss(
    dataset: Sequence[tuple[GridMap, Episode]],
    params: nn.Params,
    cfg: EngineConfig,
    obs_cfg: ObservationConfig,
) -> float:
    return float(np.mean([teacher_pass(g, ep, params, cfg, obs_cfg) for g, ep in dataset]))


def train_imitation(
    dataset: Sequence[tuple[GridMap, Episode]],
    params: nn.Params,
    tcfg: TrainConfig,
    cfg: EngineConfig,
    obs_cfg: ObservationConfig,
    on_epoch: Optional[Callable[[int, nn.Params, float], None]] = None,
) -> TrainResult:
    """Adam on the teacher NLL; one gradient step per episode, epochs reshuffled by seed."""
    params = nn.copy_params(params)
    rng = np.random.default_rng(tcfg.seed)
    opt = Adam(params, tcfg)
    initial = dataset_loss(dataset, params, cfg, obs_cfg)
    step_losses: list[float] = []
    epoch_losses: list[float] = []
    order: list[int] = []
    epoch_acc: list[float] = []
    epoch = 0
    for s in range(tcfg.steps):
        if not order:
            order = list(rng.permutation(len(dataset)))
        grid, ep = dataset[order.pop()]
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        loss = teacher_pass(grid, ep, params, cfg, obs_cfg, grads, tcfg.train_with_forgetting)
        if not all(np.isfinite(g).all() for g in grads.values()):
            raise nn.NumericalError(f"non-finite gradient at step {s}")
        opt.update(params, grads)
        step_losses.append(loss)
        epoch_acc.append(loss)
        if not order:
            epoch_losses.append(float(np.mean(epoch_acc)))
            epoch_acc = []
            epoch += 1
            log.info("epoch %d mean nll %.4f", epoch, epoch_losses[-1])
            if on_epoch is not None:
                on_epoch(epoch, params, epoch_losses[-1])
    if epoch_acc:
        epoch_losses.append(float(np.mean(epoch_acc)))
    return TrainResult(params, step_losses, epoch_losses, initial)
