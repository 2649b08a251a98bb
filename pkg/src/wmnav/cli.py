"""Command-line interface: datasets, training, evaluation, sweeps, ablations, traces.

Every run is described by a flat ``key = value`` config (see ``RunConfig``).
Values come from the defaults, then an optional ``--config`` file, then
command-line flags (each config key is also a ``--flag``).  The resolved
config is written next to every output.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import agent as ag
from . import gridworld as gw
from . import metrics as mt
from . import neural as nn
from . import topomem as tm

log = logging.getLogger("wmnav")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

ABLATIONS = ("no_ltm", "random_replace_ltm", "no_decode_ltm", "random_forget", "deccur_scores")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    # data
    scene_dir: str = "scenes"
    dataset: str = "data"
    out: str = "runs/out"
    goals: str = "1,2,3,4"
    episodes: int = 50
    n_maps: int = 14
    size: int = 32
    kind: str = "scene"  # scene | maze
    # memory and agent
    p: float = 0.2
    forgetting: bool = True
    p_by_goals: str = ""  # e.g. "3:0.1,4:0.1" overrides p for those goal counts
    s_th: float = 0.75
    policy: str = "planner"
    weights: str = ""
    budget: int = gw.STEP_BUDGET
    success_radius: int = 2
    exempt_last: bool = True
    head_reduce: str = "mean"
    greedy: bool = False
    # ablations
    no_ltm: bool = False
    random_replace_ltm: bool = False
    no_decode_ltm: bool = False
    random_forget: bool = False
    deccur_scores: bool = False
    train_with_forgetting: bool = False
    # network and observations
    d: int = 64
    heads: int = nn.N_HEADS
    layers: int = nn.N_LAYERS
    view_radius: int = 3
    noise_std: float = 0.0
    # planner
    sharpness: float = 96.0
    locality: float = 5.0
    entropy_threshold: float = 0.38
    goal_sim: float = 0.5
    # training
    lr: float = 3e-3
    steps: int = 2000
    checkpoint_every: int = 0
    # run control
    seed: int = 0
    seeds: int = 1
    workers: int = 1
    bins: int = 20
    ps: str = "0,0.2,0.4,0.6,0.8"
    ablations: str = "full," + ",".join(ABLATIONS)
    sth_values: str = "0.5,0.6,0.7,0.75,0.8,0.85,0.9,0.95,1.0"
    episode_id: str = ""

    def validate(self) -> "RunConfig":
        if not 0.0 <= self.p <= 1.0:
            raise UsageError("p must lie in [0, 1]")
        for n, p in self.p_map().items():
            if not 0.0 <= p <= 1.0:
                raise UsageError(f"p for {n} goals must lie in [0, 1]")
        if not set(self.goal_counts()) <= {1, 2, 3, 4}:
            raise UsageError("goal counts must be a subset of {1, 2, 3, 4}")
        if self.budget <= 0:
            raise UsageError("budget must be positive")
        if self.policy not in ("planner", "learned"):
            raise UsageError(f"unknown policy {self.policy!r}")
        if self.kind not in ("scene", "maze"):
            raise UsageError(f"unknown map kind {self.kind!r}")
        if self.workers < 1 or self.seeds < 1:
            raise UsageError("workers and seeds must be at least 1")
        return self

    def goal_counts(self) -> list[int]:
        return _int_list(self.goals)

    def p_map(self) -> dict[int, float]:
        out = {}
        for item in filter(None, (s.strip() for s in self.p_by_goals.split(","))):
            try:
                k, v = item.split(":")
                out[int(k)] = float(v)
            except ValueError as exc:
                raise UsageError(f"bad p_by_goals entry {item!r}, expected N:P") from exc
        return out

    def p_for(self, n_goals: int) -> float:
        return self.p_map().get(n_goals, self.p)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated number list, got {text!r}") from exc


def _coerce(name: str, kind: type, raw: str):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw.strip())
    except ValueError as exc:
        raise UsageError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from exc


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _field_types() -> dict[str, type]:
    return {f.name: _TYPES[f.type] for f in fields(RunConfig)}


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    types = _field_types()
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: cannot read config ({exc.strerror})") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def resolve_config(config_path: Optional[str], overrides: dict[str, Optional[str]]) -> RunConfig:
    types = _field_types()
    raw: dict[str, str] = {}
    if config_path:
        raw.update(read_config_file(config_path))
    raw.update({k: v for k, v in overrides.items() if v is not None})
    values = {k: _coerce(k, types[k], v) for k, v in raw.items()}
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# inputs


def load_scenes(scene_dir: str | Path) -> dict[str, gw.GridMap]:
    scene_dir = Path(scene_dir)
    if not scene_dir.is_dir():
        raise DataError(f"{scene_dir}: scene directory not found")
    scenes = {}
    for path in sorted(scene_dir.glob("*.map")):
        try:
            scenes[path.stem] = gw.load_map(path)
        except (OSError, UnicodeDecodeError) as exc:
            raise DataError(f"{path}: unreadable scene file ({exc})") from exc
        except gw.MapFormatError as exc:
            raise DataError(f"{path}: {exc}") from exc
    if not scenes:
        raise DataError(f"{scene_dir}: no *.map files")
    return scenes


def dataset_files(dataset: str | Path) -> list[Path]:
    path = Path(dataset)
    if path.is_dir():
        files = sorted(path.glob("goals*.jsonl"))
        if not files:
            raise DataError(f"{path}: no goals*.jsonl dataset files")
        return files
    if not path.exists():
        raise DataError(f"{path}: dataset not found")
    return [path]


def load_episodes(rc: RunConfig, scenes: dict[str, gw.GridMap]) -> list[gw.Episode]:
    episodes = []
    for f in dataset_files(rc.dataset):
        try:
            episodes.extend(gw.read_episodes(f))
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
    wanted = set(rc.goal_counts())
    episodes = [ep for ep in episodes if ep.n_goals in wanted]
    for i, ep in enumerate(episodes):
        if ep.scene_id not in scenes:
            raise DataError(f"episode {ep.episode_id or i} refers to unknown scene {ep.scene_id!r}")
        if not ep.episode_id:
            episodes[i] = dataclasses.replace(ep, episode_id=f"{ep.scene_id}-{ep.n_goals}g-{i:05d}")
    ids = [ep.episode_id for ep in episodes]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate episode ids in dataset")
    if not episodes:
        raise DataError("no episodes match the requested goal counts")
    return sorted(episodes, key=lambda ep: ep.episode_id)


def obs_config(rc: RunConfig) -> gw.ObservationConfig:
    return gw.ObservationConfig(view_radius=rc.view_radius, feature_dim=rc.d, noise_std=rc.noise_std, rng_seed=rc.seed)


def load_weights(rc: RunConfig) -> nn.Params:
    if rc.policy == "learned":
        if not rc.weights:
            raise UsageError("learned policy needs --weights")
        try:
            params = nn.load_params(rc.weights)
        except FileNotFoundError as exc:
            raise DataError(f"{rc.weights}: weights file not found") from exc
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"{rc.weights}: bad weights file ({exc})") from exc
        d = nn.dims(params)[0]
        if d != rc.d:
            log.info("using d=%d from the weights file", d)
            rc.d = d
        return params
    if rc.weights:
        try:
            return nn.load_params(rc.weights)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"{rc.weights}: bad weights file ({exc})") from exc
    return nn.goal_matching_params(rc.d, rc.heads, sharpness=rc.sharpness, locality=rc.locality)


def engine_config(rc: RunConfig, n_goals: int, seed: int, **overrides) -> ag.EngineConfig:
    kw = dict(
        p=rc.p_for(n_goals),
        forgetting=rc.forgetting,
        s_th=rc.s_th,
        policy=rc.policy,
        budget=rc.budget,
        success_radius=rc.success_radius,
        exempt_last=rc.exempt_last,
        head_reduce=rc.head_reduce,
        no_ltm=rc.no_ltm,
        random_replace_ltm=rc.random_replace_ltm,
        no_decode_ltm=rc.no_decode_ltm,
        random_forget=rc.random_forget,
        deccur_scores=rc.deccur_scores,
        greedy=rc.greedy,
        goal_sim=rc.goal_sim,
        entropy_threshold=rc.entropy_threshold,
        seed=seed,
    )
    kw.update(overrides)
    return ag.EngineConfig(**kw)


def write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# episode execution (optionally across worker processes)

_WORKER: dict = {}


def _worker_init(scene_dir: str, params: nn.Params, obs: gw.ObservationConfig) -> None:
    _WORKER["scenes"] = load_scenes(scene_dir)
    _WORKER["params"] = params
    _WORKER["obs"] = obs


def _run_task(task: tuple[gw.Episode, ag.EngineConfig]) -> tuple[str, list[dict], dict]:
    ep, cfg = task
    run = ag.run_episode(_WORKER["scenes"][ep.scene_id], ep, _WORKER["params"], cfg, _WORKER["obs"])
    outcome = run.result.to_dict()
    outcome["active_fraction"] = run.active_fraction()
    return ep.episode_id, [r.to_dict() for r in run.records], outcome


def run_episodes(
    rc: RunConfig,
    episodes: Sequence[gw.Episode],
    params: nn.Params,
    label: str,
    out_dir: Path,
    seed: int = 0,
    **overrides,
) -> list[mt.EpisodeResult]:
    """Run every episode, write one trajectory log per episode, return results sorted by id."""
    obs = obs_config(rc)
    tasks = [(ep, engine_config(rc, ep.n_goals, seed * 1_000_003 + i, **overrides)) for i, ep in enumerate(episodes)]
    if rc.workers == 1:
        _worker_init(rc.scene_dir, params, obs)
        outputs = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(rc.workers, initializer=_worker_init, initargs=(rc.scene_dir, params, obs)) as pool:
            outputs = list(pool.map(_run_task, tasks, chunksize=4))
    outputs.sort(key=lambda o: o[0])
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = rc.to_dict()
    results = []
    for (ep_id, records, outcome), (ep, cfg) in zip(outputs, sorted(tasks, key=lambda t: t[0].episode_id)):
        outcome.update(config=label, p=cfg.p)
        with open(out_dir / f"{ep_id}.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({"outcome": outcome, "run_config": resolved}) + "\n")
        results.append(mt.EpisodeResult.from_dict(outcome))
    return results


def write_reports(rc: RunConfig, out: Path) -> list[dict]:
    table, hist = mt.aggregate(out, rc.bins)
    mt.write_table(table, out / "metrics.csv")
    mt.write_histogram(hist, out / "lnorm_hist.csv")
    return table


def _print_table(rows: Sequence[dict]) -> None:
    print(f"{'config':<24} {'goals':>5} {'eps':>5} {'SR':>6} {'PR':>6} {'SPL':>6} {'PPL':>6} {'steps':>7}")
    for r in rows:
        print(
            f"{r['config']:<24} {r['n_goals']:>5} {r['episodes']:>5} {r['sr']:>6.3f} {r['pr']:>6.3f} "
            f"{r['spl']:>6.3f} {r['ppl']:>6.3f} {r['mean_steps']:>7.1f}"
        )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_maps(rc: RunConfig) -> int:
    out = Path(rc.scene_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(rc.n_maps):
        seed = rc.seed * 10_000 + i
        if rc.kind == "maze":
            grid = gw.random_maze(rc.size | 1, rc.size | 1, seed, scene_id=f"maze{i:03d}")
        else:
            grid = gw.random_scene(rc.size, rc.size, seed, scene_id=f"scene{i:03d}")
        gw.save_map(grid, out / f"{grid.scene_id}.map")
    print(f"wrote {rc.n_maps} maps to {out}")
    return EXIT_OK


def cmd_gen_dataset(rc: RunConfig) -> int:
    scenes = load_scenes(rc.scene_dir)
    out = Path(rc.dataset)
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"config": rc.to_dict(), "goal_counts": {}, "failures": []}
    all_geodesics = []
    for n in rc.goal_counts():
        episodes = []
        for s_idx, (sid, grid) in enumerate(scenes.items()):
            for i in range(rc.episodes):
                seed = ((rc.seed * 1009 + n) * 10_007 + s_idx) * 100_003 + i
                try:
                    ep = gw.generate_episode(grid, n, rng_seed=seed, episode_id=f"{sid}-{n}g-{i:03d}")
                except gw.EpisodeGenerationError as exc:
                    summary["failures"].append({"scene": sid, "n_goals": n, "rule": exc.rule, "error": str(exc)})
                    log.warning("%s: %d-goal generation failed (rule %s), skipping scene", sid, n, exc.rule)
                    break
                episodes.append(ep)
        gw.write_episodes(out / f"goals{n}.jsonl", episodes)
        geo = [ep.total_geodesic for ep in episodes]
        all_geodesics.extend(geo)
        summary["goal_counts"][str(n)] = {
            "episodes": len(episodes),
            "mean_geodesic": float(np.mean(geo)) if geo else None,
            "max_geodesic": max(geo) if geo else None,
        }
        print(f"{n}-goal: {len(episodes)} episodes")
    hist = mt.histogram(all_geodesics, bins=rc.bins, lo=0.0, hi=float(max(all_geodesics, default=1))) if all_geodesics else []
    mt.write_histogram(hist, out / "geodesic_hist.csv")
    write_json(out / "summary.json", summary)
    return EXIT_OK


def cmd_train(rc: RunConfig) -> int:
    scenes = load_scenes(rc.scene_dir)
    episodes = load_episodes(rc, scenes)
    data = [(scenes[ep.scene_id], ep) for ep in episodes]
    out = Path(rc.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", rc.to_dict())
    params = nn.init_params(rc.d, rc.heads, seed=rc.seed, n_layers=rc.layers, uniform_policy=True)
    if rc.weights:
        params = load_weights(dataclasses.replace(rc, policy="learned"))
    tcfg = ag.TrainConfig(
        lr=rc.lr,
        steps=rc.steps,
        seed=rc.seed,
        train_with_forgetting=rc.train_with_forgetting,
        checkpoint_every=rc.checkpoint_every,
    )
    cfg = engine_config(rc, 1, rc.seed, policy="learned")
    last_good: dict = {"params": nn.copy_params(params), "epoch": 0}

    def on_epoch(epoch: int, current: nn.Params, loss: float) -> None:
        last_good["params"], last_good["epoch"] = nn.copy_params(current), epoch
        if rc.checkpoint_every and epoch % rc.checkpoint_every == 0:
            nn.save_params(current, out / "checkpoints" / f"epoch{epoch:04d}.json")
        print(f"epoch {epoch}: mean nll {loss:.4f}", flush=True)

    try:
        res = ag.train_imitation(data, params, tcfg, cfg, obs_config(rc), on_epoch)
    except nn.NumericalError:
        nn.save_params(last_good["params"], out / "weights.partial.json")
        print(f"diverged; kept epoch {last_good['epoch']} weights in {out / 'weights.partial.json'}", file=sys.stderr)
        raise
    nn.save_params(res.params, out / "weights.json")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "nll"])
        for i, v in enumerate(res.step_losses):
            w.writerow([i, repr(v)])
    with open(out / "epoch_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_nll"])
        for i, v in enumerate(res.epoch_losses, 1):
            w.writerow([i, repr(v)])
    final = ag.dataset_loss(data, res.params, cfg, obs_config(rc))
    print(f"initial nll {res.initial_loss:.4f}, final nll {final:.4f}")
    return EXIT_OK


def _eval_setup(rc: RunConfig):
    scenes = load_scenes(rc.scene_dir)
    params = load_weights(rc)
    episodes = load_episodes(rc, scenes)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", rc.to_dict())
    return params, episodes, out


def cmd_eval(rc: RunConfig) -> int:
    params, episodes, out = _eval_setup(rc)
    run_episodes(rc, episodes, params, f"p={rc.p:g}", out / "logs", rc.seed)
    _print_table(write_reports(rc, out))
    return EXIT_OK


def cmd_sweep_p(rc: RunConfig) -> int:
    params, episodes, out = _eval_setup(rc)
    for p in _float_list(rc.ps):
        if not 0.0 <= p <= 1.0:
            raise UsageError(f"sweep value {p} outside [0, 1]")
        sub = dataclasses.replace(rc, p=p, p_by_goals="")
        run_episodes(sub, episodes, params, f"p={p:g}", out / "logs" / f"p{p:g}", rc.seed)
    _print_table(write_reports(rc, out))
    return EXIT_OK


def cmd_ablate(rc: RunConfig) -> int:
    params, episodes, out = _eval_setup(rc)
    names = [a.strip() for a in rc.ablations.split(",") if a.strip()]
    for name in names:
        if name != "full" and name not in ABLATIONS:
            raise UsageError(f"unknown ablation {name!r}; choose from full, {', '.join(ABLATIONS)}")
    for name in names:
        overrides = {} if name == "full" else {name: True}
        for s in range(rc.seeds):
            run_episodes(rc, episodes, params, name, out / "logs" / name / f"seed{s}", rc.seed + s, **overrides)
    _print_table(write_reports(rc, out))
    return EXIT_OK


def teacher_poses(grid: gw.GridMap, ep: gw.Episode) -> list[gw.Pose]:
    poses = [ep.start]
    for a in gw.teacher_actions(grid, ep)[:-1]:
        poses.append(gw.step(grid, poses[-1], a))
    return poses


def localization_curve(
    data: Sequence[tuple[gw.GridMap, gw.Episode]], obs: gw.ObservationConfig, s_th: float
) -> tuple[float, float]:
    """(mean node count, localization rate) when replaying teacher paths at ``s_th``."""
    nodes, hits, steps = [], 0, 0
    for grid, ep in data:
        g = tm.TopoGraph(obs.feature_dim)
        for pose in teacher_poses(grid, ep):
            e = gw.observe(grid, pose, obs)
            loc, _ = tm.localize(g, e, s_th)
            tm.update_map(g, e, loc, meta=pose)
            hits += loc is not None
            steps += 1
        nodes.append(g.n_nodes)
    return float(np.mean(nodes)), hits / steps


def knee(xs: Sequence[float], ys: Sequence[float]) -> int:
    """Index of the point farthest from the chord joining the curve's endpoints."""
    x = np.asarray(xs, float)
    y = np.asarray(ys, float)
    if len(x) < 3:
        return 0
    xn = (x - x.min()) / (np.ptp(x) or 1.0)
    yn = (y - y.min()) / (np.ptp(y) or 1.0)
    dx, dy = xn[-1] - xn[0], yn[-1] - yn[0]
    dist = np.abs(dy * (xn - xn[0]) - dx * (yn - yn[0])) / (np.hypot(dx, dy) or 1.0)
    return int(np.argmax(dist))


def cmd_calibrate_sth(rc: RunConfig) -> int:
    scenes = load_scenes(rc.scene_dir)
    episodes = load_episodes(rc, scenes)
    data = [(scenes[ep.scene_id], ep) for ep in episodes]
    values = sorted(_float_list(rc.sth_values))
    if not values:
        raise UsageError("sth_values is empty")
    obs = obs_config(rc)
    rows = []
    for s in values:
        n, rate = localization_curve(data, obs, s)
        rows.append({"s_th": s, "mean_nodes": n, "localization_rate": rate})
        print(f"s_th={s:.3f}  nodes={n:8.2f}  localized={rate:.3f}")
    best = values[knee(values, [r["mean_nodes"] for r in rows])]
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "calibrate_sth.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["s_th", "mean_nodes", "localization_rate"])
        w.writeheader()
        w.writerows(rows)
    write_json(out / "calibrate_sth.json", {"recommended_s_th": best, "curve": rows, "config": rc.to_dict()})
    print(f"recommended s_th: {best}")
    return EXIT_OK


def cmd_export_trace(rc: RunConfig) -> int:
    scenes = load_scenes(rc.scene_dir)
    params = load_weights(rc)
    episodes = load_episodes(rc, scenes)
    if rc.episode_id:
        chosen = [ep for ep in episodes if ep.episode_id == rc.episode_id]
        if not chosen:
            raise DataError(f"episode {rc.episode_id!r} not in dataset")
        ep = chosen[0]
    else:
        ep = episodes[0]
    nav = ag.Navigator(scenes[ep.scene_id], ep, params, engine_config(rc, ep.n_goals, rc.seed), obs_config(rc))
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"trace_{ep.episode_id}.jsonl"
    with open(path, "w") as fh:
        while not nav.done:
            rec = nav.advance().to_dict()
            rec["graph"] = nav.state.graph.snapshot()
            fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps({"outcome": nav.result().to_dict(), "run_config": rc.to_dict()}) + "\n")
    print(f"wrote {len(nav.records)} steps to {path}")
    return EXIT_OK


COMMANDS = {
    "gen-maps": (cmd_gen_maps, "write random ASCII maps into scene_dir"),
    "gen-dataset": (cmd_gen_dataset, "generate multi-goal episode datasets"),
    "train": (cmd_train, "imitation-train the learned policy"),
    "eval": (cmd_eval, "run episodes and write logs plus metrics"),
    "sweep-p": (cmd_sweep_p, "evaluate over several forgetting fractions"),
    "ablate": (cmd_ablate, "evaluate ablation modes over several seeds"),
    "calibrate-sth": (cmd_calibrate_sth, "sweep the localization threshold"),
    "export-trace": (cmd_export_trace, "per-step trace with graph snapshots"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wmnav", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="flat key = value config file")
        group = sp.add_argument_group("config keys (override the config file)")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            if f.type == "bool":
                group.add_argument(flag, dest=f.name, nargs="?", const="true", default=None, metavar="BOOL")
            else:
                group.add_argument(flag, dest=f.name, default=None, metavar=f.type.upper())
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported by argparse
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    func = COMMANDS[args.command][0]
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        rc = resolve_config(args.config, overrides)
        return func(rc)
    except UsageError as exc:
        print(f"wmnav: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except nn.NumericalError as exc:
        print(f"wmnav: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, mt.MetricsError, gw.MapFormatError, gw.InvalidPoseError, OSError) as exc:
        print(f"wmnav: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
