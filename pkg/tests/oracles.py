"""Independent reference implementations used as test oracles.

Everything here is written from the definitions with plain loops or dense
matrices, sharing no code paths with the package beyond the simulator calls
that define the environment (observe, step, success_check).
"""
from __future__ import annotations

import heapq
import math
from fractions import Fraction

import numpy as np

from wmnav import gridworld as gw

MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))


def dijkstra(walls: np.ndarray, a, b):
    """Unit-weight Dijkstra on the 4-connected free cells; None when unreachable."""
    h, w = walls.shape
    best = {a: 0}
    heap = [(0, a)]
    while heap:
        dist, (x, y) = heapq.heappop(heap)
        if (x, y) == b:
            return dist
        if dist > best[(x, y)]:
            continue
        for dx, dy in MOVES:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and not walls[ny, nx]:
                if dist + 1 < best.get((nx, ny), math.inf):
                    best[(nx, ny)] = dist + 1
                    heapq.heappush(heap, (dist + 1, (nx, ny)))
    return None


def flood_components(walls: np.ndarray) -> dict:
    """cell -> component index via iterative DFS."""
    h, w = walls.shape
    comp = {}
    k = 0
    for y in range(h):
        for x in range(w):
            if walls[y, x] or (x, y) in comp:
                continue
            stack = [(x, y)]
            comp[(x, y)] = k
            while stack:
                cx, cy = stack.pop()
                for dx, dy in MOVES:
                    n = (cx + dx, cy + dy)
                    if 0 <= n[0] < w and 0 <= n[1] < h and not walls[n[1], n[0]] and n not in comp:
                        comp[n] = k
                        stack.append(n)
            k += 1
    return comp


def rule_violations(walls: np.ndarray, ep: gw.Episode, d_max=40, r_final=6, min_leg=3) -> list[str]:
    """Re-verify the five dataset rules (plus leg bookkeeping) from scratch."""
    h, w = walls.shape
    bad = []
    for gx, gy in ep.goals:
        ring = [(gx + dx, gy + dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)]
        if any(not (0 <= x < w and 0 <= y < h) or walls[y, x] for x, y in ring):
            bad.append("1")
            break
    points = [ep.start.cell, *ep.goals]
    legs = [dijkstra(walls, a, b) for a, b in zip(points, points[1:])]
    if any(l is None or l > d_max for l in legs):
        bad.append("2")
    comp = flood_components(walls)
    if len({comp.get(p) for p in points}) != 1 or None in {comp.get(p) for p in points}:
        bad.append("3")
    if any(dijkstra(walls, a, b) is None for a in points for b in points):
        bad.append("4")
    if ep.n_goals >= 2:
        last = ep.goals[-1]
        if not any((dd := dijkstra(walls, g, last)) is not None and dd <= r_final for g in ep.goals[:-1]):
            bad.append("5")
    if any(l is not None and l < min_leg for l in legs):
        bad.append("min_leg")
    if list(ep.leg_geodesics) != legs or ep.total_geodesic != sum(l or 0 for l in legs):
        bad.append("legs")
    return bad


# ---------------------------------------------------------------------------
# neural references


def leaky(x, slope=0.2):
    return x if x > 0 else slope * x


def dense_gatv2(H: np.ndarray, A: np.ndarray, W: np.ndarray, a: np.ndarray, activate: bool):
    """Scores for every (receiver, sender) pair, masked by adjacency ``A[i, j]``.

    Returns (output, attention matrix).
    """
    n, d = H.shape
    Wr, Ws = W[:, :d], W[:, d:]
    scores = np.full((n, n), -np.inf)
    for i in range(n):
        for j in range(n):
            if A[i, j]:
                z = Wr @ H[i] + Ws @ H[j]
                scores[i, j] = sum(a[k] * leaky(z[k]) for k in range(d))
    att = np.zeros((n, n))
    for i in range(n):
        row = scores[i]
        m = row[np.isfinite(row)].max()
        e = np.where(np.isfinite(row), np.exp(row - m), 0.0)
        att[i] = e / e.sum()
    Y = att @ (H @ Ws.T)
    if activate:
        Y = np.where(Y > 0, Y, np.exp(np.minimum(Y, 0)) - 1.0)
    return Y, att


def reference_attention(query, keys, Wq, Wk, Wv, Wo, bo):
    """softmax(q K^T / sqrt(d_k)) V per head, concatenated and projected."""
    heads = []
    weights = []
    for h in range(Wq.shape[0]):
        q = Wq[h] @ query
        K = keys @ Wk[h].T
        V = keys @ Wv[h].T
        s = K @ q / math.sqrt(Wq.shape[1])
        s = np.exp(s - s.max())
        s = s / s.sum()
        weights.append(s)
        heads.append(s @ V)
    return Wo @ np.concatenate(heads) + bo, np.array(weights)


def dense_encode(params, feats: np.ndarray, A: np.ndarray, e_target: np.ndarray):
    d = feats.shape[1]
    Z = np.array([params["fuse.W"] @ np.concatenate([f, e_target]) + params["fuse.b"] for f in feats])
    L = sum(1 for k in params if k.endswith(".a"))
    for l in range(L):
        Z, _ = dense_gatv2(Z, A, params[f"gat{l}.W"], params[f"gat{l}.a"], activate=l < L - 1)
    assert Z.shape[1] == d
    return Z


# ---------------------------------------------------------------------------
# metrics by hand, in exact arithmetic


def hand_metrics(rows):
    """rows: (success, progress, l, p) tuples -> dict of exact Fractions."""
    E = len(rows)
    sr = Fraction(sum(1 for s, *_ in rows if s), E)
    pr = sum((Fraction(pg) for _, pg, _, _ in rows), Fraction(0)) / E
    spl = sum((Fraction(int(s)) * Fraction(l) / max(Fraction(p), Fraction(l)) for s, _, l, p in rows), Fraction(0)) / E
    ppl = sum((Fraction(pg) * Fraction(l) / max(Fraction(p), Fraction(l)) for _, pg, l, p in rows), Fraction(0)) / E
    return {"sr": sr, "pr": pr, "spl": spl, "ppl": ppl}


# ---------------------------------------------------------------------------
# step-by-step replay of a navigation run


class ReplayGraph:
    """Plain-container map memory: lists, sets and dicts only."""

    def __init__(self, d):
        self.feats = []
        self.edges = set()
        self.last = None
        self.forgotten = set()
        self.glob = np.zeros(d)

    def active(self):
        return [i for i in range(len(self.feats)) if i not in self.forgotten]

    def adjacency(self, ids, with_global=True):
        n = len(ids) + (1 if with_global else 0)
        A = np.eye(n)
        pos = {v: k for k, v in enumerate(ids)}
        for a, b in self.edges:
            if a in pos and b in pos:
                A[pos[a], pos[b]] = A[pos[b], pos[a]] = 1
        if with_global:
            A[-1, :] = 1
            A[:, -1] = 1
        return A


def replay(grid, episode, params, cfg, obs_cfg, records):
    """Recompute every logged quantity of ``records`` independently; return mismatch messages."""
    d = obs_cfg.feature_dim
    g = ReplayGraph(d)
    pose = episode.start
    k = 0
    tgt = gw.observe(grid, gw.Pose(*episode.goals[0], 0), obs_cfg)
    pending = None  # (ids, scores)
    problems = []
    for rec in records:
        t = rec["t"]
        if rec["pose"] != pose.to_dict():
            problems.append(f"t={t}: pose {rec['pose']} vs replay {pose.to_dict()}")
            break
        e = gw.observe(grid, pose, obs_cfg)
        # localization over all nodes
        loc = None
        if g.feats:
            sims = [float(f @ e / (np.linalg.norm(f) * np.linalg.norm(e))) for f in g.feats]
            best = max(range(len(sims)), key=lambda i: (sims[i], -i))
            loc = best if sims[best] > cfg.s_th else None
        if loc is None:
            g.feats.append(e.copy())
            new = len(g.feats) - 1
            if g.last is not None:
                g.edges.add(frozenset((new, g.last)))
            g.last = new
        else:
            g.forgotten.discard(loc)
            if loc != g.last:
                if g.last is not None:
                    g.edges.add(frozenset((loc, g.last)))
                g.feats[loc] = e.copy()
                g.last = loc
        # forgetting with the previous step's scores
        newly = set()
        if pending is not None and cfg.p > 0 and cfg.forgetting:
            ids, scores = pending
            lookup = dict(zip(ids, scores))
            act = g.active()
            n = math.floor(cfg.p * len(act))
            ranked = sorted(act, key=lambda i: (lookup.get(i, math.inf), i))[:n]
            newly = {i for i in ranked if i != g.last}
            g.forgotten |= newly
        if rec["n_nodes"] != len(g.feats) or rec["n_forgotten"] != len(g.forgotten):
            problems.append(f"t={t}: node bookkeeping differs")
        if sorted(newly) != rec["newly_forgotten"]:
            problems.append(f"t={t}: forgotten {rec['newly_forgotten']} vs replay {sorted(newly)}")
        if rec["localized_node"] != g.last:
            problems.append(f"t={t}: localized {rec['localized_node']} vs replay {g.last}")
        # encode and decode with dense references
        ids = g.active()
        feats = np.array([g.feats[i] for i in ids] + [g.glob])
        M = dense_encode(params, feats, g.adjacency(ids), tgt)
        g.glob = M[-1].copy()
        _, w = reference_attention(tgt, M, *(params[f"dec_target.{n}"] for n in ("Wq", "Wk", "Wv", "Wo", "bo")))
        scores = w.mean(axis=0)[: len(ids)]
        if list(ids) != rec["att_node_ids"] or not np.allclose(scores, rec["att_scores"], atol=1e-10, rtol=0):
            problems.append(f"t={t}: attention scores differ")
        pending = (ids, scores)
        # environment transition
        a = gw.Action(rec["action"])
        if a == gw.Action.STOP:
            if gw.success_check(grid, pose, episode.goals[k], cfg.success_radius):
                g.forgotten.clear()
                pending = None
                k += 1
                if k == episode.n_goals:
                    break
                tgt = gw.observe(grid, gw.Pose(*episode.goals[k], 0), obs_cfg)
            else:
                break
        else:
            pose = gw.step(grid, pose, a)
    return problems
