"""Memory encoder/decoder numerics with hand-written reverse mode.

Parameters live in a flat ``dict[str, np.ndarray]``:

* ``fuse.W`` (d, 2d), ``fuse.b`` (d,): goal fusion applied to every row.
* ``gat{l}.W`` (d, 2d), ``gat{l}.a`` (d,): GATv2 layer ``l``.  The left half
  transforms the receiving node, the right half the sending node; the right
  half also produces the messages.
* ``{dec}.Wq``, ``{dec}.Wk``, ``{dec}.Wv`` (H, d/H, d), ``{dec}.Wo`` (d, d),
  ``{dec}.bo`` (d,) for ``dec`` in ``dec_cur`` and ``dec_target``.
* ``policy.W`` (4, 3d), ``policy.b`` (4,).

Everything is float64.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .topomem import ActiveView

LEAKY_SLOPE = 0.2
N_LAYERS = 3
N_HEADS = 4
N_ACTIONS = 4
DECODERS = ("dec_cur", "dec_target")
WEIGHTS_VERSION = 1

Params = dict


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


class StaleReportError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameters


def param_shapes(d: int, n_heads: int = N_HEADS, n_layers: int = N_LAYERS) -> dict[str, tuple[int, ...]]:
    if d % n_heads:
        raise ShapeError(f"d={d} is not divisible by H={n_heads}")
    dh = d // n_heads
    shapes: dict[str, tuple[int, ...]] = {"fuse.W": (d, 2 * d), "fuse.b": (d,)}
    for l in range(n_layers):
        shapes[f"gat{l}.W"] = (d, 2 * d)
        shapes[f"gat{l}.a"] = (d,)
    for dec in DECODERS:
        for name in ("Wq", "Wk", "Wv"):
            shapes[f"{dec}.{name}"] = (n_heads, dh, d)
        shapes[f"{dec}.Wo"] = (d, d)
        shapes[f"{dec}.bo"] = (d,)
    shapes["policy.W"] = (N_ACTIONS, 3 * d)
    shapes["policy.b"] = (N_ACTIONS,)
    return shapes


def init_params(
    d: int = 32,
    n_heads: int = N_HEADS,
    seed: int = 0,
    n_layers: int = N_LAYERS,
    uniform_policy: bool = False,
) -> Params:
    """Uniform init in [-1/sqrt(d), 1/sqrt(d)] for every array, including biases.

    With ``uniform_policy`` the action head starts at zero, so every action has
    probability 1/4 and the initial NLL is exactly ln 4.
    """
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d)
    params = {
        name: rng.uniform(-bound, bound, size=shape)
        for name, shape in param_shapes(d, n_heads, n_layers).items()
    }
    if uniform_policy:
        params["policy.W"][:] = 0.0
        params["policy.b"][:] = 0.0
    return params


def zero_params(d: int = 32, n_heads: int = N_HEADS, n_layers: int = N_LAYERS) -> Params:
    return {name: np.zeros(shape) for name, shape in param_shapes(d, n_heads, n_layers).items()}


def goal_matching_params(
    d: int = 64, n_heads: int = N_HEADS, sharpness: float = 96.0, locality: float = 5.0
) -> Params:
    """Hand-set weights under which target attention tracks feature similarity.

    Fusion passes node features through.  Each GATv2 layer scores a neighbour
    by ``-locality * sum(LeakyReLU(h_j - h_i))``, so a node mostly keeps its own
    feature and mixes in similar neighbours.  Each decoder head compares one
    slice of the query with the same slice of every key.  Used by the planner
    policy, which needs meaningful attention without a training run.
    """
    p = zero_params(d, n_heads)
    dh = d // n_heads
    p["fuse.W"][:, :d] = np.eye(d)
    for l in range(N_LAYERS):
        p[f"gat{l}.W"][:, :d] = -np.eye(d)
        p[f"gat{l}.W"][:, d:] = np.eye(d)
        p[f"gat{l}.a"][:] = -locality
    scale = math.sqrt(sharpness * math.sqrt(dh))
    for dec in DECODERS:
        for h in range(n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            p[f"{dec}.Wq"][h][:, sl] = scale * np.eye(dh)
            p[f"{dec}.Wk"][h][:, sl] = scale * np.eye(dh)
            p[f"{dec}.Wv"][h][:, sl] = np.eye(dh)
        p[f"{dec}.Wo"][:] = np.eye(d)
    return p


def dims(params: Params) -> tuple[int, int, int]:
    """(d, H, L) of a parameter set."""
    d = params["fuse.b"].shape[0]
    H = params["dec_target.Wq"].shape[0]
    L = sum(1 for k in params if k.startswith("gat") and k.endswith(".a"))
    return d, H, L


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def save_params(params: Params, path: str | Path) -> None:
    d, H, L = dims(params)
    payload = {
        "version": WEIGHTS_VERSION,
        "d": d,
        "L": L,
        "H": H,
        "arrays": {
            k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
            for k, v in sorted(params.items())
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_params(path: str | Path) -> Params:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {payload.get('version')!r}")
    params = {
        k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in payload["arrays"].items()
    }
    expected = param_shapes(payload["d"], payload["H"], payload["L"])
    if set(expected) != set(params):
        raise ValueError(f"{path}: array names do not match d/L/H header")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise ValueError(f"{path}: {k} has shape {params[k].shape}, expected {shape}")
    return params


# ---------------------------------------------------------------------------
# building blocks


def _leaky(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def fuse_goal(features: np.ndarray, e_target: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise linear map of ``[feature_i || e_target]``."""
    features = np.atleast_2d(features)
    d = W.shape[0]
    if features.shape[1] != d or e_target.shape != (d,) or W.shape != (d, 2 * d):
        raise ShapeError(f"fuse_goal: features {features.shape}, target {e_target.shape}, W {W.shape}")
    return features @ W[:, :d].T + (W[:, d:] @ e_target + b)


@dataclass
class GatCache:
    H: np.ndarray
    S: np.ndarray
    pre: np.ndarray
    alpha: np.ndarray
    Y: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    starts: np.ndarray
    activate: bool


def _segment_starts(dst: np.ndarray, n: int) -> np.ndarray:
    if dst.size == 0:
        raise ShapeError("empty edge list")
    if np.any(np.diff(dst) < 0):
        raise ShapeError("edges must be sorted by destination")
    starts = np.flatnonzero(np.r_[True, dst[1:] != dst[:-1]])
    if starts.size != n or dst[0] != 0 or dst[-1] != n - 1:
        raise ShapeError("every node needs at least one incoming edge (self-loop missing?)")
    return starts


def gatv2_layer(
    H: np.ndarray,
    src: np.ndarray,
    dst: np.ndarray,
    W: np.ndarray,
    a: np.ndarray,
    activate: bool = True,
) -> tuple[np.ndarray, GatCache]:
    """One GATv2 layer over a destination-sorted edge list.

    score(i, j) = a . LeakyReLU(W_recv h_i + W_send h_j), softmax over the
    senders j of each i, output_i = sum_j alpha_ij W_send h_j, then ELU when
    ``activate``.  Returns the output and the per-edge attention inside the cache.
    """
    n, d = H.shape
    starts = _segment_starts(dst, n)
    R = H @ W[:, :d].T
    S = H @ W[:, d:].T
    pre = R[dst] + S[src]
    logit = _leaky(pre) @ a
    mx = np.maximum.reduceat(logit, starts)
    ex = np.exp(logit - mx[dst])
    alpha = ex / np.add.reduceat(ex, starts)[dst]
    Y = np.add.reduceat(alpha[:, None] * S[src], starts, axis=0)
    out = _elu(Y) if activate else Y
    return out, GatCache(H, S, pre, alpha, Y, src, dst, starts, activate)


def gatv2_layer_backward(
    dout: np.ndarray, cache: GatCache, W: np.ndarray, a: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dH, dW, da)."""
    c = cache
    d = W.shape[0]
    dY = dout * np.where(c.Y > 0, 1.0, np.exp(np.minimum(c.Y, 0.0))) if c.activate else dout
    dY_e = dY[c.dst]
    dalpha = np.einsum("ek,ek->e", dY_e, c.S[c.src])
    dS = np.zeros_like(c.S)
    np.add.at(dS, c.src, c.alpha[:, None] * dY_e)
    seg = np.add.reduceat(c.alpha * dalpha, c.starts)
    dlogit = c.alpha * (dalpha - seg[c.dst])
    act = _leaky(c.pre)
    da = act.T @ dlogit
    dpre = (dlogit[:, None] * a[None, :]) * np.where(c.pre > 0, 1.0, LEAKY_SLOPE)
    dR = np.add.reduceat(dpre, c.starts, axis=0)
    np.add.at(dS, c.src, dpre)
    dW = np.empty_like(W)
    dW[:, :d] = dR.T @ c.H
    dW[:, d:] = dS.T @ c.H
    dH = dR @ W[:, :d] + dS @ W[:, d:]
    return dH, dW, da


def edge_attention_matrix(cache: GatCache, n: int) -> np.ndarray:
    """Dense (receiver, sender) attention matrix of a layer; zero off the adjacency."""
    A = np.zeros((n, n))
    A[cache.dst, cache.src] = cache.alpha
    return A


@dataclass
class AttentionReport:
    """Decoder attention over memory rows.

    ``per_head`` is (H, m) over the keys actually used; ``node_scores`` are
    the head-mean scores of the map-node keys and ``global_score`` the
    head-mean score of the global key (None when it was not a key).
    """

    per_head: np.ndarray
    n_node_keys: int
    has_global_key: bool

    @property
    def mean(self) -> np.ndarray:
        return self.per_head.mean(axis=0)

    @property
    def node_scores(self) -> np.ndarray:
        return self.mean[: self.n_node_keys]

    @property
    def global_score(self) -> Optional[float]:
        return float(self.mean[self.n_node_keys]) if self.has_global_key else None

    def entropy(self) -> float:
        m = self.mean
        m = m[m > 0]
        return float(-(m * np.log(m)).sum())


@dataclass
class DecoderCache:
    query: np.ndarray
    keys: np.ndarray
    q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    alpha: np.ndarray
    concat: np.ndarray


def mha_decode(
    query: np.ndarray,
    M: np.ndarray,
    params: Params,
    dec: str,
    n_node_keys: int,
    use_global_key: bool = True,
) -> tuple[np.ndarray, AttentionReport, DecoderCache]:
    """Single-query multi-head attention over memory rows, then output projection.

    ``M`` holds ``n_node_keys`` node rows and, when ``M`` has one more row, the
    global row last.  ``use_global_key=False`` drops the global row from the keys.
    """
    Wq, Wk, Wv = params[f"{dec}.Wq"], params[f"{dec}.Wk"], params[f"{dec}.Wv"]
    Wo, bo = params[f"{dec}.Wo"], params[f"{dec}.bo"]
    n_heads, dh, d = Wq.shape
    if query.shape != (d,) or M.ndim != 2 or M.shape[1] != d:
        raise ShapeError(f"mha_decode: query {query.shape}, memory {M.shape}, d={d}")
    has_global = M.shape[0] == n_node_keys + 1
    keys = M if (use_global_key or not has_global) else M[:n_node_keys]
    if keys.shape[0] == 0:
        raise ShapeError("mha_decode needs at least one key")
    q = np.einsum("hkd,d->hk", Wq, query)
    K = np.einsum("hkd,md->hmk", Wk, keys)
    V = np.einsum("hkd,md->hmk", Wv, keys)
    scores = np.einsum("hmk,hk->hm", K, q) / math.sqrt(dh)
    alpha = _softmax(scores, axis=1)
    concat = np.einsum("hm,hmk->hk", alpha, V).reshape(-1)
    f = Wo @ concat + bo
    report = AttentionReport(alpha, n_node_keys, has_global and use_global_key)
    return f, report, DecoderCache(query, keys, q, K, V, alpha, concat)


def mha_decode_backward(df: np.ndarray, cache: DecoderCache, params: Params, dec: str, grads: Params) -> np.ndarray:
    """Accumulate decoder grads into ``grads``; return d(keys)."""
    c = cache
    Wq, Wk, Wv, Wo = (params[f"{dec}.{n}"] for n in ("Wq", "Wk", "Wv", "Wo"))
    n_heads, dh, d = Wq.shape
    grads[f"{dec}.Wo"] += np.outer(df, c.concat)
    grads[f"{dec}.bo"] += df
    do = (Wo.T @ df).reshape(n_heads, dh)
    dalpha = np.einsum("hmk,hk->hm", c.V, do)
    dV = np.einsum("hm,hk->hmk", c.alpha, do)
    ds = c.alpha * (dalpha - (c.alpha * dalpha).sum(axis=1, keepdims=True))
    ds /= math.sqrt(dh)
    dK = np.einsum("hm,hk->hmk", ds, c.q)
    dq = np.einsum("hmk,hm->hk", c.K, ds)
    grads[f"{dec}.Wq"] += np.einsum("hk,d->hkd", dq, c.query)
    grads[f"{dec}.Wk"] += np.einsum("hmk,md->hkd", dK, c.keys)
    grads[f"{dec}.Wv"] += np.einsum("hmk,md->hkd", dV, c.keys)
    return np.einsum("hmk,hkd->md", dK, Wk) + np.einsum("hmk,hkd->md", dV, Wv)


def extract_forgetting_scores(report: AttentionReport, n_active: int, reduce: str = "mean") -> np.ndarray:
    """Per-node target-decoder attention (global key excluded, not renormalized)."""
    if report.n_node_keys != n_active:
        raise StaleReportError(f"report covers {report.n_node_keys} nodes, graph has {n_active} active")
    if reduce == "mean":
        return report.node_scores.copy()
    if reduce == "max":
        return report.per_head[:, :n_active].max(axis=0)
    raise ValueError(f"unknown head reduction {reduce!r}")


def policy_distribution(f_cur, f_target, e_cur, W, b) -> tuple[np.ndarray, np.ndarray]:
    """(logits, probabilities) of the linear action head."""
    x = np.concatenate([f_cur, f_target, e_cur])
    logits = W @ x + b
    return logits, _softmax(logits)


# ---------------------------------------------------------------------------
# full forward step


@dataclass(frozen=True)
class StepOptions:
    use_global_key: bool = True  # False: global row encoded but never decoded
    replace_global_with: Optional[int] = None  # node row copied over the global row after encoding


@dataclass
class StepOutput:
    M: np.ndarray
    f_cur: np.ndarray
    f_target: np.ndarray
    report_cur: AttentionReport
    report_target: AttentionReport
    logits: np.ndarray
    probs: np.ndarray
    new_global: Optional[np.ndarray]
    caches: dict = field(repr=False, default_factory=dict)


def encode_memory(params: Params, view: ActiveView, e_target: np.ndarray) -> tuple[np.ndarray, list]:
    """Goal fusion then the GATv2 stack; returns (M', caches).  Row count = view.n_rows."""
    Z = fuse_goal(view.features, e_target, params["fuse.W"], params["fuse.b"])
    caches = []
    L = dims(params)[2]
    for l in range(L):
        Z, cache = gatv2_layer(Z, view.src, view.dst, params[f"gat{l}.W"], params[f"gat{l}.a"], activate=l < L - 1)
        caches.append(cache)
    return Z, caches


def forward_step(
    params: Params,
    view: ActiveView,
    e_target: np.ndarray,
    e_cur: np.ndarray,
    options: StepOptions = StepOptions(),
) -> StepOutput:
    M, gat_caches = encode_memory(params, view, e_target)
    n_nodes = len(view.node_ids)
    if view.has_global and options.replace_global_with is not None:
        M = M.copy()
        M[n_nodes] = M[options.replace_global_with]
    f_cur, rep_cur, c_cur = mha_decode(e_cur, M, params, "dec_cur", n_nodes, options.use_global_key)
    f_tgt, rep_tgt, c_tgt = mha_decode(e_target, M, params, "dec_target", n_nodes, options.use_global_key)
    logits, probs = policy_distribution(f_cur, f_tgt, e_cur, params["policy.W"], params["policy.b"])
    new_global = M[n_nodes].copy() if view.has_global else None
    caches = {"gat": gat_caches, "dec_cur": c_cur, "dec_target": c_tgt, "view": view, "e_target": e_target,
              "e_cur": e_cur, "options": options}
    return StepOutput(M, f_cur, f_tgt, rep_cur, rep_tgt, logits, probs, new_global, caches)


def step_nll(out: StepOutput, action: int) -> float:
    """Negative log-probability of ``action``, computed from the logits."""
    z = out.logits
    if not np.isfinite(z).all():
        raise NumericalError(f"non-finite logits {z}")
    m = float(z.max())
    return m + math.log(float(np.exp(z - m).sum())) - float(z[action])


def backward_step(params: Params, out: StepOutput, action: int, grads: Params, scale: float = 1.0) -> None:
    """Accumulate ``scale * d NLL(action) / d params`` into ``grads``.

    The incoming global feature and the observations are treated as constants.
    """
    c = out.caches
    d = params["fuse.b"].shape[0]
    view: ActiveView = c["view"]
    n_nodes = len(view.node_ids)
    dlogits = out.probs.copy()
    dlogits[action] -= 1.0
    dlogits *= scale
    x = np.concatenate([out.f_cur, out.f_target, c["e_cur"]])
    grads["policy.W"] += np.outer(dlogits, x)
    grads["policy.b"] += dlogits
    dx = params["policy.W"].T @ dlogits
    dM = np.zeros_like(out.M)
    for dec, df in (("dec_cur", dx[:d]), ("dec_target", dx[d : 2 * d])):
        dkeys = mha_decode_backward(df, c[dec], params, dec, grads)
        dM[: dkeys.shape[0]] += dkeys
    opts: StepOptions = c["options"]
    if view.has_global and opts.replace_global_with is not None:
        dM[opts.replace_global_with] += dM[n_nodes]
        dM[n_nodes] = 0.0
    dZ = dM
    L = len(c["gat"])
    for l in reversed(range(L)):
        dZ, dW, da = gatv2_layer_backward(dZ, c["gat"][l], params[f"gat{l}.W"], params[f"gat{l}.a"])
        grads[f"gat{l}.W"] += dW
        grads[f"gat{l}.a"] += da
    H0 = view.features
    grads["fuse.W"][:, :d] += dZ.T @ H0
    colsum = dZ.sum(axis=0)
    grads["fuse.W"][:, d:] += np.outer(colsum, c["e_target"])
    grads["fuse.b"] += colsum


# ---------------------------------------------------------------------------
# batch loss and gradient check


@dataclass(frozen=True)
class StepSample:
    """Everything one supervised step needs, with the global feature frozen in ``view``."""

    view: ActiveView
    e_target: np.ndarray
    e_cur: np.ndarray
    action: int
    options: StepOptions = StepOptions()


def batch_loss(params: Params, batch: Sequence[StepSample]) -> float:
    total = 0.0
    for s in batch:
        out = forward_step(params, s.view, s.e_target, s.e_cur, s.options)
        total += step_nll(out, s.action)
    loss = total / len(batch)
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss")
    return loss


def batch_loss_and_grad(params: Params, batch: Sequence[StepSample]) -> tuple[float, Params]:
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    total = 0.0
    scale = 1.0 / len(batch)
    for s in batch:
        out = forward_step(params, s.view, s.e_target, s.e_cur, s.options)
        total += step_nll(out, s.action)
        backward_step(params, out, s.action, grads, scale)
    loss = total * scale
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss")
    return loss, grads


@dataclass
class GradCheckResult:
    max_rel_error: float
    coords: list[tuple[str, tuple[int, ...]]]
    analytic: np.ndarray
    numeric: np.ndarray

    def rel_errors(self, floor: float = 1e-5) -> np.ndarray:
        denom = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), floor)
        return np.abs(self.analytic - self.numeric) / denom


def finite_difference(params: Params, batch: Sequence[StepSample], name: str, idx: tuple, eps: float) -> float:
    p = copy_params(params)
    orig = p[name][idx]
    p[name][idx] = orig + eps
    up = batch_loss(p, batch)
    p[name][idx] = orig - eps
    down = batch_loss(p, batch)
    return (up - down) / (2 * eps)


def grad_check(
    params: Params,
    batch: Sequence[StepSample],
    epsilon: float = 1e-5,
    n_coords: int = 50,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckResult:
    """Compare analytic gradients with central differences on random coordinates.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Coordinates are drawn so that every parameter array is hit at least once
    when ``n_coords`` allows it.
    """
    _, grads = batch_loss_and_grad(params, batch)
    rng = np.random.default_rng(seed)
    names = sorted(params)
    picks = list(names) if n_coords >= len(names) else []
    while len(picks) < n_coords:
        picks.append(names[int(rng.integers(len(names)))])
    coords, analytic, numeric = [], [], []
    for name in picks:
        idx = tuple(int(rng.integers(s)) for s in params[name].shape)
        coords.append((name, idx))
        analytic.append(grads[name][idx])
        numeric.append(finite_difference(params, batch, name, idx, epsilon))
    res = GradCheckResult(0.0, coords, np.array(analytic), np.array(numeric))
    res.max_rel_error = float(res.rel_errors(floor).max())
    return res
