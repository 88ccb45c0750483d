"""Small float64 numeric core with hand-written backward passes.

Every forward function returns its output plus a cache; the matching
``*_backward`` consumes the cache, accumulates into ``Parameter.grad`` and
returns input gradients. Rows are examples: ``x`` is ``[B, in]`` (a 1-D input
is treated as a batch of one and returned 1-D).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

CHECKPOINT_MAGIC = b"CTXCAP-CHECKPOINT"
CHECKPOINT_VERSION = 1

FUSION_MODES = ("sum", "product", "concat", "adaptive1", "adaptive2")


class Parameter:
    def __init__(self, value, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def sigmoid(z):
    # tanh form: exact 0.5 at zero and no overflow warnings.
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# --- linear ---------------------------------------------------------------

def linear(x, W: Parameter, b: Parameter):
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != W.value.shape[1]:
        raise ValueError(f"linear: input dim {xb.shape[1]} != weight in-dim {W.value.shape[1]}")
    y = xb @ W.value.T + b.value
    return (y[0] if squeeze else y), (xb, squeeze)


def linear_backward(dy, cache, W: Parameter, b: Parameter):
    xb, squeeze = cache
    dyb = dy[None, :] if squeeze else dy
    W.grad += dyb.T @ xb
    b.grad += dyb.sum(axis=0)
    dx = dyb @ W.value
    return dx[0] if squeeze else dx


# --- LSTM -----------------------------------------------------------------

@dataclass
class LSTMState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden: int, batch: Optional[int] = None):
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(np.zeros(shape), np.zeros(shape))


class LSTMParams:
    """Gate order in the stacked weights is input, forget, output, candidate."""

    def __init__(self, input_size: int, hidden: int, rng: Optional[np.random.Generator] = None,
                 scale: float = 0.1, name: str = "lstm"):
        self.input_size = input_size
        self.hidden = hidden
        if rng is None:
            wx = np.zeros((4 * hidden, input_size))
            wh = np.zeros((4 * hidden, hidden))
        else:
            wx = rng.uniform(-scale, scale, (4 * hidden, input_size))
            wh = rng.uniform(-scale, scale, (4 * hidden, hidden))
        self.Wx = Parameter(wx, f"{name}.Wx")
        self.Wh = Parameter(wh, f"{name}.Wh")
        self.b = Parameter(np.zeros(4 * hidden), f"{name}.b")

    def parameters(self):
        return [self.Wx, self.Wh, self.b]


def lstm_step(x, state: LSTMState, p: LSTMParams):
    xb, squeeze = _as_batch(x)
    h, _ = _as_batch(state.h)
    c, _ = _as_batch(state.c)
    if xb.shape[1] != p.input_size:
        raise ValueError(f"lstm_step: input dim {xb.shape[1]} != {p.input_size}")
    if not (np.isfinite(h).all() and np.isfinite(c).all()):
        raise FloatingPointError("lstm_step: non-finite state")
    H = p.hidden
    a = xb @ p.Wx.value.T + h @ p.Wh.value.T + p.b.value
    i = sigmoid(a[:, :H])
    f = sigmoid(a[:, H:2 * H])
    o = sigmoid(a[:, 2 * H:3 * H])
    g = np.tanh(a[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    cache = (xb, h, c, i, f, o, g, tc, squeeze)
    if squeeze:
        return LSTMState(h_new[0], c_new[0]), cache
    return LSTMState(h_new, c_new), cache


def lstm_step_backward(dh, dc, cache, p: LSTMParams):
    """Gradients w.r.t. ``(x, h_prev, c_prev)`` given upstream ``dh``/``dc`` of the new state."""
    xb, h, c, i, f, o, g, tc, squeeze = cache
    if squeeze:
        dh = dh[None, :]
        dc = dc[None, :]
    dc_total = dc + dh * o * (1.0 - tc * tc)
    da = np.concatenate([
        dc_total * g * i * (1.0 - i),
        dc_total * c * f * (1.0 - f),
        dh * tc * o * (1.0 - o),
        dc_total * i * (1.0 - g * g),
    ], axis=1)
    p.Wx.grad += da.T @ xb
    p.Wh.grad += da.T @ h
    p.b.grad += da.sum(axis=0)
    dx = da @ p.Wx.value
    dh_prev = da @ p.Wh.value
    dc_prev = dc_total * f
    if squeeze:
        return dx[0], dh_prev[0], dc_prev[0]
    return dx, dh_prev, dc_prev


# --- losses ---------------------------------------------------------------

def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, target):
    """Per-row ``-log softmax(logits)[target]`` and its gradient w.r.t. the logits.

    A 1-D ``logits`` with an int target returns a float loss; a ``[B, V]``
    batch with ``B`` targets returns a length-B loss vector.
    """
    zb, squeeze = _as_batch(logits)
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    V = zb.shape[1]
    if V < 2:
        raise ValueError("softmax_cross_entropy needs at least 2 classes")
    if t.shape[0] != zb.shape[0]:
        raise ValueError(f"{t.shape[0]} targets for {zb.shape[0]} rows")
    if (t < 0).any() or (t >= V).any():
        raise IndexError(f"target out of range [0, {V})")
    logp = log_softmax(zb)
    rows = np.arange(zb.shape[0])
    loss = -logp[rows, t]
    grad = np.exp(logp)
    grad[rows, t] -= 1.0
    if squeeze:
        return float(loss[0]), grad[0]
    return loss, grad


def binary_cross_entropy(logits, targets):
    """Mean elementwise BCE on logits (stable form) and its gradient."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if z.shape != t.shape:
        raise ValueError(f"binary_cross_entropy: shape {z.shape} vs targets {t.shape}")
    if z.size == 0:
        return 0.0, np.zeros_like(z)
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - t) / z.size
    return float(loss.mean()), grad


# --- fusion of the three branches -----------------------------------------

def _gate_weights(theta: np.ndarray, gate_param: str) -> np.ndarray:
    if gate_param == "softmax":
        return softmax(theta)
    if gate_param == "raw":
        return theta.copy()
    raise ValueError(f"unknown gate parameterization {gate_param!r}")


def _gate_backward(theta, w, scores, gate_param):
    # scores[b] = <dout, branch_b> summed over the batch
    if gate_param == "softmax":
        return w * (scores - np.dot(w, scores))
    return scores


class FusionGates:
    """Learnable state of one fusion node.

    ``present`` flags which of (local, neighboring, global) exist; the local
    branch is always required.
    """

    def __init__(self, mode: str, hidden: int, present=(True, True, True), gate_param: str = "softmax",
                 rng: Optional[np.random.Generator] = None, name: str = "fuse"):
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        if not present[0]:
            raise ValueError("the local branch is mandatory")
        self.mode = mode
        self.hidden = hidden
        self.present = tuple(bool(p) for p in present)
        self.gate_param = gate_param
        self.params = {}
        n = sum(self.present)
        n_ctx = int(self.present[2]) + int(self.present[1])

        def gate(size, key):
            init = np.zeros(size) if gate_param == "softmax" else np.full(size, 1.0 / size)
            self.params[key] = Parameter(init, f"{name}.{key}")

        if mode == "concat":
            scale = 1.0 / math.sqrt(n * hidden)
            w = np.zeros((hidden, n * hidden)) if rng is None else rng.uniform(-scale, scale, (hidden, n * hidden))
            self.params["W"] = Parameter(w, f"{name}.W")
            self.params["b"] = Parameter(np.zeros(hidden), f"{name}.b")
        elif mode == "adaptive1":
            gate(n, "gate")
        elif mode == "adaptive2" and n_ctx:
            gate(n_ctx, "ctx_gate")
            gate(2, "top_gate")

    def parameters(self):
        return list(self.params.values())


def adaptive_fuse(local, neighboring, global_, gates: FusionGates):
    """Combine branch outputs; absent branches are passed as ``None``.

    ``adaptive2`` first mixes (global, neighboring) with one gate, then mixes
    local with that context vector through a second gate.
    """
    local = np.asarray(local, dtype=np.float64)
    branches = [local, neighboring, global_]
    given = tuple(b is not None for b in branches)
    if given != gates.present:
        raise ValueError(f"branches {given} do not match gate layout {gates.present}")
    for b in branches:
        if b is not None and np.shape(b) != local.shape:
            raise ValueError(f"fusion dimension mismatch {np.shape(b)} vs {local.shape}")
    xs = [b for b in branches if b is not None]
    mode = gates.mode
    if mode == "sum":
        out = xs[0].copy()
        for x in xs[1:]:
            out = out + x
        return out, (xs,)
    if mode == "product":
        out = xs[0].copy()
        for x in xs[1:]:
            out = out * x
        return out, (xs,)
    if mode == "concat":
        z = np.concatenate(xs, axis=-1)
        out, lin_cache = linear(z, gates.params["W"], gates.params["b"])
        return out, (xs, lin_cache)
    if mode == "adaptive1":
        w = _gate_weights(gates.params["gate"].value, gates.gate_param)
        out = sum(wi * x for wi, x in zip(w, xs))
        return out, (xs, w)
    # adaptive2
    ctx_in = [b for b in (global_, neighboring) if b is not None]
    if not ctx_in:
        return local.copy(), (xs, None, None, None, None)
    w1 = _gate_weights(gates.params["ctx_gate"].value, gates.gate_param)
    ctx = sum(wi * x for wi, x in zip(w1, ctx_in))
    w2 = _gate_weights(gates.params["top_gate"].value, gates.gate_param)
    out = w2[0] * local + w2[1] * ctx
    return out, (xs, ctx_in, w1, ctx, w2)


def adaptive_fuse_backward(dout, cache, gates: FusionGates):
    """Returns ``(d_local, d_neighboring, d_global)`` with ``None`` for absent branches."""
    mode = gates.mode
    xs = cache[0]
    if mode == "sum":
        dxs = [dout.copy() for _ in xs]
    elif mode == "product":
        dxs = []
        for n in range(len(xs)):
            d = dout.copy()
            for m, x in enumerate(xs):
                if m != n:
                    d = d * x
            dxs.append(d)
    elif mode == "concat":
        dz = linear_backward(dout, cache[1], gates.params["W"], gates.params["b"])
        H = gates.hidden
        dxs = [dz[..., n * H:(n + 1) * H] for n in range(len(xs))]
    elif mode == "adaptive1":
        w = cache[1]
        p = gates.params["gate"]
        scores = np.array([np.sum(dout * x) for x in xs])
        p.grad += _gate_backward(p.value, w, scores, gates.gate_param)
        dxs = [wi * dout for wi in w]
    else:
        _, ctx_in, w1, ctx, w2 = cache
        if ctx_in is None:
            return dout.copy(), None, None
        top = gates.params["top_gate"]
        scores2 = np.array([np.sum(dout * xs[0]), np.sum(dout * ctx)])
        top.grad += _gate_backward(top.value, w2, scores2, gates.gate_param)
        dlocal = w2[0] * dout
        dctx = w2[1] * dout
        cg = gates.params["ctx_gate"]
        scores1 = np.array([np.sum(dctx * x) for x in ctx_in])
        cg.grad += _gate_backward(cg.value, w1, scores1, gates.gate_param)
        dctx_in = [wi * dctx for wi in w1]
        # ctx_in is ordered (global, neighboring)
        it = iter(dctx_in)
        dglobal = next(it) if gates.present[2] else None
        dneigh = next(it) if gates.present[1] else None
        return dlocal, dneigh, dglobal
    it = iter(dxs)
    return tuple(next(it) if flag else None for flag in gates.present)


# --- optimization and gradient checking -----------------------------------

def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


def sgd_step(params: Iterable[Parameter], lr: float, clip_norm: Optional[float] = None):
    params = list(params)
    scale = 1.0
    if clip_norm is not None:
        norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
        if norm > clip_norm:
            scale = clip_norm / norm
    for p in params:
        p.value -= (lr * scale) * p.grad


def grad_check(loss_fn: Callable[[], float], params: Iterable[Parameter], eps: float = 1e-5,
               loss_only: Optional[Callable[[], float]] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must run forward and backward, accumulating into the
    parameters' ``grad``. ``loss_only`` (forward only) speeds up the numeric
    sweep when given. Relative error is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    params = list(params)
    zero_grads(params)
    base = loss_fn()
    if not math.isfinite(base):
        raise FloatingPointError(f"non-finite loss {base}")
    analytic = [p.grad.copy() for p in params]
    f = loss_only if loss_only is not None else loss_fn
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        a_flat = a.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = f()
            flat[idx] = orig - eps
            fm = f()
            flat[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while perturbing {p.name}[{idx}]")
            num = (fp - fm) / (2.0 * eps)
            err = abs(a_flat[idx] - num) / max(1.0, abs(a_flat[idx]), abs(num))
            worst = max(worst, err)
    zero_grads(params)
    return worst


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Optional[dict] = None):
    """Write ``name -> array`` as a versioned header plus raw little-endian float64."""
    names = list(params)
    arrays = [np.asarray(params[n], dtype="<f8") for n in names]
    header = {
        "meta": meta or {},
        "params": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n")
        for a in arrays:
            fh.write(a.tobytes(order="C"))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    first, rest = data.split(b"\n", 1)
    magic, _, version = first.partition(b" ")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {int(version)}")
    header_line, blob = rest.split(b"\n", 1)
    header = json.loads(header_line)
    out = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise ValueError(f"{path}: truncated data for {entry['name']}")
        out[entry["name"]] = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return out, header["meta"]
