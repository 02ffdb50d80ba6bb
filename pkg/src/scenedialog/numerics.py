"""Dense layers with hand-derived gradients, an Adam optimizer and checkpoints.

Every layer follows the same pattern: ``*_forward`` returns ``(out, cache)``
and ``*_backward(dout, cache)`` returns input and parameter gradients.
Everything runs in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels

INIT_SCALE = 0.08
FORGET_BIAS = 1.0
CHECKPOINT_MAGIC = b"SDCK"
CHECKPOINT_VERSION = 1


class NumericalError(FloatingPointError):
    """A NaN or Inf reached a parameter, gradient or layer boundary."""


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {name}")
    return arr


def _check_shape(name, arr, shape):
    if arr.shape != shape:
        raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")


# ---------------------------------------------------------------------------
# Elementwise / affine / embedding
# ---------------------------------------------------------------------------

def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def affine_forward(x, W, b=None):
    """``out = x @ W.T + b`` for ``x`` of shape (..., D_in) and ``W`` (D_out, D_in)."""
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"affine input width {x.shape[-1]} != weight columns {W.shape[1]}")
    out = x @ W.T
    if b is not None:
        out = out + b
    return out, (x, W, b is not None)


def affine_backward(dout, cache):
    x, W, has_bias = cache
    dx = dout @ W
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dW = d2.T @ x2
    db = d2.sum(axis=0) if has_bias else None
    return dx, dW, db


def embedding_forward(table, ids):
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token index out of range for embedding of size {table.shape[0]}")
    return table[ids], (ids, table.shape)


def embedding_backward(dout, cache, dtable=None):
    ids, shape = cache
    if dtable is None:
        dtable = np.zeros(shape)
    np.add.at(dtable, ids, dout)
    return dtable


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

@dataclass
class LstmParams:
    """Gate order: input, forget, cell candidate, output."""

    Wx: np.ndarray  # (4H, D)
    Wh: np.ndarray  # (4H, H)
    b: np.ndarray   # (4H,)

    @property
    def hidden(self) -> int:
        return self.Wh.shape[1]

    @property
    def input_dim(self) -> int:
        return self.Wx.shape[1]

    def validate(self):
        H, D = self.hidden, self.input_dim
        _check_shape("Wx", self.Wx, (4 * H, D))
        _check_shape("Wh", self.Wh, (4 * H, H))
        _check_shape("b", self.b, (4 * H,))

    @classmethod
    def init(cls, input_dim, hidden, rng):
        Wx = rng.uniform(-INIT_SCALE, INIT_SCALE, (4 * hidden, input_dim))
        Wh = rng.uniform(-INIT_SCALE, INIT_SCALE, (4 * hidden, hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = FORGET_BIAS
        return cls(Wx, Wh, b)


@dataclass
class LstmGrads:
    Wx: np.ndarray
    Wh: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros_like(cls, params):
        return cls(np.zeros_like(params.Wx), np.zeros_like(params.Wh), np.zeros_like(params.b))


@dataclass
class LstmTape:
    params: LstmParams
    inputs: np.ndarray  # (T, D)
    hs: np.ndarray      # (T+1, H); row 0 is h0
    cs: np.ndarray      # (T+1, H)
    gates: np.ndarray   # (T, 4H)
    kernels: object


def lstm_step(params, x, h_prev, c_prev, kernels=None):
    """One recurrence step; returns ``(h, c, gates)``."""
    k = (kernels or _kernels.active).lstm
    return k.lstm_step_forward(params.Wx, params.Wh, params.b, x, h_prev, c_prev)


def lstm_step_backward(params, x, h_prev, c_prev, c, gates, dh, dc, grads, kernels=None):
    """Accumulates into ``grads``; returns ``(dx, dh_prev, dc_prev)``."""
    k = (kernels or _kernels.active).lstm
    return k.lstm_step_backward(params.Wx, params.Wh, x, h_prev, c_prev, c, gates,
                                dh, dc, grads.Wx, grads.Wh, grads.b)


def lstm_forward(params, inputs, h0=None, c0=None, kernels=None):
    """Run the recurrence over a (T, D) sequence; returns ``(outputs, tape)``."""
    params.validate()
    inputs = np.ascontiguousarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("lstm inputs must be a non-empty (T, D) sequence")
    H, D = params.hidden, params.input_dim
    if inputs.shape[1] != D:
        raise ValueError(f"inputs has width {inputs.shape[1]}, expected {D}")
    h0 = np.zeros(H) if h0 is None else np.asarray(h0, dtype=np.float64)
    c0 = np.zeros(H) if c0 is None else np.asarray(c0, dtype=np.float64)
    _check_shape("h0", h0, (H,))
    _check_shape("c0", c0, (H,))
    kernels = kernels or _kernels.active
    T = inputs.shape[0]
    hs = np.empty((T + 1, H))
    cs = np.empty((T + 1, H))
    gates = np.empty((T, 4 * H))
    hs[0], cs[0] = h0, c0
    for t in range(T):
        hs[t + 1], cs[t + 1], gates[t] = kernels.lstm.lstm_step_forward(
            params.Wx, params.Wh, params.b, inputs[t], hs[t], cs[t])
    return hs[1:].copy(), LstmTape(params, inputs, hs, cs, gates, kernels)


def lstm_backward(tape, d_outputs, dc_last=None, grads=None):
    """Backprop through time.

    Returns ``(grads, d_inputs, dh0, dc0)``; ``grads`` is accumulated into
    when supplied.
    """
    d_outputs = np.asarray(d_outputs, dtype=np.float64)
    T, H = tape.gates.shape[0], tape.params.hidden
    if d_outputs.shape != (T, H):
        raise ValueError(f"output gradients have shape {d_outputs.shape}, tape expects {(T, H)}")
    if grads is None:
        grads = LstmGrads.zeros_like(tape.params)
    k = tape.kernels.lstm
    p = tape.params
    d_inputs = np.empty_like(tape.inputs)
    dh = np.zeros(H)
    dc = np.zeros(H) if dc_last is None else np.asarray(dc_last, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        dh = dh + d_outputs[t]
        d_inputs[t], dh, dc = k.lstm_step_backward(
            p.Wx, p.Wh, tape.inputs[t], tape.hs[t], tape.cs[t], tape.cs[t + 1],
            tape.gates[t], dh, dc, grads.Wx, grads.Wh, grads.b)
    return grads, d_inputs, dh, dc


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def softmax(x):
    z = np.exp(x - np.max(x))
    return z / z.sum()


def additive_attention_forward(query, memory, Wq, Wm, v):
    """Scores ``v . tanh(Wq q + Wm m_j)``, softmax weights, weighted memory sum."""
    if memory.ndim != 2 or memory.shape[0] == 0:
        raise ValueError("attention memory is empty")
    pre = memory @ Wm.T + Wq @ query
    act = np.tanh(pre)
    weights = softmax(act @ v)
    context = weights @ memory
    return context, weights, (query, memory, Wq, Wm, v, act, weights)


def additive_attention_backward(dcontext, cache, dweights=None):
    """Returns ``(dquery, dmemory, dWq, dWm, dv)``."""
    query, memory, Wq, Wm, v, act, weights = cache
    dw = memory @ dcontext
    if dweights is not None:
        dw = dw + dweights
    dmemory = np.outer(weights, dcontext)
    dscores = weights * (dw - weights @ dw)
    dv = act.T @ dscores
    dpre = np.outer(dscores, v) * (1.0 - act * act)
    dWm = dpre.T @ memory
    dmemory += dpre @ Wm
    dpre_sum = dpre.sum(axis=0)
    return Wq.T @ dpre_sum, dmemory, np.outer(dpre_sum, query), dWm, dv


def dot_attention_forward(query, memory):
    """Scaled dot-product variant; query and memory widths must agree."""
    if memory.ndim != 2 or memory.shape[0] == 0:
        raise ValueError("attention memory is empty")
    scale = 1.0 / np.sqrt(memory.shape[1])
    weights = softmax(memory @ query * scale)
    return weights @ memory, weights, (query, memory, weights, scale)


def dot_attention_backward(dcontext, cache):
    query, memory, weights, scale = cache
    dw = memory @ dcontext
    dscores = weights * (dw - weights @ dw) * scale
    dmemory = np.outer(weights, dcontext) + np.outer(dscores, query)
    return memory.T @ dscores, dmemory


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def softmax_xent(logits, target):
    """Max-shifted log-softmax cross-entropy; returns ``(loss, dlogits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] < 2 or not 0 <= target < logits.shape[0]:
        raise ValueError("softmax_xent needs V >= 2 and 0 <= target < V")
    shifted = logits - logits.max()
    logz = np.log(np.exp(shifted).sum())
    grad = np.exp(shifted - logz)
    loss = logz - shifted[target]
    grad[target] -= 1.0
    return float(loss), grad


# ---------------------------------------------------------------------------
# 1-D convolution
# ---------------------------------------------------------------------------

def conv1d_forward(x, W, b, stride=1):
    """Valid convolution. ``x`` (N, C_in, L), ``W`` (C_out, C_in, K) -> (N, C_out, L_out)."""
    N, C, L = x.shape
    F, C2, K = W.shape
    if C != C2:
        raise ValueError(f"conv input has {C} channels, weights expect {C2}")
    if L < K:
        raise ValueError(f"conv input length {L} shorter than kernel {K}")
    L_out = (L - K) // stride + 1
    cols = np.lib.stride_tricks.sliding_window_view(x, K, axis=2)[:, :, ::stride][:, :, :L_out]
    # cols: (N, C, L_out, K)
    out = np.einsum("nclk,fck->nfl", cols, W, optimize=True) + b[None, :, None]
    return out, (x.shape, cols, W, stride)


def conv1d_backward(dout, cache):
    """Returns ``(dx, dW, db)``."""
    x_shape, cols, W, stride = cache
    N, C, L = x_shape
    F, _, K = W.shape
    L_out = dout.shape[2]
    dW = np.einsum("nfl,nclk->fck", dout, cols, optimize=True)
    db = dout.sum(axis=(0, 2))
    dcols = np.einsum("nfl,fck->nclk", dout, W, optimize=True)
    dx = np.zeros(x_shape)
    for k in range(K):
        dx[:, :, k:k + stride * (L_out - 1) + 1:stride] += dcols[:, :, :, k]
    return dx, dW, db


def global_avg_pool_forward(x):
    return x.mean(axis=2), x.shape


def global_avg_pool_backward(dout, cache):
    N, C, L = cache
    return np.repeat(dout[:, :, None] / L, L, axis=2)


# ---------------------------------------------------------------------------
# Parameters, optimizer, checkpoints
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameters with paired gradients and Adam moments."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        check_finite(name, value)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def add_lstm(self, prefix, input_dim, hidden, rng):
        p = LstmParams.init(input_dim, hidden, rng)
        return LstmParams(self.add(prefix + ".Wx", p.Wx), self.add(prefix + ".Wh", p.Wh),
                          self.add(prefix + ".b", p.b))

    def lstm(self, prefix):
        return LstmParams(self[prefix + ".Wx"], self[prefix + ".Wh"], self[prefix + ".b"])

    def lstm_grads(self, prefix):
        g = self.grads
        return LstmGrads(g[prefix + ".Wx"], g[prefix + ".Wh"], g[prefix + ".b"])

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def num_values(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def clip_grad_norm(self, max_norm):
        norm = self.grad_norm()
        if max_norm and norm > max_norm:
            scale = max_norm / norm
            for g in self.grads.values():
                g *= scale
        return norm

    def adam_step(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        for name, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        self.step += 1
        bc1 = 1.0 - beta1 ** self.step
        bc2 = 1.0 - beta2 ** self.step
        for name, p in self.params.items():
            g = self.grads[name]
            m, v = self.m[name], self.v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            p -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + epsilon)
            check_finite(name, p)
        return self

    def copy(self):
        other = ParamStore()
        for name in self.params:
            other.params[name] = self.params[name].copy()
            other.grads[name] = self.grads[name].copy()
            other.m[name] = self.m[name].copy()
            other.v[name] = self.v[name].copy()
        other.step = self.step
        return other


def adam_step(store, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
    return store.adam_step(learning_rate, beta1, beta2, epsilon)


def save_checkpoint(path, store, metadata=None, include_optimizer=True):
    """Write ``store`` (and optional JSON-able ``metadata``) to ``path``.

    Layout: ``b"SDCK"``, little-endian uint32 version, uint64 header length,
    UTF-8 JSON header (sorted keys), then raw little-endian float64 blocks in
    header order. The header lists each block's name, kind and shape.
    """
    blocks = []
    kinds = [("param", store.params)]
    if include_optimizer:
        kinds += [("adam_m", store.m), ("adam_v", store.v)]
    for kind, table in kinds:
        for name, arr in table.items():
            blocks.append((kind, name, arr))
    header = {
        "version": CHECKPOINT_VERSION,
        "step": store.step,
        "blocks": [{"kind": k, "name": n, "shape": list(a.shape)} for k, n, a in blocks],
        "metadata": metadata or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for _, _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(store, metadata)``."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 16
    header = json.loads(data[offset:offset + hlen].decode("utf-8"))
    offset += hlen
    store = ParamStore()
    for block in header["blocks"]:
        shape = tuple(block["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
        if block["kind"] == "param":
            store.add(block["name"], arr)
        else:
            getattr(store, "m" if block["kind"] == "adam_m" else "v")[block["name"]] = arr
    store.step = header["step"]
    return store, header["metadata"]


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def numerical_gradient(f, x, h=1e-5, index=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    With ``index`` only those flat positions are probed; the rest stay 0.
    """
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    positions = range(flat.size) if index is None else index
    for i in positions:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    """``|a - n| / max(|a| + |n|, floor)``; the floor keeps entries at the
    finite-difference noise level (~1e-11 absolute) from dominating."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(loss_fn, arrays, analytic, h=1e-5, index=None):
    """Max relative error per named array between ``analytic`` gradients and
    central differences of ``loss_fn()`` (which must read ``arrays`` live).

    ``index`` optionally maps names to the flat positions to probe.
    """
    errors = {}
    for name, arr in arrays.items():
        pos = None if index is None else index.get(name)
        if pos is not None and len(pos) == 0:
            continue
        num = numerical_gradient(loss_fn, arr, h, pos)
        ana = analytic[name]
        if pos is not None:
            num, ana = num.reshape(-1)[pos], ana.reshape(-1)[pos]
        errors[name] = max_relative_error(ana, num)
    return errors
