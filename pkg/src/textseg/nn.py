"""Float64 numpy core: LSTM cells, stacked BiLSTMs, pooling, dense and softmax
layers, a reverse-mode tape over those composite ops, SGD, gradient checking
and the binary parameter-block format used by checkpoints.

Gate order everywhere is [input, forget, cell, output]. Parameters are plain
``dict[str, ndarray]`` mappings when they cross module boundaries; gradients
use the same keys and shapes.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import (CheckpointError, NonFiniteActivation, NonFiniteGradient,
                     ShapeMismatch)

PROB_CLAMP = 1e-12


def sigmoid(z):
    # tanh form avoids exp overflow for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    r = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-r, r, size=(rows, cols))


# ------------------------------------------------------------- parameters

@dataclass
class LstmCellParams:
    W: np.ndarray  # (4h, d)
    U: np.ndarray  # (4h, h)
    b: np.ndarray  # (4h,)

    def __post_init__(self):
        h4 = self.U.shape[0]
        if (self.W.ndim != 2 or self.U.ndim != 2 or h4 % 4 or self.U.shape != (h4, h4 // 4)
                or self.W.shape[0] != h4 or self.b.shape != (h4,)):
            raise ShapeMismatch(
                f"inconsistent LSTM shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}")

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, rng, input_size, hidden, forget_bias=1.0):
        W = glorot(rng, 4 * hidden, input_size)
        U = glorot(rng, 4 * hidden, hidden)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = forget_bias
        return cls(W, U, b)


@dataclass
class BiLstmParams:
    layers: list[tuple[LstmCellParams, LstmCellParams]]

    def __post_init__(self):
        if not self.layers:
            raise ShapeMismatch("BiLSTM needs at least one layer")
        h = self.hidden
        for i, (fw, bw) in enumerate(self.layers):
            if fw.hidden != h or bw.hidden != h:
                raise ShapeMismatch(f"layer {i}: hidden sizes differ from {h}")
            expected = self.input_size if i == 0 else 2 * h
            if fw.input_size != expected or bw.input_size != expected:
                raise ShapeMismatch(f"layer {i}: input size must be {expected}")

    @property
    def hidden(self) -> int:
        return self.layers[0][0].hidden

    @property
    def input_size(self) -> int:
        return self.layers[0][0].input_size

    @classmethod
    def init(cls, rng, input_size, hidden, num_layers=2, forget_bias=1.0):
        layers = []
        for i in range(num_layers):
            d = input_size if i == 0 else 2 * hidden
            layers.append((LstmCellParams.init(rng, d, hidden, forget_bias),
                           LstmCellParams.init(rng, d, hidden, forget_bias)))
        return cls(layers)

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, cells in enumerate(self.layers):
            for direction, cell in zip(("fw", "bw"), cells):
                for attr in "WUb":
                    out[f"{prefix}.{i}.{direction}.{attr}"] = getattr(cell, attr)
        return out

    @classmethod
    def from_named(cls, prefix: str, named: Mapping[str, np.ndarray], num_layers: int):
        def cell(i, direction):
            return LstmCellParams(*(named[f"{prefix}.{i}.{direction}.{a}"] for a in "WUb"))
        return cls([(cell(i, "fw"), cell(i, "bw")) for i in range(num_layers)])


# ------------------------------------------------------------ plain forward

def lstm_cell_forward(p: LstmCellParams, x, h_prev, c_prev):
    x, h_prev, c_prev = (np.asarray(v, dtype=np.float64) for v in (x, h_prev, c_prev))
    if x.shape != (p.input_size,) or h_prev.shape != (p.hidden,) or c_prev.shape != (p.hidden,):
        raise ShapeMismatch(
            f"cell expects x({p.input_size}) h({p.hidden}) c({p.hidden}), "
            f"got {x.shape} {h_prev.shape} {c_prev.shape}")
    n = p.hidden
    z = p.W @ x + p.U @ h_prev + p.b
    i, f, o = sigmoid(z[:n]), sigmoid(z[n:2 * n]), sigmoid(z[3 * n:])
    g = np.tanh(z[2 * n:3 * n])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(c))):
        raise NonFiniteActivation("LSTM cell produced a non-finite state")
    return h, c


def _lstm_sequence(W, U, b, xs, reverse=False):
    T, n = xs.shape[0], U.shape[1]
    zx = xs @ W.T + b
    H = np.zeros((T, n))
    C = np.zeros((T, n))
    A = np.zeros((T, 4 * n))  # activated gates
    h, c = np.zeros(n), np.zeros(n)
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        z = zx[t] + U @ h
        a = A[t]
        a[:2 * n] = sigmoid(z[:2 * n])
        a[2 * n:3 * n] = np.tanh(z[2 * n:3 * n])
        a[3 * n:] = sigmoid(z[3 * n:])
        c = a[n:2 * n] * c + a[:n] * a[2 * n:3 * n]
        h = a[3 * n:] * np.tanh(c)
        H[t], C[t] = h, c
    if not np.all(np.isfinite(H)):
        raise NonFiniteActivation("LSTM produced non-finite activations")
    return H, (A, C)


def _lstm_sequence_backward(W, U, xs, H, cache, dH, reverse=False):
    A, C = cache
    T, n = H.shape
    dZ = np.zeros((T, 4 * n))
    dU = np.zeros_like(U)
    dh_next, dc_next = np.zeros(n), np.zeros(n)
    steps = range(T) if reverse else range(T - 1, -1, -1)
    for t in steps:
        prev = t + 1 if reverse else t - 1
        has_prev = 0 <= prev < T
        i, f, g, o = A[t, :n], A[t, n:2 * n], A[t, 2 * n:3 * n], A[t, 3 * n:]
        tc = np.tanh(C[t])
        dh = dH[t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        c_prev = C[prev] if has_prev else 0.0
        dz = dZ[t]
        dz[:n] = dc * g * i * (1.0 - i)
        dz[n:2 * n] = dc * c_prev * f * (1.0 - f)
        dz[2 * n:3 * n] = dc * i * (1.0 - g * g)
        dz[3 * n:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        if has_prev:
            dU += np.outer(dz, H[prev])
        dh_next = U.T @ dz
    return dZ @ W, dZ.T @ xs, dU, dZ.sum(axis=0)


def bilstm_forward(p: BiLstmParams, xs) -> np.ndarray:
    """(T, d) inputs to (T, 2h) outputs, forward block first."""
    h = _as_matrix(xs, p.input_size)
    for fw, bw in p.layers:
        hf, _ = _lstm_sequence(fw.W, fw.U, fw.b, h)
        hb, _ = _lstm_sequence(bw.W, bw.U, bw.b, h, reverse=True)
        h = np.concatenate([hf, hb], axis=1)
    return h


def max_pool_time(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ShapeMismatch(f"max_pool_time needs a (T>=1, q) matrix, got {m.shape}")
    return m.max(axis=0)


def dense_forward(W, b, x) -> np.ndarray:
    W, b, x = (np.asarray(v, dtype=np.float64) for v in (W, b, x))
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape != (W.shape[1],):
        raise ShapeMismatch(f"dense: W{W.shape} b{b.shape} x{x.shape}")
    return W @ x + b


def softmax2(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _as_matrix(xs, width):
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[0] < 1 or xs.shape[1] != width:
        raise ShapeMismatch(f"expected a (T>=1, {width}) sequence, got {xs.shape}")
    return xs


# ------------------------------------------------------------------- tape

class Node:
    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]


class Tape:
    """Records composite ops in execution order for one reverse sweep.

    ``backward`` does not consume the tape, so calling it twice gives the same
    gradients.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._params: dict[str, int] = {}

    def _record(self, value, parents=(), vjp=None) -> Node:
        self._values.append(value)
        self._parents.append(tuple(p.index for p in parents))
        self._vjps.append(vjp)
        return Node(self, len(self._values) - 1)

    def param(self, name: str, value) -> Node:
        node = self._record(np.asarray(value, dtype=np.float64))
        self._params[name] = node.index
        return node

    def params(self, named: Mapping[str, np.ndarray]) -> dict[str, Node]:
        return {k: self.param(k, v) for k, v in named.items()}

    def constant(self, value) -> Node:
        return self._record(np.asarray(value, dtype=np.float64))

    def backward(self, loss: Node, seed: float = 1.0) -> dict[str, np.ndarray]:
        adj: list[np.ndarray | None] = [None] * len(self._values)
        adj[loss.index] = np.full_like(loss.value, seed)
        for i in range(loss.index, -1, -1):
            g, vjp = adj[i], self._vjps[i]
            if g is None or vjp is None:
                continue
            for parent, pg in zip(self._parents[i], vjp(g)):
                if pg is None:
                    continue
                adj[parent] = pg if adj[parent] is None else adj[parent] + pg
        grads = {}
        for name, idx in self._params.items():
            g = adj[idx]
            grads[name] = np.zeros_like(self._values[idx]) if g is None else np.array(g)
            if not np.all(np.isfinite(grads[name])):
                raise NonFiniteGradient(f"non-finite gradient for {name}")
        return grads


def lstm(x: Node, W: Node, U: Node, b: Node, reverse: bool = False) -> Node:
    xs = x.value
    H, cache = _lstm_sequence(W.value, U.value, b.value, xs, reverse)

    def vjp(dH):
        return _lstm_sequence_backward(W.value, U.value, xs, H, cache, dH, reverse)

    return x.tape._record(H, (x, W, U, b), vjp)


def concat(a: Node, b: Node) -> Node:
    width = a.value.shape[1]
    out = np.concatenate([a.value, b.value], axis=1)
    return a.tape._record(out, (a, b), lambda g: (g[:, :width], g[:, width:]))


def max_pool(m: Node) -> Node:
    arg = m.value.argmax(axis=0)
    cols = np.arange(m.value.shape[1])

    def vjp(g):
        dm = np.zeros_like(m.value)
        dm[arg, cols] = g
        return (dm,)

    return m.tape._record(m.value[arg, cols], (m,), vjp)


def stack(rows: Sequence[Node]) -> Node:
    out = np.stack([r.value for r in rows])
    return rows[0].tape._record(out, tuple(rows), lambda g: tuple(g))


def dense(x: Node, W: Node, b: Node) -> Node:
    """Row-wise affine map: (n, q) -> (n, out)."""
    out = x.value @ W.value.T + b.value
    return x.tape._record(out, (x, W, b),
                          lambda g: (g @ W.value, g.T @ x.value, g.sum(axis=0)))


def xent_loss(y: np.ndarray, p1: np.ndarray) -> float:
    p1 = np.clip(p1, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.sum(-y * np.log(p1) - (1.0 - y) * np.log(1.0 - p1)))


def softmax_xent(logits: Node, labels) -> Node:
    """Summed two-class cross-entropy over the first ``len(labels)`` rows.

    Class 1 is "ends a segment". Trailing rows get no loss and zero gradient.
    The gradient is the fused ``softmax - onehot``.
    """
    y = np.asarray(labels, dtype=np.float64)
    m = len(y)
    probs = softmax2(logits.value[:m])
    loss = np.array(xent_loss(y, probs[:, 1]))

    def vjp(g):
        d = np.zeros_like(logits.value)
        d[:m] = probs
        d[:m, 1] -= y
        d[:m, 0] -= 1.0 - y
        return (d * g,)

    return logits.tape._record(loss, (logits,), vjp)


def bilstm(x: Node, nodes: Mapping[str, Node], prefix: str, num_layers: int) -> Node:
    h = x
    for i in range(num_layers):
        fw = lstm(h, *(nodes[f"{prefix}.{i}.fw.{a}"] for a in "WUb"))
        bw = lstm(h, *(nodes[f"{prefix}.{i}.bw.{a}"] for a in "WUb"), reverse=True)
        h = concat(fw, bw)
    return h


# -------------------------------------------------------------- optimizer

def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float, clip: float | None = None) -> dict[str, np.ndarray]:
    """Return ``params - lr * grads``, after rescaling grads to global L2 norm
    ``clip`` when they exceed it."""
    if params.keys() != grads.keys():
        raise ShapeMismatch(f"gradient keys differ: {sorted(set(params) ^ set(grads))}")
    scale = 1.0
    if clip is not None:
        norm = global_norm(grads)
        if norm > clip:
            scale = clip / norm
    out = {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ShapeMismatch(f"{name}: param {np.shape(p)} vs grad {np.shape(g)}")
        with np.errstate(over="ignore", invalid="ignore"):  # callers check finiteness
            out[name] = p - (lr * scale) * g
    return out


# ------------------------------------------------------------ grad check

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, int] | None
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f: Callable[[Mapping[str, np.ndarray]], float],
               params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               eps: float = 1e-5, tol: float = 1e-4, samples: int | None = None,
               seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic ``grads`` with central differences of ``f``.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    near-zero gradients from amplifying round-off.
    """
    coords = [(name, j) for name, p in params.items() for j in range(np.size(p))]
    if samples is not None and samples < len(coords):
        rng = np.random.default_rng(seed)
        picks = np.sort(rng.choice(len(coords), size=samples, replace=False))
        coords = [coords[i] for i in picks]
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    worst, worst_err = None, 0.0
    for name, j in coords:
        flat = work[name].reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = f(work)
        flat[j] = orig - eps
        down = f(work)
        flat[j] = orig
        numeric = (up - down) / (2.0 * eps)
        analytic = float(np.reshape(grads[name], -1)[j])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if err > worst_err or worst is None:
            worst, worst_err = (name, j), err
    return GradCheckReport(worst_err, worst, len(coords), tol)


# --------------------------------------------------------- block storage

MAGIC = b"TSEGCKPT"


def write_blocks(stream, header: Mapping, blocks: Mapping[str, np.ndarray]) -> None:
    """Magic, u32 header length, JSON header, then little-endian float64 payloads."""
    meta = dict(header)
    meta["blocks"] = [{"name": k, "shape": list(np.shape(v))} for k, v in blocks.items()]
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    stream.write(MAGIC)
    stream.write(struct.pack("<I", len(raw)))
    stream.write(raw)
    for v in blocks.values():
        stream.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_blocks(stream) -> tuple[dict, dict[str, np.ndarray]]:
    if stream.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    size_raw = stream.read(4)
    if len(size_raw) != 4:
        raise CheckpointError("truncated checkpoint header")
    (size,) = struct.unpack("<I", size_raw)
    try:
        meta = json.loads(stream.read(size).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    blocks = {}
    for entry in meta.pop("blocks", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        payload = stream.read(8 * count)
        if len(payload) != 8 * count:
            raise CheckpointError(f"truncated payload for {entry['name']}")
        blocks[entry["name"]] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if stream.read(1):
        raise CheckpointError("trailing bytes after last block")
    return meta, blocks
