"""Small reverse-mode automatic differentiation over numpy arrays.

Every primitive records a node on a :class:`Tape`.  Backward rules are written
with the same primitives, so when a gradient is requested with
``create_graph=True`` the backward sweep is itself recorded and can be
differentiated again (Hessian-vector products, gradients through unrolled
parameter updates).

Values are float64 arrays.  A ``Var`` with ``tape=None`` is a constant.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DomainError,
    EmptySequence,
    HigherOrderUnavailable,
    NonFinite,
    ShapeMismatch,
    TapeMismatch,
)

LOG_FLOOR = 1e-12


class _Node:
    __slots__ = ("op", "inputs", "backward", "out")

    def __init__(self, op, inputs, backward, out):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.out = out


class Tape:
    """Append-only record of primitive ops.

    Node ids are list indices, so every input of a node has a smaller id than
    the node itself.  ``higher_order`` must be set for gradients that will be
    differentiated again.
    """

    _ids = itertools.count(1)

    def __init__(self, higher_order: bool = False):
        self.id = next(Tape._ids)
        self.higher_order = higher_order
        self.nodes: list[_Node] = []
        self.recording = True

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        mode = "higher-order" if self.higher_order else "first-order"
        return f"Tape(id={self.id}, nodes={len(self.nodes)}, {mode})"

    def variable(self, values) -> "Var":
        """Register a leaf (a parameter vector or any differentiable input)."""
        value = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFinite("leaf values must be finite")
        return self._push("leaf", value, (), None)

    def _push(self, op, value, inputs, backward) -> "Var":
        out = Var(value, self, len(self.nodes))
        self.nodes.append(_Node(op, inputs, backward, out))
        return out


class Var:
    """An array value, optionally tracked on a tape."""

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 1000

    def __init__(self, value, tape: Tape | None = None, node: int | None = None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __float__(self):
        return float(self.value)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def detach(self) -> "Var":
        return Var(self.value)

    def __repr__(self):
        where = f"tape={self.tape.id}, node={self.node}" if self.tape is not None else "const"
        return f"Var({self.value!r}, {where})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)


def const(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64))


def _make(op: str, value: np.ndarray, inputs: tuple, backward: Callable) -> Var:
    tape = None
    for x in inputs:
        t = x.tape
        if t is not None:
            if tape is None:
                tape = t
            elif t is not tape:
                raise TapeMismatch(f"{op}: inputs live on tapes {tape.id} and {t.id}")
    if not np.all(np.isfinite(value)):
        raise NonFinite(f"{op} produced a non-finite value")
    if tape is None or not tape.recording:
        return Var(value)
    return tape._push(op, value, inputs, backward)


def _np_sum_to(arr: np.ndarray, shape: tuple) -> np.ndarray:
    if arr.shape == shape:
        return arr
    lead = arr.ndim - len(shape)
    axes = list(range(lead))
    axes += [i + lead for i, s in enumerate(shape) if s == 1 and arr.shape[i + lead] != 1]
    return arr.sum(axis=tuple(axes), keepdims=True).reshape(shape)


# ---------------------------------------------------------------- primitives

def sum_to(x: Var, shape: tuple) -> Var:
    """Sum ``x`` down to a broadcast-compatible ``shape`` (reverse of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _make("sum_to", _np_sum_to(x.value, shape), (x,),
                 lambda g, out: (broadcast_to(g, src),))


def broadcast_to(x: Var, shape: tuple) -> Var:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _make("broadcast_to", np.broadcast_to(x.value, shape).copy(), (x,),
                 lambda g, out: (sum_to(g, src),))


def add(a, b) -> Var:
    a, b = const(a), const(b)
    return _make("add", a.value + b.value, (a, b),
                 lambda g, out: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    return _make("sub", a.value - b.value, (a, b),
                 lambda g, out: (sum_to(g, a.shape), sum_to(neg(g), b.shape)))


def neg(a) -> Var:
    a = const(a)
    return _make("neg", -a.value, (a,), lambda g, out: (neg(g),))


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    return _make("mul", a.value * b.value, (a, b),
                 lambda g, out: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)))


def div(a, b) -> Var:
    a, b = const(a), const(b)
    if np.any(b.value == 0.0):
        raise DomainError("division by zero")

    def back(g, out):
        ga = div(g, b)
        return sum_to(ga, a.shape), sum_to(neg(mul(ga, out)), b.shape)

    return _make("div", a.value / b.value, (a, b), back)


def power(a, p: float) -> Var:
    a = const(a)
    p = float(p)
    if p != int(p) and np.any(a.value < 0):
        raise DomainError("fractional power of a negative value")
    return _make("pow", a.value ** p, (a,),
                 lambda g, out: (mul(g, mul(p, power(a, p - 1.0))),))


def matmul(a, b) -> Var:
    a, b = const(a), const(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return _make("matmul", a.value @ b.value, (a, b),
                 lambda g, out: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a) -> Var:
    a = const(a)
    return _make("transpose", a.value.T.copy(), (a,), lambda g, out: (transpose(g),))


def tanh(a) -> Var:
    a = const(a)
    return _make("tanh", np.tanh(a.value), (a,),
                 lambda g, out: (mul(g, sub(1.0, mul(out, out))),))


def sigmoid(a) -> Var:
    a = const(a)
    value = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make("sigmoid", value, (a,),
                 lambda g, out: (mul(g, mul(out, sub(1.0, out))),))


def exp(a) -> Var:
    a = const(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    return _make("exp", value, (a,), lambda g, out: (mul(g, out),))


def log(a) -> Var:
    a = const(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log of a non-positive value; use safe_log for probabilities")
    return _make("log", np.log(a.value), (a,), lambda g, out: (div(g, a),))


def clip_min(a, floor: float) -> Var:
    a = const(a)
    keep = (a.value >= floor).astype(np.float64)
    return _make("clip_min", np.maximum(a.value, floor), (a,),
                 lambda g, out: (mul(g, keep),))


def vsum(a, axis=None, keepdims=False) -> Var:
    a = const(a)
    src = a.shape
    value = np.asarray(a.value.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    kept = a.value.sum(axis=axis, keepdims=True).shape

    def back(g, out):
        return (broadcast_to(reshape(g, kept), src),)

    return _make("sum", value, (a,), back)


def reshape(a, shape) -> Var:
    a = const(a)
    src = a.shape
    return _make("reshape", a.value.reshape(shape), (a,), lambda g, out: (reshape(g, src),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Var:
    a = const(a)
    src = a.shape
    value = a.value[idx]
    value = value.copy() if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
    return _make("getitem", value, (a,), lambda g, out: (scatter(g, idx, src),))


def scatter(g, idx, shape) -> Var:
    """Place ``g`` into a zero array of ``shape`` at ``idx`` (adjoint of indexing)."""
    g = const(g)
    value = np.zeros(shape)
    if _is_basic(idx):
        value[idx] += g.value
    else:
        np.add.at(value, idx, g.value)
    return _make("scatter", value, (g,), lambda gg, out: (getitem(gg, idx),))


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    xs = tuple(const(x) for x in xs)
    if not xs:
        raise ShapeMismatch("concat of nothing")
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def back(g, out):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = (slice(None),) * ax + (slice(int(lo), int(hi)),)
            grads.append(getitem(g, idx))
        return tuple(grads)

    return _make("concat", np.concatenate([x.value for x in xs], axis=ax), xs, back)


# ---------------------------------------------------------------- composites

def mean(a, axis=None) -> Var:
    a = const(a)
    n = a.size if axis is None else a.shape[axis]
    return vsum(a, axis) / float(n)


def log_softmax(a, axis: int = -1) -> Var:
    a = const(a)
    shift = a.value.max(axis=axis, keepdims=True)
    z = a - shift
    return z - log(vsum(exp(z), axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Var:
    a = const(a)
    e = exp(a - a.value.max(axis=axis, keepdims=True))
    return e / vsum(e, axis=axis, keepdims=True)


def safe_log(p) -> Var:
    return log(clip_min(p, LOG_FLOOR))


def np_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------- gradients

def grad(loss: Var, params, create_graph: bool = False):
    """Gradient of a scalar ``loss`` with respect to ``params``.

    ``params`` is a single Var or a sequence of them; the return value has
    the same structure.  With ``create_graph`` the result is recorded on the
    tape so it can be differentiated again.
    """
    single = isinstance(params, Var)
    plist = [params] if single else list(params)
    if loss.size != 1:
        raise ShapeMismatch(f"loss must be a scalar, got shape {loss.shape}")
    tape = loss.tape
    for p in plist:
        if p.tape is None or p.node is None:
            raise TapeMismatch("params are not recorded on a tape")
        if tape is not None and p.tape is not tape:
            raise TapeMismatch(f"loss on tape {tape.id}, params on tape {p.tape.id}")
    if tape is None:
        zeros = [Var(np.zeros_like(p.value)) for p in plist]
        return zeros[0] if single else zeros
    if create_graph and not tape.higher_order:
        raise HigherOrderUnavailable(f"tape {tape.id} was created in first-order mode")

    targets = {p.node for p in plist}
    lowest = min(targets)
    adj: dict[int, Var] = {loss.node: Var(np.ones_like(loss.value))}
    saved = tape.recording
    tape.recording = create_graph
    try:
        for i in range(loss.node, lowest - 1, -1):
            g = adj.get(i) if i in targets else adj.pop(i, None)
            if g is None:
                continue
            node = tape.nodes[i]
            if node.backward is None:
                continue
            for x, gx in zip(node.inputs, node.backward(g, node.out)):
                if gx is None or x.tape is not tape or x.node < lowest:
                    continue
                j = x.node
                adj[j] = gx if j not in adj else add(adj[j], gx)
    finally:
        tape.recording = saved

    out = []
    for p in plist:
        gp = adj.get(p.node)
        if gp is None:
            gp = Var(np.zeros_like(p.value))
        if not np.all(np.isfinite(gp.value)):
            raise NonFinite("gradient has non-finite entries")
        out.append(gp)
    return out[0] if single else out


def grad_of_grad(loss: Var, params: Var, vector) -> Var:
    """Hessian-vector product ``(d2 loss / d params2) @ vector``."""
    if loss.tape is not None and not loss.tape.higher_order:
        raise HigherOrderUnavailable("loss was recorded on a first-order tape")
    g = grad(loss, params, create_graph=True)
    inner = vsum(mul(g, const(vector).detach()))
    if inner.tape is None:
        return Var(np.zeros_like(params.value))
    return grad(inner, params)


def sgd_step(params: Var, gradient, lr: float) -> Var:
    """``params - lr * gradient``; refuses non-finite gradients."""
    gradient = const(gradient)
    if gradient.shape != params.shape:
        raise ShapeMismatch(f"gradient {gradient.shape} vs params {params.shape}")
    if not np.all(np.isfinite(gradient.value)):
        raise NonFinite("refusing update with a non-finite gradient")
    return sub(params, mul(float(lr), gradient))


def clip_by_norm(gradient, max_norm: float | None):
    """Rescale ``gradient`` to Euclidean norm ``max_norm`` when it is longer.

    Works on tape variables (the rescaling is recorded) and on arrays.
    """
    if max_norm is None:
        return gradient
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    if isinstance(gradient, Var):
        norm = float(np.linalg.norm(gradient.value))
        if norm <= max_norm:
            return gradient
        return mul(gradient, mul(power(vsum(mul(gradient, gradient)), -0.5), float(max_norm)))
    g = np.asarray(gradient, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    return g if norm <= max_norm else g * (max_norm / norm)


# ---------------------------------------------------------------- networks

@dataclass(frozen=True)
class LayerSpec:
    """Fully connected net: ``sizes = (in, hidden..., out)``, tanh hidden units."""

    sizes: tuple

    def __post_init__(self):
        if len(self.sizes) < 2 or any(int(s) < 1 for s in self.sizes):
            raise ShapeMismatch(f"bad layer sizes {self.sizes}")

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def init(self, rng: np.random.Generator) -> np.ndarray:
        parts = []
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(a)
            parts.append(rng.uniform(-bound, bound, size=a * b))
            parts.append(rng.uniform(-bound, bound, size=b))
        return np.concatenate(parts)


def mlp_forward(params: Var, layout: LayerSpec, inputs) -> Var:
    """Forward pass; ``inputs`` is ``(n, in)`` or ``(in,)``."""
    params = const(params)
    if params.shape != (layout.n_params,):
        raise ShapeMismatch(f"expected {layout.n_params} params, got {params.shape}")
    x = np.asarray(inputs, dtype=np.float64)
    flat = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != layout.sizes[0]:
        raise ShapeMismatch(f"input width {x.shape[-1]} != {layout.sizes[0]}")
    h: Var = Var(x)
    off = 0
    n_layers = len(layout.sizes) - 1
    for li, (a, b) in enumerate(zip(layout.sizes[:-1], layout.sizes[1:])):
        W = params[off:off + a * b].reshape((a, b))
        off += a * b
        bias = params[off:off + b]
        off += b
        h = h @ W + bias
        if li < n_layers - 1:
            h = tanh(h)
    return h.reshape((b,)) if flat else h


@dataclass(frozen=True)
class RecurrentSpec:
    """Stacked LSTM with a linear head on the top layer's hidden state."""

    input_size: int
    hidden_size: int
    num_layers: int
    output_size: int

    def _layer_shapes(self):
        shapes = []
        width = self.input_size
        for _ in range(self.num_layers):
            shapes.append((width, self.hidden_size))
            width = self.hidden_size
        return shapes

    @property
    def n_params(self) -> int:
        H = self.hidden_size
        n = sum((w + H) * 4 * H + 4 * H for w, _ in self._layer_shapes())
        return n + H * self.output_size + self.output_size

    @property
    def sizes(self) -> tuple:
        return (self.input_size,) + (self.hidden_size,) * self.num_layers + (self.output_size,)

    def init(self, rng: np.random.Generator) -> np.ndarray:
        H = self.hidden_size
        parts = []
        for w, _ in self._layer_shapes():
            bound = 1.0 / np.sqrt(w + H)
            parts.append(rng.uniform(-bound, bound, size=(w + H) * 4 * H))
            parts.append(rng.uniform(-bound, bound, size=4 * H))
        bound = 1.0 / np.sqrt(H)
        parts.append(rng.uniform(-bound, bound, size=H * self.output_size))
        parts.append(rng.uniform(-bound, bound, size=self.output_size))
        return np.concatenate(parts)


def lstm_cell(x_proj: Var, h: Var | None, c: Var | None, Wh: Var, H: int):
    """One gated step; ``x_proj`` already holds ``x @ Wx + b``.  Gate order i, f, g, o."""
    gates = x_proj if h is None else x_proj + h @ Wh
    i = sigmoid(gates[:, 0:H])
    f = sigmoid(gates[:, H:2 * H])
    g = tanh(gates[:, 2 * H:3 * H])
    o = sigmoid(gates[:, 3 * H:4 * H])
    c_new = i * g if c is None else f * c + i * g
    return o * tanh(c_new), c_new


def rnn_forward(params: Var, layout: RecurrentSpec, sequence, lengths=None,
                all_steps: bool = False) -> Var:
    """Run the stacked LSTM over ``sequence``.

    ``sequence`` is ``(T, in)`` or a padded batch ``(B, T, in)`` with
    ``lengths``; padded steps hold the state, so the result is the logit
    vector at each sequence's last real step.  With ``all_steps`` the logits
    after every step are returned, shape ``(T, out)`` or ``(T, B, out)``.
    """
    params = const(params)
    if params.shape != (layout.n_params,):
        raise ShapeMismatch(f"expected {layout.n_params} params, got {params.shape}")
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.size == 0 or (seq.ndim >= 2 and seq.shape[-2] == 0):
        raise EmptySequence("sequence is empty")
    single = seq.ndim == 2
    if single:
        seq = seq[None]
    if seq.ndim != 3 or seq.shape[2] != layout.input_size:
        raise ShapeMismatch(f"sequence shape {np.shape(sequence)} vs input width {layout.input_size}")
    B, T, _ = seq.shape
    H = layout.hidden_size
    masks = None
    if lengths is not None:
        lengths = np.asarray(lengths, dtype=int)
        if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > T:
            raise ShapeMismatch("lengths do not match the batch")
        if lengths.min() < T:
            masks = [(t < lengths).astype(np.float64)[:, None] for t in range(T)]

    off = 0
    inputs: list = [seq[:, t, :] for t in range(T)]
    for w, _ in layout._layer_shapes():
        W = params[off:off + (w + H) * 4 * H].reshape((w + H, 4 * H))
        off += (w + H) * 4 * H
        b = params[off:off + 4 * H]
        off += 4 * H
        Wx, Wh = W[:w], W[w:]
        h = c = None
        outputs = []
        for t in range(T):
            h_new, c_new = lstm_cell(inputs[t] @ Wx + b, h, c, Wh, H)
            if masks is not None and h is not None and masks[t].min() < 1.0:
                h = h + masks[t] * (h_new - h)
                c = c + masks[t] * (c_new - c)
            else:
                h, c = h_new, c_new
            outputs.append(h)
        inputs = outputs
    Wo = params[off:off + H * layout.output_size].reshape((H, layout.output_size))
    bo = params[off + H * layout.output_size:]
    if all_steps:
        stacked = concat(inputs, axis=0)
        logits = (stacked @ Wo + bo).reshape((T, B, layout.output_size))
        return logits.reshape((T, layout.output_size)) if single else logits
    logits = inputs[-1] @ Wo + bo
    return logits.reshape((layout.output_size,)) if single else logits


def save_flat(path, layout_sizes: Sequence[int], values: np.ndarray) -> None:
    """Write ``values`` as little-endian float64 after an int32 layout header."""
    header = np.asarray([len(layout_sizes), *layout_sizes], dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.asarray(values, dtype="<f8").tobytes())


def load_flat(path) -> tuple[tuple, np.ndarray]:
    data = open(path, "rb").read()
    n = int(np.frombuffer(data[:4], dtype="<i4")[0])
    sizes = tuple(int(s) for s in np.frombuffer(data[4:4 + 4 * n], dtype="<i4"))
    values = np.frombuffer(data[4 + 4 * n:], dtype="<f8").astype(np.float64)
    return sizes, values


class Adam:
    """Adam on flat numpy vectors; ``step`` returns the increment to subtract."""

    def __init__(self, size: int, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, g: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(g)):
            raise NonFinite("refusing update with a non-finite gradient")
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
