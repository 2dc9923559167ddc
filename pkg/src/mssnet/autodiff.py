"""Tape-based reverse-mode differentiation over dense float64 matrices.

Every differentiable operation in this package funnels through the small
op set below.  When a :class:`Tape` is active (entered as a context
manager), each op appends a node holding a backward rule; otherwise ops
compute eagerly and record nothing, which is the inference path.

Gradients accumulate additively into :class:`Parameter` objects across
``backward`` calls until ``zero_grad`` is called, matching the usual
optimizer contract.  Plain :class:`Value` nodes get their adjoint from the
most recent backward pass only.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, InternalConsistencyError, OracleInvalidError


class Value:
    """A dense float64 array tracked by the tape."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Value(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Value):
    """A trainable Value with a persistent, accumulating gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class _TapeNode:
    __slots__ = ("op", "inputs", "output", "rule")

    def __init__(self, op, inputs, output, rule):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.rule = rule


_TAPE_STACK: list["Tape"] = []


def active_tape():
    """The innermost active tape, or None when running eagerly."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Append-only record of forward ops, replayed in reverse by backward."""

    def __init__(self):
        self.nodes: list[_TapeNode] = []
        self._output_ids: set[int] = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise InternalConsistencyError("tape stack corrupted")
        return False

    def record(self, op: str, inputs, output: Value, rule) -> int:
        """Append a node; `rule(out_grad) -> tuple of per-input grads`."""
        oid = id(output)
        if oid in self._output_ids or any(output is v for v in inputs):
            raise InternalConsistencyError(
                f"cyclic or duplicate output while recording {op!r}"
            )
        node_id = len(self.nodes)
        self.nodes.append(_TapeNode(op, tuple(inputs), output, rule))
        self._output_ids.add(oid)
        return node_id

    def backward(self, loss: Value):
        """Propagate d(loss)/d(value) to every recorded value.

        Parameters accumulate into .grad; other values have .grad set to
        the adjoint from this pass.  Returns nothing; read grads off the
        parameters.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        adjoints: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        holders: dict[int, Value] = {id(loss): loss}
        for node in reversed(self.nodes):
            out_grad = adjoints.get(id(node.output))
            if out_grad is None:
                continue
            grads = node.rule(out_grad)
            for v, g in zip(node.inputs, grads):
                if g is None:
                    continue
                vid = id(v)
                holders[vid] = v
                acc = adjoints.get(vid)
                if acc is None:
                    adjoints[vid] = np.array(g, dtype=np.float64, copy=True)
                else:
                    acc += g
        for vid, g in adjoints.items():
            v = holders[vid]
            if isinstance(v, Parameter):
                v.grad += g
            else:
                v.grad = g


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _record(op, inputs, out, rule):
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over the axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear algebra ops
# ---------------------------------------------------------------------------

def add(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    out = Value(a.data + b.data)

    def rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", (a, b), out, rule)


def mul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    out = Value(a.data * b.data)

    def rule(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record("mul", (a, b), out, rule)


def matmul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    out = Value(a.data @ b.data)

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), out, rule)


def transpose(a) -> Value:
    a = _as_value(a)
    out = Value(a.data.T)

    def rule(g):
        return (g.T,)

    return _record("transpose", (a,), out, rule)


def relu(a) -> Value:
    a = _as_value(a)
    mask = a.data > 0.0
    out = Value(np.where(mask, a.data, 0.0))

    def rule(g):
        return (g * mask,)

    return _record("relu", (a,), out, rule)


def sigmoid(a) -> Value:
    a = _as_value(a)
    s = np.empty_like(a.data)
    pos = a.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    es = np.exp(a.data[~pos])
    s[~pos] = es / (1.0 + es)
    out = Value(s)

    def rule(g):
        return (g * s * (1.0 - s),)

    return _record("sigmoid", (a,), out, rule)


def softmax_rows(a) -> Value:
    """Row-wise softmax with max-subtraction stabilization."""
    a = _as_value(a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = Value(p)

    def rule(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _record("softmax_rows", (a,), out, rule)


def sum_all(a) -> Value:
    a = _as_value(a)
    out = Value(a.data.sum())

    def rule(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record("sum_all", (a,), out, rule)


def mean_all(a) -> Value:
    a = _as_value(a)
    n = a.data.size
    out = Value(a.data.sum() / n)

    def rule(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _record("mean_all", (a,), out, rule)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def gather_rows(a, index: np.ndarray) -> Value:
    a = _as_value(a)
    index = np.asarray(index, dtype=np.int64)
    out = Value(a.data[index])

    def rule(g):
        z = np.zeros_like(a.data)
        np.add.at(z, index, g)
        return (z,)

    return _record("gather_rows", (a,), out, rule)


def concat_cols(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    out = Value(np.hstack([a.data, b.data]))
    na = a.data.shape[1]

    def rule(g):
        return g[:, :na], g[:, na:]

    return _record("concat_cols", (a, b), out, rule)


def slice_cols(a, start: int, stop: int) -> Value:
    a = _as_value(a)
    out = Value(a.data[:, start:stop].copy())

    def rule(g):
        z = np.zeros_like(a.data)
        z[:, start:stop] = g
        return (z,)

    return _record("slice_cols", (a,), out, rule)


def segment_mean(a, segment_ids: np.ndarray, num_segments: int) -> Value:
    """Per-segment row mean; segments must each contain at least one row."""
    a = _as_value(a)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(segment_ids, minlength=num_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ContractError("segment_mean requires every segment non-empty")
    sums = np.zeros((num_segments, a.data.shape[1]))
    np.add.at(sums, segment_ids, a.data)
    out = Value(sums / counts[:, None])

    def rule(g):
        return ((g / counts[:, None])[segment_ids],)

    return _record("segment_mean", (a,), out, rule)


def scale_softmax(scores: list) -> list:
    """Softmax across a list of same-shape score arrays, elementwise.

    For (N, 1) scores this is the row softmax of their concatenation; for
    (N, C) scores it is an independent softmax per (row, channel).
    """
    scores = [_as_value(s) for s in scores]
    stacked = np.stack([s.data for s in scores], axis=0)
    shifted = stacked - stacked.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=0, keepdims=True)
    outs = [Value(p[i]) for i in range(len(scores))]

    tape = active_tape()
    if tape is not None:
        for i, out in enumerate(outs):
            def rule(g, i=i):
                # d p_i / d u_j = p_i (delta_ij - p_j)
                gp = g * p[i]
                return tuple(
                    gp * ((1.0 - p[j]) if j == i else -p[j])
                    for j in range(len(scores))
                )

            tape.record("scale_softmax", scores, out, rule)
    return outs


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_check(
    f,
    params,
    *,
    step: float = 1e-5,
    samples_per_param: int = 8,
    total_samples: int | None = None,
    rng=None,
) -> float:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    Returns the max over sampled entries of |analytic - numeric| /
    (|numeric| + 1e-8).  ``f`` must be deterministic; two eager forward
    passes are compared bit-for-bit first.  ``total_samples`` caps the
    overall budget across parameters (useful for whole-network checks);
    otherwise every parameter gets ``samples_per_param`` entries.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params = list(params)

    probe_a = float(_as_value(f()).data)
    probe_b = float(_as_value(f()).data)
    if probe_a != probe_b:
        raise OracleInvalidError(
            f"f() is not deterministic: {probe_a!r} != {probe_b!r}"
        )

    saved = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    if total_samples is None:
        picks = [
            (pi, j)
            for pi, p in enumerate(params)
            for j in rng.choice(
                p.data.size, size=min(samples_per_param, p.data.size), replace=False
            )
        ]
    else:
        sizes = np.array([p.data.size for p in params])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        flat_idx = rng.choice(offsets[-1], size=min(total_samples, offsets[-1]), replace=False)
        picks = [
            (int(np.searchsorted(offsets, j, side="right") - 1), 0) for j in flat_idx
        ]
        picks = [(pi, int(j - offsets[pi])) for (pi, _), j in zip(picks, flat_idx)]

    worst = 0.0
    for pi, j in picks:
        p, ana = params[pi], analytic[pi]
        flat = p.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        hi = float(_as_value(f()).data)
        flat[j] = orig - step
        lo = float(_as_value(f()).data)
        flat[j] = orig
        numeric = (hi - lo) / (2.0 * step)
        err = abs(ana.reshape(-1)[j] - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst
