"""Reverse-mode differentiable tensor substrate.

A closed catalog of float64 tensor primitives with tape recording, reverse
accumulation into parameters, and a central-finite-difference checking
harness. Model and loss code compose these primitives and nothing else; no
fused kernels, no implicit broadcasting outside broadcast-row.
"""

from __future__ import annotations

import numpy as np

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

# Global toggle: reject NaN/Inf at tensor construction and primitive
# boundaries. Kept on by default; correctness over speed at desk scale.
CHECK_FINITE = True

_LN_EPS = 1e-5


class ShapeMismatchError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class DanglingNodeError(ValueError):
    pass


class PrimitiveKind(Enum):
    MATMUL = "matmul"
    ADD = "add"
    SUBTRACT = "subtract"
    MULTIPLY = "elementwise-multiply"
    SCALAR_MULTIPLY = "scalar-multiply"
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    EXP = "exp"
    LOG = "log"
    SOFTMAX_ROWS = "softmax-per-row"
    CONCAT_LAST = "concat-last-axis"
    SLICE = "slice"
    TRANSPOSE_LAST_TWO = "transpose-last-two"
    SUM = "sum"
    MEAN = "mean"
    BROADCAST_ROW = "broadcast-row"
    LAYER_NORM_ROWS = "layer-normalize-per-row"


class Tensor:
    """Dense, C-contiguous float64 array, optionally owned by a Parameter."""

    __slots__ = ("data", "owner")

    def __init__(self, values, checked: bool | None = None):
        arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
        do_check = CHECK_FINITE if checked is None else checked
        if do_check and not np.isfinite(arr).all():
            raise NonFiniteError("tensor construction received non-finite values")
        self.data = arr
        self.owner = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # Operator sugar over the same closed catalog.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """Trainable tensor with an accumulated gradient and a stable name."""

    __slots__ = ("id", "value", "gradient")

    def __init__(self, name: str, values):
        self.id = name
        self.value = Tensor(values)
        self.value.owner = self
        self.gradient = Tensor(np.zeros_like(self.value.data), checked=False)

    def zero_gradient(self):
        self.gradient.data[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.value.shape})"


class TapeRecord:
    __slots__ = ("kind", "inputs", "input_ids", "output", "output_id", "attrs", "saved")

    def __init__(self, kind, inputs, input_ids, output, output_id, attrs, saved):
        self.kind = kind
        self.inputs = inputs
        self.input_ids = input_ids
        self.output = output
        self.output_id = output_id
        self.attrs = attrs
        self.saved = saved


class Tape:
    """Append-only record of primitive applications.

    Node ids are assigned per tape; a tensor first seen as an input becomes a
    leaf. Records hold references to their tensors, so ids stay unique for
    the tape's lifetime.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.leaves: dict[int, Tensor] = {}
        self.param_leaves: dict[int, Parameter] = {}
        self._ids: dict[int, int] = {}
        self._next = 0

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _assign(self, t: Tensor) -> int:
        nid = self._next
        self._next += 1
        self._ids[id(t)] = nid
        return nid

    def node_id(self, t: Tensor) -> int | None:
        return self._ids.get(id(t))

    def _register_input(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = self._assign(t)
            self.leaves[nid] = t
            if t.owner is not None:
                self.param_leaves[nid] = t.owner
        return nid

    def record(self, kind, inputs, output, attrs, saved):
        input_ids = tuple(self._register_input(t) for t in inputs)
        output_id = self._assign(output)
        self.records.append(TapeRecord(kind, tuple(inputs), input_ids, output, output_id, attrs, saved))

    def validate(self):
        """Raise DanglingNodeError unless records are topologically closed."""
        known = set(self.leaves)
        for r in self.records:
            for nid in r.input_ids:
                if nid not in known:
                    raise DanglingNodeError(f"record for {r.kind.value} references unknown node {nid}")
            known.add(r.output_id)

    def replay(self) -> list[np.ndarray]:
        """Recompute every record from the leaves; returns outputs in order."""
        self.validate()
        values = {nid: t.data for nid, t in self.leaves.items()}
        outputs = []
        for r in self.records:
            arrays = [values[nid] for nid in r.input_ids]
            out, _ = _FORWARD[r.kind](arrays, r.attrs)
            values[r.output_id] = out
            outputs.append(out)
        return outputs


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# Side channel for the gradient checker: when not None, relu appends its
# activation pattern here so kink crossings between the +h and -h
# evaluations can be detected.
_relu_pattern_sink: list[bytes] | None = None


# ---------------------------------------------------------------------------
# forward rules: (arrays, attrs) -> (output array, saved-for-backward)

def _fw_matmul(arrays, attrs):
    a, b = arrays
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    with np.errstate(over="ignore"):
        return a @ b, None


def _same_shape(a, b, name):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{name} expects identical shapes, got {a.shape} and {b.shape}")


def _fw_add(arrays, attrs):
    a, b = arrays
    _same_shape(a, b, "add")
    return a + b, None


def _fw_subtract(arrays, attrs):
    a, b = arrays
    _same_shape(a, b, "subtract")
    return a - b, None


def _fw_multiply(arrays, attrs):
    a, b = arrays
    _same_shape(a, b, "elementwise-multiply")
    return a * b, None


def _fw_scalar_multiply(arrays, attrs):
    (a,) = arrays
    return a * attrs["scalar"], None


def _fw_relu(arrays, attrs):
    (a,) = arrays
    if _relu_pattern_sink is not None:
        _relu_pattern_sink.append((a > 0.0).tobytes())
    return np.maximum(a, 0.0), None


def _fw_sigmoid(arrays, attrs):
    (a,) = arrays
    # Branch on sign for overflow-free evaluation.
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, None


def _fw_tanh(arrays, attrs):
    (a,) = arrays
    return np.tanh(a), None


def _fw_exp(arrays, attrs):
    (a,) = arrays
    with np.errstate(over="ignore"):
        return np.exp(a), None


def _fw_log(arrays, attrs):
    (a,) = arrays
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a)
    return out, None


def _fw_softmax_rows(arrays, attrs):
    (a,) = arrays
    if a.ndim < 1:
        raise ShapeMismatchError("softmax-per-row needs rank >= 1")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True), None


def _fw_concat_last(arrays, attrs):
    first = arrays[0]
    for a in arrays[1:]:
        if a.ndim != first.ndim or a.shape[:-1] != first.shape[:-1]:
            raise ShapeMismatchError(
                f"concat-last-axis operands differ off the last axis: {[x.shape for x in arrays]}"
            )
    return np.concatenate(arrays, axis=-1), None


def _slice_index(shape, attrs):
    axis = attrs["axis"]
    start, stop = attrs["start"], attrs["stop"]
    ndim = len(shape)
    if not -ndim <= axis < ndim:
        raise ShapeMismatchError(f"slice axis {axis} out of range for rank {ndim}")
    axis %= ndim
    if not (0 <= start < stop <= shape[axis]):
        raise ShapeMismatchError(f"slice [{start}:{stop}) invalid for axis of length {shape[axis]}")
    idx = [slice(None)] * ndim
    idx[axis] = slice(start, stop)
    return tuple(idx)


def _fw_slice(arrays, attrs):
    (a,) = arrays
    return a[_slice_index(a.shape, attrs)].copy(), None


def _fw_transpose_last_two(arrays, attrs):
    (a,) = arrays
    if a.ndim < 2:
        raise ShapeMismatchError("transpose-last-two needs rank >= 2")
    return np.ascontiguousarray(np.swapaxes(a, -1, -2)), None


def _fw_sum(arrays, attrs):
    (a,) = arrays
    return np.asarray(a.sum(), dtype=np.float64).reshape(1), None


def _fw_mean(arrays, attrs):
    (a,) = arrays
    return np.asarray(a.mean(), dtype=np.float64).reshape(1), None


def _fw_broadcast_row(arrays, attrs):
    (a,) = arrays
    rows = attrs["rows"]
    if rows < 1:
        raise ShapeMismatchError("broadcast-row needs rows >= 1")
    if a.ndim == 1:
        width = a.shape[0]
    elif a.ndim == 2 and a.shape[0] == 1:
        width = a.shape[1]
    else:
        raise ShapeMismatchError(f"broadcast-row expects a row vector, got {a.shape}")
    return np.broadcast_to(a.reshape(1, width), (rows, width)).copy(), None


def _fw_layer_norm_rows(arrays, attrs):
    (a,) = arrays
    if a.ndim < 1:
        raise ShapeMismatchError("layer-normalize-per-row needs rank >= 1")
    eps = attrs.get("eps", _LN_EPS)
    with np.errstate(over="ignore"):
        mu = a.mean(axis=-1, keepdims=True)
        var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        normed = (a - mu) * inv
    return normed, (normed, inv)


_FORWARD: dict[PrimitiveKind, Callable] = {
    PrimitiveKind.MATMUL: _fw_matmul,
    PrimitiveKind.ADD: _fw_add,
    PrimitiveKind.SUBTRACT: _fw_subtract,
    PrimitiveKind.MULTIPLY: _fw_multiply,
    PrimitiveKind.SCALAR_MULTIPLY: _fw_scalar_multiply,
    PrimitiveKind.RELU: _fw_relu,
    PrimitiveKind.SIGMOID: _fw_sigmoid,
    PrimitiveKind.TANH: _fw_tanh,
    PrimitiveKind.EXP: _fw_exp,
    PrimitiveKind.LOG: _fw_log,
    PrimitiveKind.SOFTMAX_ROWS: _fw_softmax_rows,
    PrimitiveKind.CONCAT_LAST: _fw_concat_last,
    PrimitiveKind.SLICE: _fw_slice,
    PrimitiveKind.TRANSPOSE_LAST_TWO: _fw_transpose_last_two,
    PrimitiveKind.SUM: _fw_sum,
    PrimitiveKind.MEAN: _fw_mean,
    PrimitiveKind.BROADCAST_ROW: _fw_broadcast_row,
    PrimitiveKind.LAYER_NORM_ROWS: _fw_layer_norm_rows,
}


# ---------------------------------------------------------------------------
# backward rules: (record, upstream grad) -> per-input grads (None = constant)

def _bw_matmul(r, g):
    a, b = (t.data for t in r.inputs)
    return [g @ b.T, a.T @ g]


def _bw_add(r, g):
    return [g, g]


def _bw_subtract(r, g):
    return [g, -g]


def _bw_multiply(r, g):
    a, b = (t.data for t in r.inputs)
    return [g * b, g * a]


def _bw_scalar_multiply(r, g):
    return [g * r.attrs["scalar"]]


def _bw_relu(r, g):
    # Subgradient 0 at exactly 0.
    x = r.inputs[0].data
    return [g * (x > 0.0)]


def _bw_sigmoid(r, g):
    s = r.output.data
    return [g * s * (1.0 - s)]


def _bw_tanh(r, g):
    t = r.output.data
    return [g * (1.0 - t * t)]


def _bw_exp(r, g):
    return [g * r.output.data]


def _bw_log(r, g):
    return [g / r.inputs[0].data]


def _bw_softmax_rows(r, g):
    y = r.output.data
    return [y * (g - (g * y).sum(axis=-1, keepdims=True))]


def _bw_concat_last(r, g):
    grads = []
    offset = 0
    for t in r.inputs:
        w = t.data.shape[-1]
        grads.append(np.ascontiguousarray(g[..., offset:offset + w]))
        offset += w
    return grads


def _bw_slice(r, g):
    x = r.inputs[0].data
    out = np.zeros_like(x)
    out[_slice_index(x.shape, r.attrs)] = g
    return [out]


def _bw_transpose_last_two(r, g):
    return [np.ascontiguousarray(np.swapaxes(g, -1, -2))]


def _bw_sum(r, g):
    x = r.inputs[0].data
    return [np.full_like(x, g.reshape(-1)[0])]


def _bw_mean(r, g):
    x = r.inputs[0].data
    return [np.full_like(x, g.reshape(-1)[0] / x.size)]


def _bw_broadcast_row(r, g):
    x = r.inputs[0].data
    return [g.sum(axis=0).reshape(x.shape)]


def _bw_layer_norm_rows(r, g):
    normed, inv = r.saved
    gm = g.mean(axis=-1, keepdims=True)
    gn = (g * normed).mean(axis=-1, keepdims=True)
    return [inv * (g - gm - normed * gn)]


_BACKWARD: dict[PrimitiveKind, Callable] = {
    PrimitiveKind.MATMUL: _bw_matmul,
    PrimitiveKind.ADD: _bw_add,
    PrimitiveKind.SUBTRACT: _bw_subtract,
    PrimitiveKind.MULTIPLY: _bw_multiply,
    PrimitiveKind.SCALAR_MULTIPLY: _bw_scalar_multiply,
    PrimitiveKind.RELU: _bw_relu,
    PrimitiveKind.SIGMOID: _bw_sigmoid,
    PrimitiveKind.TANH: _bw_tanh,
    PrimitiveKind.EXP: _bw_exp,
    PrimitiveKind.LOG: _bw_log,
    PrimitiveKind.SOFTMAX_ROWS: _bw_softmax_rows,
    PrimitiveKind.CONCAT_LAST: _bw_concat_last,
    PrimitiveKind.SLICE: _bw_slice,
    PrimitiveKind.TRANSPOSE_LAST_TWO: _bw_transpose_last_two,
    PrimitiveKind.SUM: _bw_sum,
    PrimitiveKind.MEAN: _bw_mean,
    PrimitiveKind.BROADCAST_ROW: _bw_broadcast_row,
    PrimitiveKind.LAYER_NORM_ROWS: _bw_layer_norm_rows,
}


def evaluate(kind: PrimitiveKind, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply one primitive; records onto the active tape if one is open."""
    arrays = [t.data for t in inputs]
    if CHECK_FINITE:
        for a in arrays:
            if not np.isfinite(a).all():
                raise NonFiniteError(f"{kind.value}: non-finite input")
    out_arr, saved = _FORWARD[kind](arrays, attrs)
    if CHECK_FINITE and not np.isfinite(out_arr).all():
        raise NonFiniteError(f"{kind.value}: produced non-finite values")
    out = Tensor(out_arr, checked=False)
    tape = _active_tape()
    if tape is not None:
        tape.record(kind, inputs, out, attrs, saved)
    return out


# Thin named wrappers; model and loss code reads better through these.

def matmul(a, b):
    return evaluate(PrimitiveKind.MATMUL, (a, b))


def add(a, b):
    return evaluate(PrimitiveKind.ADD, (a, b))


def subtract(a, b):
    return evaluate(PrimitiveKind.SUBTRACT, (a, b))


def multiply(a, b):
    return evaluate(PrimitiveKind.MULTIPLY, (a, b))


def scalar_multiply(a, scalar: float):
    return evaluate(PrimitiveKind.SCALAR_MULTIPLY, (a,), scalar=float(scalar))


def relu(a):
    return evaluate(PrimitiveKind.RELU, (a,))


def sigmoid(a):
    return evaluate(PrimitiveKind.SIGMOID, (a,))


def tanh(a):
    return evaluate(PrimitiveKind.TANH, (a,))


def exp(a):
    return evaluate(PrimitiveKind.EXP, (a,))


def log(a):
    return evaluate(PrimitiveKind.LOG, (a,))


def softmax_rows(a):
    return evaluate(PrimitiveKind.SOFTMAX_ROWS, (a,))


def concat_last(*tensors):
    return evaluate(PrimitiveKind.CONCAT_LAST, tuple(tensors))


def slice_axis(a, axis: int, start: int, stop: int):
    return evaluate(PrimitiveKind.SLICE, (a,), axis=axis, start=start, stop=stop)


def transpose_last_two(a):
    return evaluate(PrimitiveKind.TRANSPOSE_LAST_TWO, (a,))


def sum_all(a):
    return evaluate(PrimitiveKind.SUM, (a,))


def mean_all(a):
    return evaluate(PrimitiveKind.MEAN, (a,))


def broadcast_row(a, rows: int):
    return evaluate(PrimitiveKind.BROADCAST_ROW, (a,), rows=int(rows))


def layer_norm_rows(a, eps: float = _LN_EPS):
    return evaluate(PrimitiveKind.LAYER_NORM_ROWS, (a,), eps=float(eps))


def backpropagate(tape: Tape, output: Tensor, seed) -> None:
    """Reverse-accumulate d(output)/d(parameter) * seed into parameter grads.

    Intermediate gradient buffers are dropped as soon as their producing
    record has been processed; only parameter leaves keep gradients.
    """
    out_id = tape.node_id(output)
    if out_id is None:
        raise DanglingNodeError("output tensor was not recorded on this tape")
    tape.validate()
    seed_arr = np.array(getattr(seed, "data", seed), dtype=np.float64)
    if seed_arr.shape != output.data.shape:
        raise ShapeMismatchError(f"seed shape {seed_arr.shape} != output shape {output.data.shape}")
    grads: dict[int, np.ndarray] = {out_id: seed_arr}
    for r in reversed(tape.records):
        g = grads.pop(r.output_id, None)
        if g is None:
            continue
        for nid, ig in zip(r.input_ids, _BACKWARD[r.kind](r, g)):
            if ig is None:
                continue
            acc = grads.get(nid)
            grads[nid] = ig if acc is None else acc + ig
    for nid, param in tape.param_leaves.items():
        g = grads.get(nid)
        if g is not None:
            param.gradient.data += g


# ---------------------------------------------------------------------------
# finite-difference gradient checking

@dataclass
class GradCheckEntry:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float
    note: str = ""


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    n_entries: int = 0
    n_flagged: int = 0
    max_rel_err: float = 0.0
    passed: bool = True
    worst: list[GradCheckEntry] = field(default_factory=list)
    flagged: list[GradCheckEntry] = field(default_factory=list)

    def format(self) -> str:
        lines = [
            f"checked {self.n_entries} entries, step={self.step:g}, tolerance={self.tolerance:g}",
            f"max relative error {self.max_rel_err:.3e} -> {'PASS' if self.passed else 'FAIL'}",
        ]
        if self.n_flagged:
            lines.append(f"{self.n_flagged} entries flagged as nondifferentiable points (excluded)")
        for e in self.worst[:10]:
            lines.append(
                f"  {e.param}{list(e.index)}: analytic={e.analytic:.6e} numeric={e.numeric:.6e} rel={e.rel_err:.3e}"
            )
        return "\n".join(lines)


def _relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def _eval_scalar_with_pattern(build) -> tuple[float, bytes]:
    global _relu_pattern_sink
    _relu_pattern_sink = []
    try:
        out = build()
        pattern = b"".join(_relu_pattern_sink)
    finally:
        _relu_pattern_sink = None
    if out.data.size != 1:
        raise ShapeMismatchError("gradient check builder must produce a scalar")
    return float(out.data.reshape(-1)[0]), pattern


def check_gradients(
    parameters: Sequence[Parameter],
    build: Callable[[], Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    keep_worst: int = 10,
) -> GradCheckReport:
    """Compare tape gradients of build() against central finite differences.

    `build` must construct a scalar from the current parameter values. Every
    parameter entry is perturbed by +/-step; entries whose relu activation
    pattern differs between the two perturbed evaluations sit on a kink and
    are flagged rather than judged.
    """
    for p in parameters:
        p.zero_gradient()
    with Tape() as tape:
        out = build()
    if out.data.size != 1:
        raise ShapeMismatchError("gradient check builder must produce a scalar")
    backpropagate(tape, out, np.ones_like(out.data))
    analytic = {p.id: p.gradient.data.copy() for p in parameters}

    report = GradCheckReport(tolerance=tolerance, step=step)
    entries: list[GradCheckEntry] = []
    for p in parameters:
        flat = p.value.data.reshape(-1)
        a_flat = analytic[p.id].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus, pat_plus = _eval_scalar_with_pattern(build)
            flat[i] = orig - step
            f_minus, pat_minus = _eval_scalar_with_pattern(build)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            idx = np.unravel_index(i, p.value.data.shape)
            if pat_plus != pat_minus:
                report.n_flagged += 1
                report.flagged.append(
                    GradCheckEntry(p.id, idx, float(a_flat[i]), numeric, 0.0, "nondifferentiable point")
                )
                continue
            rel = _relative_error(float(a_flat[i]), numeric)
            report.n_entries += 1
            entries.append(GradCheckEntry(p.id, idx, float(a_flat[i]), numeric, rel))
    entries.sort(key=lambda e: e.rel_err, reverse=True)
    report.worst = entries[:keep_worst]
    report.max_rel_err = entries[0].rel_err if entries else 0.0
    report.passed = report.max_rel_err < tolerance
    return report
