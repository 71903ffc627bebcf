"""Reverse-mode automatic differentiation on a single-use tape.

Values are numpy float64 arrays (scalars are 0-d arrays). Every operation
appends a node with a vector-Jacobian closure; a backward sweep in reverse
creation order is a valid reverse topological order because inputs always
exist before the outputs that consume them.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "AutodiffError",
    "Tape",
    "DiffTensor",
    "DiffValue",
    "grad",
    "finite_diff_check",
]


class AutodiffError(Exception):
    """Raised for invalid values or invalid tape use.

    Carries the id of the offending tape node in ``node_id`` when the error
    occurred while recording an operation.
    """

    def __init__(self, message, node_id=None):
        if node_id is not None:
            message = f"{message} (node {node_id})"
        super().__init__(message)
        self.node_id = node_id


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents, vjp):
        self.parents = parents  # tuple of node ids
        self.vjp = vjp  # grad_out -> tuple of parent grads


class Tape:
    """Records operations; single-use per backward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def _check_open(self):
        if self._consumed:
            raise AutodiffError("tape already consumed by a backward pass")

    def _append(self, parents, vjp, value) -> "DiffTensor":
        self._check_open()
        self._nodes.append(_Node(parents, vjp))
        return DiffTensor(self, len(self._nodes) - 1, value)

    def tensor(self, value) -> "DiffTensor":
        """Create a leaf tensor (an optimizable input)."""
        value = np.asarray(value, dtype=np.float64)
        return self._append((), None, value)

    # -- backward ---------------------------------------------------------

    def gradients(self, seeds: dict[int, np.ndarray], keep=()) -> list:
        """Sweep the tape once in reverse order from the given seed grads.

        Returns a list of per-node gradient arrays (None where no gradient
        reached). Gradients of intermediate nodes are freed as the sweep
        passes them unless their id is in ``keep``. The tape is consumed
        afterwards.
        """
        self._check_open()
        self._consumed = True
        keep = set(keep)
        accum: list = [None] * len(self._nodes)
        for nid, g in seeds.items():
            accum[nid] = np.array(g, dtype=np.float64)
        for nid in range(len(self._nodes) - 1, -1, -1):
            g = accum[nid]
            if g is None:
                continue
            node = self._nodes[nid]
            if node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if accum[pid] is None:
                    accum[pid] = np.array(pg, dtype=np.float64)
                else:
                    accum[pid] = accum[pid] + pg
            if nid not in keep:
                accum[nid] = None
        return accum


class DiffTensor:
    """A value recorded on a tape. Scalars are 0-d tensors."""

    __slots__ = ("tape", "node_id", "value")

    def __init__(self, tape: Tape, node_id: int, value: np.ndarray):
        if not np.all(np.isfinite(value)):
            raise AutodiffError("non-finite value produced", node_id)
        self.tape = tape
        self.node_id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def _lift(self, other) -> "DiffTensor":
        if isinstance(other, DiffTensor):
            if other.tape is not self.tape:
                raise AutodiffError("operands recorded on different tapes")
            return other
        return self.tape.tensor(other)

    # -- binary -----------------------------------------------------------

    def __add__(self, other):
        b = self._lift(other)
        a = self
        out = a.value + b.value

        def vjp(g):
            return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

        return self.tape._append((a.node_id, b.node_id), vjp, out)

    __radd__ = __add__

    def __sub__(self, other):
        b = self._lift(other)
        a = self
        out = a.value - b.value

        def vjp(g):
            return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

        return self.tape._append((a.node_id, b.node_id), vjp, out)

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        b = self._lift(other)
        a = self
        out = a.value * b.value

        def vjp(g):
            return (
                _unbroadcast(g * b.value, a.shape),
                _unbroadcast(g * a.value, b.shape),
            )

        return self.tape._append((a.node_id, b.node_id), vjp, out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        b = self._lift(other)
        a = self
        if np.any(b.value == 0.0):
            raise AutodiffError("division by zero", b.node_id)
        out = a.value / b.value

        def vjp(g):
            return (
                _unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
            )

        return self.tape._append((a.node_id, b.node_id), vjp, out)

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        a = self
        return self.tape._append(
            (a.node_id,), lambda g: (-g,), -a.value
        )

    def __pow__(self, exponent):
        if isinstance(exponent, DiffTensor):
            raise AutodiffError("power exponent must be a constant")
        a = self
        p = float(exponent)
        out = a.value ** p

        def vjp(g):
            return (g * p * a.value ** (p - 1.0),)

        return self.tape._append((a.node_id,), vjp, out)

    # -- shape ------------------------------------------------------------

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = a.shape
        out = a.value.reshape(shape)

        def vjp(g):
            return (g.reshape(old),)

        return self.tape._append((a.node_id,), vjp, out)

    def sum(self, axis=None):
        a = self
        out = a.value.sum(axis=axis)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            gg = np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape).copy(),)

        return self.tape._append((a.node_id,), vjp, out)

    def mean(self, axis=None):
        a = self
        if axis is None:
            n = a.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= a.shape[ax]
        return self.sum(axis=axis) / float(n)


DiffValue = DiffTensor  # a scalar is a 0-d tensor


# -- unary elementwise ------------------------------------------------------


def _unary(a: DiffTensor, out, dvjp) -> DiffTensor:
    return a.tape._append((a.node_id,), lambda g: (g * dvjp,), out)


def sin(a: DiffTensor) -> DiffTensor:
    return _unary(a, np.sin(a.value), np.cos(a.value))


def cos(a: DiffTensor) -> DiffTensor:
    return _unary(a, np.cos(a.value), -np.sin(a.value))


def tanh(a: DiffTensor) -> DiffTensor:
    t = np.tanh(a.value)
    return _unary(a, t, 1.0 - t * t)


def exp(a: DiffTensor) -> DiffTensor:
    e = np.exp(a.value)
    return _unary(a, e, e)


def log(a: DiffTensor) -> DiffTensor:
    if np.any(a.value <= 0.0):
        raise AutodiffError("log of non-positive value", a.node_id)
    return _unary(a, np.log(a.value), 1.0 / a.value)


def sqrt(a: DiffTensor) -> DiffTensor:
    if np.any(a.value < 0.0):
        raise AutodiffError("sqrt of negative value", a.node_id)
    r = np.sqrt(a.value)
    return _unary(a, r, 0.5 / np.where(r == 0.0, np.inf, r))


def absolute(a: DiffTensor) -> DiffTensor:
    # subgradient 0 at the kink
    return _unary(a, np.abs(a.value), np.sign(a.value))


def clamp(a: DiffTensor, lo: float, hi: float) -> DiffTensor:
    """Clamp with zero gradient outside the active range."""
    active = (a.value > lo) & (a.value < hi)
    return _unary(a, np.clip(a.value, lo, hi), active.astype(np.float64))


# -- binary elementwise -----------------------------------------------------


def minimum(a: DiffTensor, b) -> DiffTensor:
    b = a._lift(b)
    take_a = a.value <= b.value  # left argument wins ties
    out = np.where(take_a, a.value, b.value)

    def vjp(g):
        return (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        )

    return a.tape._append((a.node_id, b.node_id), vjp, out)


def maximum(a: DiffTensor, b) -> DiffTensor:
    b = a._lift(b)
    take_a = a.value >= b.value  # left argument wins ties
    out = np.where(take_a, a.value, b.value)

    def vjp(g):
        return (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        )

    return a.tape._append((a.node_id, b.node_id), vjp, out)


def atan2(y: DiffTensor, x) -> DiffTensor:
    x = y._lift(x)
    denom = x.value * x.value + y.value * y.value
    if np.any(denom == 0.0):
        raise AutodiffError("atan2 at the origin", y.node_id)
    out = np.arctan2(y.value, x.value)

    def vjp(g):
        return (
            _unbroadcast(g * x.value / denom, y.shape),
            _unbroadcast(-g * y.value / denom, x.shape),
        )

    return y.tape._append((y.node_id, x.node_id), vjp, out)


# -- linear algebra / structure ----------------------------------------------


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    b = a._lift(b)
    out = a.value @ b.value

    def vjp(g):
        return (g @ b.value.T, a.value.T @ g)

    return a.tape._append((a.node_id, b.node_id), vjp, out)


def constant_matmul(mat: np.ndarray, x: DiffTensor) -> DiffTensor:
    """``mat @ x`` where ``mat`` is a constant (not differentiated)."""
    mat = np.asarray(mat, dtype=np.float64)

    def vjp(g):
        return (mat.T @ g,)

    return x.tape._append((x.node_id,), vjp, mat @ x.value)


def concat(tensors: list, axis: int = 0) -> DiffTensor:
    tape = tensors[0].tape
    for t in tensors:
        if t.tape is not tape:
            raise AutodiffError("operands recorded on different tapes")
    out = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._append(tuple(t.node_id for t in tensors), vjp, out)


def stack(tensors: list, axis: int = 0) -> DiffTensor:
    tape = tensors[0].tape
    out = np.stack([t.value for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return tape._append(tuple(t.node_id for t in tensors), vjp, out)


def gather_rows(a: DiffTensor, indices) -> DiffTensor:
    """Select rows (axis 0) by an integer index array."""
    idx = np.asarray(indices, dtype=np.intp)
    out = a.value[idx]
    shape = a.shape

    def vjp(g):
        acc = np.zeros(shape, dtype=np.float64)
        np.add.at(acc, idx, g)
        return (acc,)

    return a.tape._append((a.node_id,), vjp, out)


def gather_flat(a: DiffTensor, indices) -> DiffTensor:
    """Select entries of the flattened tensor by an integer index array."""
    idx = np.asarray(indices, dtype=np.intp)
    out = a.value.ravel()[idx]
    shape = a.shape

    def vjp(g):
        acc = np.zeros(int(np.prod(shape)), dtype=np.float64)
        np.add.at(acc, idx, g)
        return (acc.reshape(shape),)

    return a.tape._append((a.node_id,), vjp, out)


def slice_rows(a: DiffTensor, start: int, stop: int) -> DiffTensor:
    out = a.value[start:stop]
    shape = a.shape

    def vjp(g):
        acc = np.zeros(shape, dtype=np.float64)
        acc[start:stop] = g
        return (acc,)

    return a.tape._append((a.node_id,), vjp, out)


def repeat_rows(a: DiffTensor, reps: int) -> DiffTensor:
    """Tile the whole tensor ``reps`` times along axis 0."""
    out = np.concatenate([a.value] * reps, axis=0)
    n = a.shape[0]

    def vjp(g):
        return (sum(g[i * n : (i + 1) * n] for i in range(reps)),)

    return a.tape._append((a.node_id,), vjp, out)


def scatter_into(values: DiffTensor, flat_indices, base: np.ndarray) -> DiffTensor:
    """Write ``values`` into a constant array at unique flat positions.

    Positions not written keep the (constant) base value and carry no
    gradient.
    """
    idx = np.asarray(flat_indices, dtype=np.intp)
    out = np.array(base, dtype=np.float64)
    out.ravel()[idx] = values.value

    def vjp(g):
        return (g.ravel()[idx],)

    return values.tape._append((values.node_id,), vjp, out)


# -- gradients ----------------------------------------------------------------


def grad(f: DiffTensor, params: list) -> list:
    """Gradients of a scalar ``f`` with respect to each tensor in ``params``.

    Consumes the tape. Unused parameters get exact zero gradients of
    matching shape.
    """
    if f.value.shape != ():
        raise AutodiffError("grad target must be a scalar", f.node_id)
    keep = [p.node_id for p in params]
    accum = f.tape.gradients({f.node_id: np.array(1.0)}, keep=keep)
    out = []
    for p in params:
        g = accum[p.node_id]
        out.append(np.zeros(p.shape) if g is None else np.asarray(g))
    return out


def grad_with_seeds(f: DiffTensor, extra_seeds: dict, params: list) -> list:
    """Like ``grad`` but with additional upstream gradients injected.

    ``extra_seeds`` maps DiffTensor -> gradient array added at that node
    before the sweep; used to feed externally computed pixel gradients into
    the tape.
    """
    if f.value.shape != ():
        raise AutodiffError("grad target must be a scalar", f.node_id)
    seeds = {f.node_id: np.array(1.0)}
    for t, g in extra_seeds.items():
        g = np.asarray(g, dtype=np.float64)
        if g.shape != t.shape:
            raise AutodiffError("seed gradient shape mismatch", t.node_id)
        if t.node_id in seeds:
            seeds[t.node_id] = seeds[t.node_id] + g
        else:
            seeds[t.node_id] = g
    accum = f.tape.gradients(seeds, keep=[p.node_id for p in params])
    out = []
    for p in params:
        g = accum[p.node_id]
        out.append(np.zeros(p.shape) if g is None else np.asarray(g))
    return out


def finite_diff_check(build, params: list, eps: float = 1e-6, rng=None,
                      max_coords: int = 64) -> float:
    """Compare tape gradients against central finite differences.

    ``build`` maps a list of DiffTensors (one per entry of ``params``) to a
    scalar DiffValue and must be deterministic. A seeded subset of at most
    ``max_coords`` coordinates is probed; returns the max relative error
    with denominator max(|a|, |b|, 1e-8).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params = [np.asarray(p, dtype=np.float64) for p in params]

    def run(values):
        tape = Tape()
        leaves = [tape.tensor(v) for v in values]
        out = build(leaves)
        return out, leaves

    f0, leaves = run(params)
    analytic = grad(f0, leaves)

    coords = []
    for pi, p in enumerate(params):
        coords.extend((pi, ci) for ci in range(p.size))
    if len(coords) > max_coords:
        chosen = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in sorted(chosen)]

    worst = 0.0
    for pi, ci in coords:
        bumped = [p.copy() for p in params]
        bumped[pi].ravel()[ci] += eps
        fp = run(bumped)[0].value
        bumped[pi].ravel()[ci] -= 2 * eps
        fm = run(bumped)[0].value
        numeric = (fp - fm) / (2 * eps)
        a = float(analytic[pi].ravel()[ci])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, float(err))
    return worst
