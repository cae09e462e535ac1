"""Tape-based automatic differentiation with first-class forward-mode tangents.

The engine serves one specific need: losses that contain *derivatives of
network outputs with respect to network inputs* (time, embeddings) must
themselves be differentiated with respect to network parameters.  We get
this nesting cheaply because input dimensions are tiny (time is scalar,
embeddings are ~20-dim):

* inner derivatives are propagated forward as dual-number tangents,
* tangent arithmetic is recorded on the same reverse-mode tape as the
  values, so a single reverse sweep differentiates any expression built
  from values *and* tangents with respect to the parameters.

Values are float64 numpy arrays of any shape; elementwise ops broadcast.
A tape is single-threaded and rebuilt per training step.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Node",
    "Dual",
    "grad",
    "directional_derivative",
    "jacobian",
    "GradientError",
    "TapeError",
    "TangentSeedError",
]


class TapeError(ValueError):
    """Node or parameter used with a tape it does not belong to."""


class GradientError(RuntimeError):
    """A reverse sweep produced a non-finite gradient."""


class TangentSeedError(ValueError):
    """Forward-mode seeding is missing or ambiguous."""


def _as_array(x):
    a = np.asarray(x, dtype=np.float64)
    return a


class Tape:
    """Records primitive operations in creation (topological) order.

    Leaves are created through :meth:`param` (registered, differentiable),
    :meth:`constant` (opaque to the reverse sweep) or the seed helpers for
    forward mode.  Everything downstream is created by operating on nodes.
    """

    __slots__ = ("nodes", "params", "seeds")

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.seeds: list[Node] = []

    def param(self, value, name: str) -> "Node":
        if name in self.params:
            raise TapeError(f"parameter {name!r} already registered on this tape")
        n = Node(_as_array(value), self, op="param")
        n.is_param = True
        self.params[name] = n
        return n

    def constant(self, value) -> "Node":
        return Node(_as_array(value), self, op="const")

    def seed_scalar(self, value) -> "Dual":
        """Forward-mode input with unit tangent (one derivative direction).

        For an array value the tangent is elementwise ones: each entry is
        an independent evaluation point differentiated w.r.t. itself.
        """
        v = self.constant(value)
        t = self.constant(np.ones_like(v.value))
        self.seeds.append(v)
        return Dual(v, t)

    def seed_vector(self, value) -> "Dual":
        """Forward-mode vector input with identity tangent (all directions).

        Tangents carry a leading direction axis, so downstream tangents of
        a length-m output have shape (len(value), m).
        """
        v = self.constant(value)
        d = v.value.shape[-1] if v.value.ndim else 1
        t = self.constant(np.eye(d))
        self.seeds.append(v)
        return Dual(v, t)


class Node:
    """A value on the tape plus the local reverse rule that produced it."""

    __slots__ = ("value", "tape", "vjp", "op", "adj", "is_param")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value: np.ndarray, tape: Tape, op: str = "leaf", vjp=None):
        self.value = value
        self.tape = tape
        self.vjp = vjp
        self.op = op
        self.adj = None
        self.is_param = False
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    # -- binary elementwise ops -------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        if isinstance(other, Node):
            _check(self, other)
            out = Node(self.value + other.value, self.tape, "add")
            a, b = self, other

            def vjp(g):
                _acc(a, g)
                _acc(b, g)

            out.vjp = vjp
            return out
        c = _as_array(other)
        out = Node(self.value + c, self.tape, "add")
        a = self
        out.vjp = lambda g: _acc(a, g)
        return out

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        if isinstance(other, Node):
            _check(self, other)
            out = Node(self.value - other.value, self.tape, "sub")
            a, b = self, other

            def vjp(g):
                _acc(a, g)
                _acc(b, -g)

            out.vjp = vjp
            return out
        out = Node(self.value - _as_array(other), self.tape, "sub")
        a = self
        out.vjp = lambda g: _acc(a, g)
        return out

    def __rsub__(self, other):
        out = Node(_as_array(other) - self.value, self.tape, "rsub")
        a = self
        out.vjp = lambda g: _acc(a, -g)
        return out

    def __mul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        if isinstance(other, Node):
            _check(self, other)
            out = Node(self.value * other.value, self.tape, "mul")
            a, b = self, other
            av, bv = self.value, other.value

            def vjp(g):
                _acc(a, g * bv)
                _acc(b, g * av)

            out.vjp = vjp
            return out
        c = _as_array(other)
        out = Node(self.value * c, self.tape, "mul")
        a = self
        out.vjp = lambda g: _acc(a, g * c)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        if isinstance(other, Node):
            _check(self, other)
            out = Node(self.value / other.value, self.tape, "div")
            a, b = self, other
            av, bv = self.value, other.value

            def vjp(g):
                _acc(a, g / bv)
                _acc(b, -g * av / (bv * bv))

            out.vjp = vjp
            return out
        c = _as_array(other)
        out = Node(self.value / c, self.tape, "div")
        a = self
        out.vjp = lambda g: _acc(a, g / c)
        return out

    def __rtruediv__(self, other):
        c = _as_array(other)
        out = Node(c / self.value, self.tape, "rdiv")
        a = self
        av = self.value

        def vjp(g):
            _acc(a, -g * c / (av * av))

        out.vjp = vjp
        return out

    def __neg__(self):
        out = Node(-self.value, self.tape, "neg")
        a = self
        out.vjp = lambda g: _acc(a, -g)
        return out

    def __pow__(self, p):
        p = float(p)
        out = Node(self.value ** p, self.tape, "pow")
        a = self
        av = self.value
        out.vjp = lambda g: _acc(a, g * p * av ** (p - 1.0))
        return out

    def __matmul__(self, other):
        if isinstance(other, Node):
            _check(self, other)
            out = Node(self.value @ other.value, self.tape, "matmul")
            a, b = self, other
            av, bv = self.value, other.value

            def vjp(g):
                _acc_matmul_left(a, g, bv)
                _acc_matmul_right(b, g, av)

            out.vjp = vjp
            return out
        c = _as_array(other)
        out = Node(self.value @ c, self.tape, "matmul")
        a = self
        out.vjp = lambda g: _acc_matmul_left(a, g, c)
        return out

    def __rmatmul__(self, other):
        c = _as_array(other)
        out = Node(c @ self.value, self.tape, "rmatmul")
        b = self
        out.vjp = lambda g: _acc_matmul_right(b, g, c)
        return out

    def __getitem__(self, idx):
        out = Node(self.value[idx], self.tape, "slice")
        a = self
        shape = self.value.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            _acc(a, full)

        out.vjp = vjp
        return out

    # -- reductions / shape ------------------------------------------------

    def sum(self, axis=None):
        out = Node(self.value.sum(axis=axis), self.tape, "sum")
        a = self
        shape = self.value.shape

        def vjp(g):
            if axis is None:
                _acc(a, np.broadcast_to(g, shape))
            else:
                _acc(a, np.broadcast_to(np.expand_dims(g, axis), shape))

        out.vjp = vjp
        return out

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        out = Node(self.value.reshape(*shape), self.tape, "reshape")
        a = self
        old = self.value.shape
        out.vjp = lambda g: _acc(a, g.reshape(old))
        return out

    @property
    def T(self):
        out = Node(self.value.T, self.tape, "transpose")
        a = self
        out.vjp = lambda g: _acc(a, g.T)
        return out

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"


def _check(a: Node, b: Node):
    if a.tape is not b.tape:
        raise TapeError("operands live on different tapes")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _acc(n: Node, g: np.ndarray):
    g = _unbroadcast(np.asarray(g), n.value.shape)
    n.adj = g if n.adj is None else n.adj + g


def _acc_matmul_left(a: Node, g, bv):
    # d(A@B)/dA for the 1-D/2-D cases we use
    if a.value.ndim == 1 and bv.ndim == 2:
        _acc(a, g @ bv.T)
    elif a.value.ndim == 2 and bv.ndim == 2:
        _acc(a, g @ bv.T)
    elif a.value.ndim == 2 and bv.ndim == 1:
        _acc(a, np.outer(g, bv))
    else:  # 1-D @ 1-D inner product
        _acc(a, g * bv)


def _acc_matmul_right(b: Node, g, av):
    if b.value.ndim == 2 and av.ndim == 2:
        _acc(b, av.T @ g)
    elif b.value.ndim == 2 and av.ndim == 1:
        _acc(b, np.outer(av, g))
    elif b.value.ndim == 1 and av.ndim == 2:
        _acc(b, av.T @ g if np.ndim(g) == 1 else av.T @ g)
    else:
        _acc(b, g * av)


# -- unary primitives -------------------------------------------------------

def _unary(x: Node, val: np.ndarray, dfdx: np.ndarray, op: str) -> Node:
    out = Node(val, x.tape, op)

    def vjp(g):
        _acc(x, g * dfdx)

    out.vjp = vjp
    return out


def exp(x):
    if isinstance(x, Dual):
        v = exp(x.val)
        return Dual(v, None if x.tan is None else x.tan * v)
    if isinstance(x, Node):
        v = np.exp(x.value)
        return _unary(x, v, v, "exp")
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.val), None if x.tan is None else x.tan / x.val)
    if isinstance(x, Node):
        return _unary(x, np.log(x.value), 1.0 / x.value, "log")
    return np.log(x)


def tanh(x):
    if isinstance(x, Dual):
        v = tanh(x.val)
        return Dual(v, None if x.tan is None else x.tan * (1.0 - v * v))
    if isinstance(x, Node):
        v = np.tanh(x.value)
        return _unary(x, v, 1.0 - v * v, "tanh")
    return np.tanh(x)


def sigmoid(x):
    if isinstance(x, Dual):
        v = sigmoid(x.val)
        return Dual(v, None if x.tan is None else x.tan * (v * (1.0 - v)))
    if isinstance(x, Node):
        v = 1.0 / (1.0 + np.exp(-x.value))
        return _unary(x, v, v * (1.0 - v), "sigmoid")
    return 1.0 / (1.0 + np.exp(-x))


def sin(x):
    if isinstance(x, Dual):
        return Dual(sin(x.val), None if x.tan is None else x.tan * cos_const(x.val))
    if isinstance(x, Node):
        return _unary(x, np.sin(x.value), np.cos(x.value), "sin")
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(cos(x.val), None if x.tan is None else x.tan * (-sin_const(x.val)))
    if isinstance(x, Node):
        return _unary(x, np.cos(x.value), -np.sin(x.value), "cos")
    return np.cos(x)


def cos_const(x: Node) -> np.ndarray:
    return np.cos(x.value)


def sin_const(x: Node) -> np.ndarray:
    return np.sin(x.value)


def relu(x):
    if isinstance(x, Dual):
        mask = (x.val.value > 0).astype(np.float64)
        return Dual(relu(x.val), None if x.tan is None else x.tan * mask)
    if isinstance(x, Node):
        mask = (x.value > 0).astype(np.float64)
        return _unary(x, x.value * mask, mask, "relu")
    return np.maximum(x, 0.0)


def concat(xs, axis=0):
    xs = list(xs)
    tape = xs[0].tape
    vals = [x.value for x in xs]
    out = Node(np.concatenate(vals, axis=axis), tape, "concat")
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        for x, piece in zip(xs, np.split(g, splits, axis=axis)):
            _acc(x, piece)

    out.vjp = vjp
    return out


def stack(xs, axis=0):
    xs = list(xs)
    tape = xs[0].tape
    out = Node(np.stack([x.value for x in xs], axis=axis), tape, "stack")

    def vjp(g):
        for i, x in enumerate(xs):
            _acc(x, np.take(g, i, axis=axis))

    out.vjp = vjp
    return out


# -- reverse sweep -----------------------------------------------------------

def grad(loss: Node, params, check_finite: bool = True):
    """Gradient of a scalar node with respect to registered parameters.

    Parameters without a path to the loss get an exactly-zero array of
    their shape.  Raises :class:`GradientError` naming the first offending
    node if a non-finite adjoint shows up anywhere in the sweep.
    """
    if not isinstance(loss, Node):
        raise TypeError("loss must be a Node")
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    params = list(params)
    tape = loss.tape
    for p in params:
        if not isinstance(p, Node) or not p.is_param or p.tape is not tape:
            raise TapeError("parameter is not registered on the loss's tape")

    nodes = tape.nodes
    for n in nodes:
        n.adj = None
    loss.adj = np.ones_like(loss.value)
    for n in reversed(nodes):
        if n.adj is None or n.vjp is None:
            continue
        n.vjp(n.adj)

    grads = [p.adj if p.adj is not None else np.zeros_like(p.value) for p in params]
    if check_finite and any(not np.all(np.isfinite(g)) for g in grads):
        for i, n in enumerate(nodes):
            bad_val = not np.all(np.isfinite(n.value))
            bad_adj = n.adj is not None and not np.all(np.isfinite(n.adj))
            if bad_val or bad_adj:
                raise GradientError(
                    f"non-finite gradient: first offending node #{i} (op={n.op}, "
                    f"{'value' if bad_val else 'adjoint'} is not finite)"
                )
        raise GradientError("non-finite gradient")
    return grads


class Dual:
    """Forward-mode pair (value, tangent); both components are tape nodes.

    ``tan is None`` means an identically-zero tangent and skips the
    bookkeeping.  Tangents of vector seeds carry a leading direction axis.
    """

    __slots__ = ("val", "tan")
    __array_ufunc__ = None

    def __init__(self, val: Node, tan):
        self.val = val
        self.tan = tan

    @property
    def value(self):
        return self.val.value

    @staticmethod
    def lift(x, tape: Tape) -> "Dual":
        if isinstance(x, Dual):
            return x
        if isinstance(x, Node):
            return Dual(x, None)
        return Dual(tape.constant(x), None)

    def __add__(self, other):
        o = Dual.lift(other, self.val.tape)
        if self.tan is None:
            t = o.tan
        elif o.tan is None:
            t = self.tan
        else:
            t = self.tan + o.tan
        return Dual(self.val + o.val, t)

    __radd__ = __add__

    def __sub__(self, other):
        o = Dual.lift(other, self.val.tape)
        if self.tan is None:
            t = None if o.tan is None else -o.tan
        elif o.tan is None:
            t = self.tan
        else:
            t = self.tan - o.tan
        return Dual(self.val - o.val, t)

    def __rsub__(self, other):
        o = Dual.lift(other, self.val.tape)
        return o - self

    def __mul__(self, other):
        o = Dual.lift(other, self.val.tape)
        t = None
        if self.tan is not None:
            t = self.tan * o.val
        if o.tan is not None:
            t2 = o.tan * self.val
            t = t2 if t is None else t + t2
        return Dual(self.val * o.val, t)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = Dual.lift(other, self.val.tape)
        v = self.val / o.val
        t = None
        if self.tan is not None:
            t = self.tan / o.val
        if o.tan is not None:
            t2 = v * o.tan / o.val
            t = -t2 if t is None else t - t2
        return Dual(v, t)

    def __rtruediv__(self, other):
        o = Dual.lift(other, self.val.tape)
        return o / self

    def __neg__(self):
        return Dual(-self.val, None if self.tan is None else -self.tan)

    def __pow__(self, p):
        v = self.val ** p
        t = None
        if self.tan is not None:
            t = self.tan * (float(p) * self.val ** (float(p) - 1.0))
        return Dual(v, t)

    def __matmul__(self, other):
        o = Dual.lift(other, self.val.tape)
        v = self.val @ o.val
        t = None
        if self.tan is not None:
            t = self.tan @ o.val
        if o.tan is not None:
            t2 = self.val @ o.tan
            t = t2 if t is None else t + t2
        return Dual(v, t)

    def __getitem__(self, idx):
        tan = self.tan
        if tan is None:
            return Dual(self.val[idx], None)
        if tan.value.ndim == self.val.value.ndim + 1:
            # leading direction axis: shift the index
            return Dual(self.val[idx], tan[(slice(None),) + (idx if isinstance(idx, tuple) else (idx,))])
        return Dual(self.val[idx], tan[idx])

    def sum(self, axis=None):
        v = self.val.sum(axis=axis)
        if self.tan is None:
            return Dual(v, None)
        if self.tan.value.ndim == self.val.value.ndim + 1 and axis is not None:
            t = self.tan.sum(axis=axis + 1 if axis >= 0 else axis)
        else:
            t = self.tan.sum(axis=axis)
        return Dual(v, t)

    def mean(self, axis=None):
        n = self.val.value.size if axis is None else self.val.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        v = self.val.reshape(*shape)
        if self.tan is None:
            return Dual(v, None)
        if self.tan.value.ndim == self.val.value.ndim + 1:
            d0 = self.tan.value.shape[0]
            return Dual(v, self.tan.reshape((d0,) + v.value.shape))
        return Dual(v, self.tan.reshape(*shape))


def dual_concat(xs, axis=0):
    xs = list(xs)
    tape = xs[0].val.tape
    vals = concat([x.val for x in xs], axis=axis)
    if all(x.tan is None for x in xs):
        return Dual(vals, None)
    tans = []
    for x in xs:
        if x.tan is None:
            tans.append(tape.constant(np.zeros_like(x.val.value)))
        else:
            tans.append(x.tan)
    return Dual(vals, concat(tans, axis=axis))


def directional_derivative(output, seed: Dual):
    """Tangent component of forward-mode outputs: d(output_i)/d(seed input).

    The result is a live tape node, so losses built from it stay
    differentiable with respect to parameters (the nesting contract).
    """
    tape = seed.val.tape
    if len(tape.seeds) == 0:
        raise TangentSeedError("no tangent was seeded on this tape")
    if len(tape.seeds) > 1:
        raise TangentSeedError(
            f"{len(tape.seeds)} tangent seeds on one tape; directional derivative is ambiguous"
        )
    if tape.seeds[0] is not seed.val:
        raise TangentSeedError("seed argument is not the tape's seeded input")
    if isinstance(output, Dual):
        if output.tan is None:
            return tape.constant(np.zeros_like(output.val.value))
        return output.tan
    raise TypeError("output must be a forward-mode Dual")


def jacobian(output: Dual, seed: Dual):
    """Jacobian d(output)/d(seed) for a vector seed with identity tangent.

    Returns an (output-dim x input-dim) node whose rows remain
    differentiable by :func:`grad`.
    """
    tape = seed.val.tape
    if len(tape.seeds) != 1 or tape.seeds[0] is not seed.val:
        raise TangentSeedError("jacobian needs exactly one identity-seeded vector input")
    d_in = seed.val.value.shape[-1]
    if seed.tan is None or seed.tan.value.shape != (d_in, d_in):
        raise ValueError("seed tangent must be the identity matrix (use Tape.seed_vector)")
    if output.val.value.ndim != 1:
        raise ValueError(f"output must be a vector, got shape {output.val.value.shape}")
    if output.tan is None:
        return tape.constant(np.zeros((output.val.value.shape[0], d_in)))
    # tangent has shape (d_in, d_out): direction-major; transpose to rows=outputs
    return output.tan.T
