"""Small reverse-mode autodiff core on float64 numpy arrays.

Tensors record the operation that produced them; ``backward`` walks the
recorded graph in reverse topological order. Layers are plain functions over
a ``ParamSet`` so parameter snapshots can be copied and shared freely.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "DimensionError",
    "TrainingGuardError",
    "Tensor",
    "ParamSet",
    "as_tensor",
    "concat",
    "minimum",
    "lstm_sequence",
    "backward",
    "init_mlp",
    "forward_mlp",
    "init_lstm",
    "forward_lstm",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"NLNN"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TrainingGuardError(FloatingPointError):
    """Non-finite values reached a parameter update."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_elementwise(a: np.ndarray, b: np.ndarray, op: str) -> None:
    # Same shape, scalar, or a trailing-axis row vector (bias add); nothing more general.
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim == 1 and big.ndim >= 1 and small.shape[0] == big.shape[-1]:
        return
    if a.ndim == b.ndim and all(x == y or x == 1 or y == 1 for x, y in zip(a.shape, b.shape)):
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        _check_elementwise(self.data, other.data, "add")

        def back(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return Tensor(self.data + other.data, _parents=(self, other), _backward=back)

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _backward=lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)
        _check_elementwise(self.data, other.data, "sub")

        def back(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)

        return Tensor(self.data - other.data, _parents=(self, other), _backward=back)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        _check_elementwise(self.data, other.data, "mul")
        a, b = self.data, other.data

        def back(g):
            return _unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)

        return Tensor(a * b, _parents=(self, other), _backward=back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        _check_elementwise(self.data, other.data, "div")
        a, b = self.data, other.data

        def back(g):
            return _unbroadcast(g / b, self.shape), _unbroadcast(-g * a / (b * b), other.shape)

        return Tensor(a / b, _parents=(self, other), _backward=back)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        a = self.data
        return Tensor(a ** exponent, _parents=(self,),
                      _backward=lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
            raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

        def back(g):
            if a.ndim == 1:
                return g @ b.T, np.outer(a, g)
            return g @ b.T, a.T @ g

        return Tensor(a @ b, _parents=(self, other), _backward=back)

    def __getitem__(self, index):
        shape = self.shape
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts)

        def back(g):
            full = np.zeros(shape)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor(self.data[index], _parents=(self,), _backward=back)

    # -- elementwise functions -----------------------------------------
    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * (1.0 - out * out),))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * out * (1.0 - out),))

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * out,))

    def log(self):
        a = self.data
        return Tensor(np.log(a), _parents=(self,), _backward=lambda g: (g / a,))

    def square(self):
        a = self.data
        return Tensor(a * a, _parents=(self,), _backward=lambda g: (2.0 * g * a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: (0.5 * g / out,))

    def clip(self, lo: float, hi: float):
        a = self.data
        inside = (a >= lo) & (a <= hi)
        return Tensor(np.clip(a, lo, hi), _parents=(self,), _backward=lambda g: (g * inside,))

    # -- reductions -----------------------------------------------------
    def sum(self, axis: int | None = None):
        shape = self.shape

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(self.data.sum(axis=axis), _parents=(self,), _backward=back)

    def mean(self, axis: int | None = None):
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / count)

    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.data.reshape(*shape), _parents=(self,),
                      _backward=lambda g: (g.reshape(old),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split on sign so large |x| never overflows exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: list, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  _parents=tuple(tensors), _backward=back)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"minimum: shapes differ {a.shape} vs {b.shape}")
    take_a = a.data <= b.data

    def back(g):
        return g * take_a, g * ~take_a

    return Tensor(np.where(take_a, a.data, b.data), _parents=(a, b), _backward=back)


def lstm_sequence(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """Run a single-layer LSTM over ``x`` of shape (T, B, in); return h_T (B, H).

    Recorded as one graph node with an exact backpropagation-through-time
    backward. Gate column order is input, forget, cell, output.
    """
    xs = x.data
    steps, batch, _ = xs.shape
    hidden = w_h.shape[0]
    wx, wh = w_x.data, w_h.data
    proj = (xs.reshape(steps * batch, -1) @ wx + b.data).reshape(steps, batch, 4 * hidden)

    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    cache = []
    for t in range(steps):
        z = proj[t] + h @ wh
        i = _sigmoid(z[:, :hidden])
        f = _sigmoid(z[:, hidden:2 * hidden])
        gc = np.tanh(z[:, 2 * hidden:3 * hidden])
        o = _sigmoid(z[:, 3 * hidden:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * gc
        tc = np.tanh(c)
        h = o * tc
        cache.append((h_prev, c_prev, i, f, gc, o, tc))

    def back(g_h):
        dz_all = np.empty((steps, batch, 4 * hidden))
        dwh = np.zeros_like(wh)
        dh = g_h
        dc = np.zeros((batch, hidden))
        for t in range(steps - 1, -1, -1):
            h_prev, c_prev, i, f, gc, o, tc = cache[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            di = dc * gc
            dgc = dc * i
            df = dc * c_prev
            dz = dz_all[t]
            dz[:, :hidden] = di * i * (1.0 - i)
            dz[:, hidden:2 * hidden] = df * f * (1.0 - f)
            dz[:, 2 * hidden:3 * hidden] = dgc * (1.0 - gc * gc)
            dz[:, 3 * hidden:] = do * o * (1.0 - o)
            dwh += h_prev.T @ dz
            dh = dz @ wh.T
            dc = dc * f
        flat = dz_all.reshape(steps * batch, 4 * hidden)
        dx = (flat @ wx.T).reshape(xs.shape)
        dwx = xs.reshape(steps * batch, -1).T @ flat
        db = flat.sum(axis=0)
        return dx, dwx, dwh, db

    return Tensor(h, _parents=(x, w_x, w_h, b), _backward=back)


def backward(loss: Tensor, params=None) -> dict:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a gradient map over ``params`` (a ParamSet or list of them); any
    parameter not on a path to ``loss`` gets a zero array.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    if params is None:
        return {}
    sets = [params] if isinstance(params, ParamSet) else list(params)
    out = {}
    for ps in sets:
        for name, t in ps.tensors.items():
            out[ps.qualified(name)] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return out


class ParamSet:
    """Named parameters of one network plus their Adam moments."""

    def __init__(self, name: str, tensors: dict | None = None, meta: dict | None = None):
        self.name = name
        self.tensors: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}
        self.meta = dict(meta or {})
        for key, value in (tensors or {}).items():
            self.add(key, value)

    def add(self, key: str, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=key)
        self.tensors[key] = t
        self.m[key] = np.zeros_like(t.data)
        self.v[key] = np.zeros_like(t.data)
        self.steps[key] = 0
        return t

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def __contains__(self, key: str) -> bool:
        return key in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def qualified(self, key: str) -> str:
        return f"{self.name}.{key}"

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict:
        return {self.qualified(k): (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.tensors.items()}

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ParamSet":
        clone = ParamSet(self.name, {k: t.data.copy() for k, t in self.tensors.items()}, self.meta)
        for k in self.tensors:
            clone.m[k] = self.m[k].copy()
            clone.v[k] = self.v[k].copy()
            clone.steps[k] = self.steps[k]
        return clone

    def num_values(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_mlp(name: str, sizes: list, rng: np.random.Generator) -> ParamSet:
    """Dense layers ``sizes[0] -> ... -> sizes[-1]``, uniform(+-1/sqrt(fan_in)) init."""
    ps = ParamSet(name, meta={"kind": "mlp", "sizes": list(sizes)})
    for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        ps.add(f"W{layer}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        ps.add(f"b{layer}", rng.uniform(-bound, bound, size=fan_out))
    return ps


_ACTIVATIONS = {
    "tanh": Tensor.tanh,
    "sigmoid": Tensor.sigmoid,
    "linear": lambda t: t,
}


def forward_mlp(params: ParamSet, x, hidden: str = "tanh", output: str = "linear",
                prefix: str = "") -> Tensor:
    x = as_tensor(x)
    layers = 0
    while f"{prefix}W{layers}" in params:
        layers += 1
    if layers == 0:
        raise DimensionError(f"{params.name}: no dense layers with prefix {prefix!r}")
    in_width = params[f"{prefix}W0"].shape[0]
    if x.shape[-1] != in_width:
        raise DimensionError(f"{params.name}: input width {x.shape[-1]} != {in_width}")
    for layer in range(layers):
        x = x @ params[f"{prefix}W{layer}"] + params[f"{prefix}b{layer}"]
        x = _ACTIVATIONS[output if layer == layers - 1 else hidden](x)
    return x


def init_lstm(name: str, in_width: int, hidden: int, rng: np.random.Generator,
              prefix: str = "lstm_", ps: ParamSet | None = None) -> ParamSet:
    """Add LSTM weights to ``ps`` (or a new ParamSet); forget-gate bias starts at +1."""
    ps = ps if ps is not None else ParamSet(name)
    bound = 1.0 / np.sqrt(hidden)
    bias = rng.uniform(-bound, bound, size=4 * hidden)
    bias[hidden:2 * hidden] += 1.0
    ps.add(f"{prefix}Wx", rng.uniform(-bound, bound, size=(in_width, 4 * hidden)))
    ps.add(f"{prefix}Wh", rng.uniform(-bound, bound, size=(hidden, 4 * hidden)))
    ps.add(f"{prefix}b", bias)
    return ps


def forward_lstm(params: ParamSet, seq, prefix: str = "lstm_") -> Tensor:
    """Final hidden state of the LSTM over ``seq``.

    ``seq`` is a non-empty list of (in,) or (B, in) tensors, or an array
    shaped (T, in) / (T, B, in). Unbatched input yields an (H,) output.
    """
    if isinstance(seq, (list, tuple)):
        if not seq:
            raise ValueError("forward_lstm needs a non-empty sequence")
        items = [as_tensor(s) for s in seq]
        widths = {s.shape[-1] for s in items}
        if len(widths) != 1:
            raise DimensionError(f"sequence elements have mixed widths {sorted(widths)}")
        x = concat([s.reshape(1, *s.shape) for s in items], axis=0)
    else:
        x = as_tensor(seq)
    if x.shape[0] == 0:
        raise ValueError("forward_lstm needs a non-empty sequence")
    single = x.ndim == 2
    if single:
        x = x.reshape(x.shape[0], 1, x.shape[1])
    w_x = params[f"{prefix}Wx"]
    if x.shape[-1] != w_x.shape[0]:
        raise DimensionError(f"{params.name}: LSTM input width {x.shape[-1]} != {w_x.shape[0]}")
    h = lstm_sequence(x, w_x, params[f"{prefix}Wh"], params[f"{prefix}b"])
    return h.reshape(h.shape[1]) if single else h


def adam_step(params: ParamSet, grads: dict, lr: float) -> ParamSet:
    """One Adam update in place; ``grads`` keys may be bare or qualified names."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    resolved = {}
    for key, t in params.tensors.items():
        g = grads.get(params.qualified(key), grads.get(key))
        if g is None:
            g = np.zeros_like(t.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != t.shape:
            raise DimensionError(f"{params.qualified(key)}: grad shape {g.shape} != {t.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise TrainingGuardError(f"{params.qualified(key)}: {bad} non-finite gradient entries")
        resolved[key] = g
    for key, g in resolved.items():
        step = params.steps[key] + 1
        params.steps[key] = step
        m = params.m[key] = ADAM_BETA1 * params.m[key] + (1 - ADAM_BETA1) * g
        v = params.v[key] = ADAM_BETA2 * params.v[key] + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** step)
        v_hat = v / (1 - ADAM_BETA2 ** step)
        params.tensors[key].data -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return params


def save_checkpoint(params: ParamSet, path) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for key, t in params.tensors.items():
        name = key.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, name: str | None = None) -> ParamSet:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    ps = ParamSet(name or path.stem)
    offset = 8
    try:
        while offset < len(raw):
            (n,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            key = raw[offset:offset + n].decode("utf-8")
            offset += n
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if offset + 8 * count > len(raw):
                raise ValueError(f"{path}: truncated values for {key!r} at byte {offset}")
            values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
            ps.add(key, values.reshape(shape).astype(np.float64))
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint at byte {offset}") from exc
    return ps
