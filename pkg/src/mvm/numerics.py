"""Dense numpy arrays with tape-based reverse-mode differentiation.

Every operation checks operand shapes eagerly; there is no implicit
broadcasting beyond what each operation documents.  A forward pass
records onto a tape only while a :class:`Tape` is active in the current
context, so plain forward evaluation is reentrant::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = mean(matmul(x, w))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import OracleFailure, ShapeError

COSINE_EPS = 1e-8
LAYER_NORM_EPS = 1e-5

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "mvm_active_tape", default=None
)


class Tensor:
    """A real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


# Public alias matching the data-model name.
DifferentiableArray = Tensor


class Tape:
    """Ordered record of executed operations, replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._records.append((out, inputs, backward))

    def clear(self) -> None:
        self._records.clear()

    def backward(self, loss: Tensor) -> None:
        """Propagate adjoints from a scalar ``loss`` to every recorded input.

        Gradients accumulate into ``.grad`` of each tensor that requires
        them; callers zero parameter gradients between steps.
        """
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self._records):
            if out.grad is None:
                continue
            for inp, g in zip(inputs, fn(out.grad)):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g


def active_tape() -> Tape | None:
    return _active_tape.get()


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires)
    if requires:
        tape = _active_tape.get()
        if tape is not None:
            tape.record(out, inputs, backward)
    return out


def _same_shape(op: str, *tensors: Tensor) -> None:
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeError(f"{op}: shape mismatch {first} vs {t.shape}")


def _finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{op}: non-finite input")


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.shape[-1:] != bias.shape:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match last axis of {x.shape}")

    def backward(g):
        return g, g.reshape(-1, bias.shape[0]).sum(axis=0)

    return _result(x.data + bias.data, (x, bias), backward)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for ``x`` of shape (..., k) and a 2-D ``w`` of shape (k, n)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {x.shape} by {w.shape}")
    out = x.data @ w.data

    def backward(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return _result(out, (x, w), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {x.shape} -> {shape}: {exc}") from None
    original = x.shape
    return _result(out, (x,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (feature axis by default)."""
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,))


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant (non-differentiable) array of the same shape."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=x.dtype)
    if c.shape != x.shape:
        raise ShapeError(f"mul_const: shape mismatch {x.shape} vs {c.shape}")
    return _result(x.data * c, (x,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# similarity, normalisation and classification
# ---------------------------------------------------------------------------


def _unit(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    clamped = norm < eps
    denom = np.where(clamped, eps, norm)
    return x / denom, denom, ~clamped


def _unit_backward(dunit: np.ndarray, unit: np.ndarray, denom: np.ndarray, live: np.ndarray) -> np.ndarray:
    # d(x/max(|x|,eps)); the clamp is treated as constant (subgradient 0)
    radial = np.sum(unit * dunit, axis=-1, keepdims=True) * live
    return (dunit - unit * radial) / denom


def cosine_similarity(x: Tensor, y: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity along the last axis; ``(..., D), (..., D) -> (...)``."""
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError("cosine_similarity: vectors must have length >= 1")
    _same_shape("cosine_similarity", x, y)
    xu, xd, xl = _unit(x.data, eps)
    yu, yd, yl = _unit(y.data, eps)
    out = np.sum(xu * yu, axis=-1)

    def backward(g):
        g = g[..., None]
        return _unit_backward(g * yu, xu, xd, xl), _unit_backward(g * xu, yu, yd, yl)

    return _result(out, (x, y), backward)


def cosine_scores(query: Tensor, keys: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity of every query against every key slot, per head.

    ``query`` has shape (..., h, d) and ``keys`` shape (h, N, d); the result
    has shape (..., h, N).
    """
    query, keys = as_tensor(query), as_tensor(keys)
    if keys.ndim != 3 or query.ndim < 2 or query.shape[-2:] != (keys.shape[0], keys.shape[2]):
        raise ShapeError(f"cosine_scores: query {query.shape} incompatible with keys {keys.shape}")
    h, n, d = keys.shape
    lead = query.shape[:-2]
    qu, qd, ql = _unit(query.data, eps)
    ku, kd, kl = _unit(keys.data, eps)
    q_hmd = qu.reshape(-1, h, d).transpose(1, 0, 2)  # (h, M, d)
    scores = np.matmul(q_hmd, ku.transpose(0, 2, 1))  # (h, M, N)
    out = scores.transpose(1, 0, 2).reshape(lead + (h, n))

    def backward(g):
        g_hmn = g.reshape(-1, h, n).transpose(1, 0, 2)
        dqu = np.matmul(g_hmn, ku).transpose(1, 0, 2).reshape(query.shape)
        dku = np.matmul(g_hmn.transpose(0, 2, 1), q_hmd)
        return _unit_backward(dqu, qu, qd, ql), _unit_backward(dku, ku, kd, kl)

    return _result(out, (query, keys), backward)


def scaled_softmax(scores: Tensor, alpha: float) -> Tensor:
    """``softmax(alpha * scores)`` over the last axis."""
    scores = as_tensor(scores)
    alpha = float(alpha)
    if alpha < 0 or not np.isfinite(alpha):
        raise ValueError(f"scaled_softmax: alpha must be finite and >= 0, got {alpha}")
    _finite("scaled_softmax", scores.data)
    z = alpha * scores.data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (alpha * p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _result(p, (scores,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each vector along the last axis, then apply gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt(np.mean(centred * centred, axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return dx, np.sum(flat_g * xhat.reshape(-1, d), axis=0), flat_g.sum(axis=0)

    return _result(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the leading axes.

    ``logits`` is (..., K) and ``labels`` an integer array of shape (...);
    a single logit vector with a scalar label is the unbatched case.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if k < 2:
        raise ShapeError("cross_entropy: need at least two classes")
    if labels.shape != logits.shape[:-1] or not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    z = logits.data.reshape(-1, k)
    flat = labels.reshape(-1)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(flat.size)
    out = np.mean(logsumexp - z[rows, flat])

    def backward(g):
        p = np.exp(z - logsumexp[:, None])
        p[rows, flat] -= 1.0
        return (((g / flat.size) * p).reshape(logits.shape),)

    return _result(np.asarray(out, dtype=logits.dtype), (logits,), backward)


def cross_entropy_from_logits(logits: Tensor, label: int) -> Tensor:
    return cross_entropy(logits, np.asarray(label, dtype=np.int64))


# ---------------------------------------------------------------------------
# sequence operations
# ---------------------------------------------------------------------------


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Same-padded temporal convolution.

    ``x`` is (B, T, C_in), ``weight`` (k, C_in, C_out), ``bias`` (C_out,).
    Zero padding keeps the frame count at T.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 3 or weight.ndim != 3 or weight.shape[1] != x.shape[2] or bias.shape != (weight.shape[2],):
        raise ShapeError(f"conv1d: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    if dilation < 1:
        raise ValueError("conv1d: dilation must be >= 1")
    b, t, c = x.shape
    k, _, o = weight.shape
    span = (k - 1) * dilation
    left = span // 2
    padded = np.zeros((b, t + span, c), dtype=x.dtype)
    padded[:, left:left + t] = x.data
    cols = np.stack([padded[:, i * dilation:i * dilation + t] for i in range(k)], axis=2)
    cols = cols.reshape(b, t, k * c)
    w2 = weight.data.reshape(k * c, o)
    out = cols @ w2 + bias.data

    def backward(g):
        g2 = g.reshape(-1, o)
        gw = (cols.reshape(-1, k * c).T @ g2).reshape(weight.shape)
        gcols = (g @ w2.T).reshape(b, t, k, c)
        gpad = np.zeros_like(padded)
        for i in range(k):
            gpad[:, i * dilation:i * dilation + t] += gcols[:, :, i]
        return gpad[:, left:left + t], gw, g2.sum(axis=0)

    return _result(out, (x, weight, bias), backward)


def embedding(table: Tensor, tokens) -> Tensor:
    """Row lookup ``table[tokens]``; output shape ``tokens.shape + (D,)``."""
    table = as_tensor(table)
    tokens = np.asarray(tokens)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("embedding: tokens must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= table.shape[0]):
        raise ValueError(f"embedding: token out of range [0, {table.shape[0]})")
    out = table.data[tokens]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, tokens.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(out, (table,), backward)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    return float(np.asarray(value).reshape(-1)[0])


def finite_diff_gradient(
    f: Callable[[], object], params: Iterable[Tensor], epsilon: float = 1e-4
) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of ``params``.

    ``f`` takes no arguments and reads the parameters' current data, which
    is perturbed in place one coordinate at a time and restored afterwards.
    """
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("finite_diff_gradient: parameter data must be contiguous")
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = _scalar(f())
            flat[i] = orig - epsilon
            down = _scalar(f())
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise OracleFailure(f"non-finite objective while perturbing coordinate {i}")
            g[i] = (up - down) / (2.0 * epsilon)
        grads.append(g.reshape(p.shape))
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximised.

    ``floor`` keeps coordinates whose true derivative is ~0 from reporting
    meaningless relative noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"max_relative_error: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def vector_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over the whole array.

    Less sensitive than the elementwise form to tiny coordinates, whose
    central-difference truncation error (order epsilon^2 times the third
    derivative) can exceed their own magnitude under a sharp softmax.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"vector_relative_error: {a.shape} vs {n.shape}")
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), floor)
    return float(np.linalg.norm(a - n)) / denom


def tape_gradients(build_loss: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``build_loss()`` w.r.t. ``params`` via the tape."""
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]


def gradient_check(
    build_loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-4,
    floor: float = 1e-6,
    metric: str = "elementwise",
) -> list[float]:
    """Relative error between tape and finite-difference gradients, per parameter.

    ``metric`` is ``"elementwise"`` (see :func:`max_relative_error`) or
    ``"vector"`` (see :func:`vector_relative_error`).
    """
    if metric not in ("elementwise", "vector"):
        raise ValueError(f"unknown metric {metric!r}")
    analytic = tape_gradients(build_loss, params)
    numeric = finite_diff_gradient(build_loss, params, epsilon)
    if metric == "vector":
        return [vector_relative_error(a, n) for a, n in zip(analytic, numeric)]
    return [max_relative_error(a, n, floor) for a, n in zip(analytic, numeric)]
