"""Small dense-tensor autodiff engine with an Adam optimizer.

Everything downstream (recurrent agents, decoders, mapping networks) is built
from the op set in this module: matmul, add, elementwise mul, tanh, relu, exp,
log, softmax / log-softmax, sum / mean, square, slicing / concat / row gather,
and a diagonal-Gaussian log-density composite.  All arithmetic is float64.

The computation graph is recorded define-by-run: every non-leaf ``Tensor``
keeps its parents and a backward closure, so the tape produced by a forward
pass *is* the graph (creation order is a topological order).  ``backward``
walks the reachable subgraph in reverse and accumulates gradients on every
tensor created with ``requires_grad=True``.

Graphs are single-writer during forward/backward.  Parameter tensors are
plain value holders and may be shared read-only across processes; training
mutates one graph at a time.

Finite-ness policy: outputs of ``backward`` and optimizer steps are always
checked; per-op forward checks are enabled with ``set_debug(True)`` (used by
the test suite) and skipped in the hot training path.
"""

from __future__ import annotations

import io
import json
import zipfile
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "param",
    "const",
    "no_grad",
    "set_debug",
    "concat",
    "gather_rows",
    "gaussian_log_density",
    "kl_diag_gaussians",
    "categorical_entropy",
    "backward",
    "Adam",
    "adam_step",
    "init_adam_state",
    "finite_diff_check",
    "save_checkpoint",
    "load_checkpoint",
]

_GRAD_ENABLED = True
_DEBUG_CHECKS = False

CHECKPOINT_FORMAT_VERSION = 1


class no_grad:
    """Context manager that disables tape recording (fast evaluation path)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def set_debug(flag: bool) -> None:
    """Enable per-op finiteness checks on forward values."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


def _check(values: np.ndarray, op: str) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(values)):
        raise FloatingPointError(f"non-finite value produced by op '{op}'")


class Tensor:
    """A float64 array plus the tape bookkeeping needed for reverse mode."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, _parents=(), _backward=None,
                 name: str = ""):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.values.shape})"

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        """Value copy that blocks gradient flow (stop-gradient)."""
        return Tensor(self.values)

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(values, name: str = "") -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


def const(values, name: str = "") -> Tensor:
    return Tensor(values, name=name)


def _node(values, parents, backward_fn, op: str) -> Tensor:
    _check(values, op)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        return Tensor(values, _parents=tuple(parents), _backward=backward_fn, name=op)
    return Tensor(values, name=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- primitive ops ------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values + b.values

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.values.shape))
        acc(b, _unbroadcast(g, b.values.shape))

    return _node(out, (a, b), bw, "add")


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values * b.values

    def bw(g, acc):
        acc(a, _unbroadcast(g * b.values, a.values.shape))
        acc(b, _unbroadcast(g * a.values, b.values.shape))

    return _node(out, (a, b), bw, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values @ b.values

    def bw(g, acc):
        acc(a, g @ b.values.T)
        acc(b, a.values.T @ g)

    return _node(out, (a, b), bw, "matmul")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)

    def bw(g, acc):
        acc(a, g * (1.0 - out * out))

    return _node(out, (a,), bw, "tanh")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.values, 0.0)

    def bw(g, acc):
        acc(a, g * (a.values > 0.0))

    return _node(out, (a,), bw, "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)

    def bw(g, acc):
        acc(a, g * out)

    return _node(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.values)

    def bw(g, acc):
        acc(a, g / a.values)

    return _node(out, (a,), bw, "log")


def square(a: Tensor) -> Tensor:
    out = a.values * a.values

    def bw(g, acc):
        acc(a, g * (2.0 * a.values))

    return _node(out, (a,), bw, "square")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g, acc):
        dot = (g * out).sum(axis=-1, keepdims=True)
        acc(a, out * (g - dot))

    return _node(out, (a,), bw, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    """Numerically stable fused log(softmax(.)) over the last axis."""
    z = a.values - a.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g, acc):
        acc(a, g - p * g.sum(axis=-1, keepdims=True))

    return _node(out, (a,), bw, "log_softmax")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def bw(g, acc):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        acc(a, np.broadcast_to(g, a.values.shape).copy())

    return _node(out, (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.values.size if axis is None else a.values.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _slice(a: Tensor, key) -> Tensor:
    out = a.values[key]

    def bw(g, acc):
        full = np.zeros_like(a.values)
        full[key] = g
        acc(a, full)

    return _node(out, (a,), bw, "slice")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g, acc):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            acc(p, g[tuple(idx)])

    return _node(out, tuple(parts), bw, "concat")


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick a[i, idx[i]] for each row i (used for log-prob of taken actions)."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.values.shape[0])
    out = a.values[rows, idx]

    def bw(g, acc):
        full = np.zeros_like(a.values)
        full[rows, idx] = g
        acc(a, full)

    return _node(out, (a,), bw, "gather_rows")


# -- composites ----------------------------------------------------------------

_LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_log_density(x, mean: Tensor, log_var) -> Tensor:
    """Elementwise log N(x; mean, exp(log_var)); differentiable in all args."""
    x = _as_tensor(x)
    log_var = _as_tensor(log_var)
    diff = x - mean
    return mul(add(add(log_var, _LOG_2PI), mul(square(diff), exp(mul(log_var, -1.0)))), -0.5)


def kl_diag_gaussians(mean_q: Tensor, log_var_q: Tensor, mean_p, log_var_p) -> Tensor:
    """Elementwise KL(q || p) for diagonal Gaussians given means and log-variances."""
    mean_p = _as_tensor(mean_p)
    log_var_p = _as_tensor(log_var_p)
    dl = log_var_p - log_var_q
    ratio = exp(mul(dl, -1.0))
    sq = mul(square(mean_q - mean_p), exp(mul(log_var_p, -1.0)))
    return mul(add(add(dl, ratio), add(sq, -1.0)), 0.5)


def categorical_entropy(logits: Tensor) -> Tensor:
    """Per-row entropy of softmax(logits)."""
    p = softmax(logits)
    lp = log_softmax(logits)
    return mul(tsum(mul(p, lp), axis=-1), -1.0)


# -- reverse pass ---------------------------------------------------------------

def trace(output: Tensor) -> list[Tensor]:
    """Reachable graph nodes in topological order (parents precede children)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, seed=None) -> None:
    """Accumulate d(output)/d(leaf) into `.grad` of every requires_grad tensor.

    `output` is usually scalar; a non-scalar output needs an explicit `seed`
    of the same shape.
    """
    if seed is None:
        if output.values.size != 1:
            raise ValueError("backward on non-scalar output requires a seed")
        seed = np.ones_like(output.values)
    grads: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=np.float64)}
    nodes = trace(output)

    def acc(t: Tensor, g: np.ndarray) -> None:
        k = id(t)
        if k in grads:
            grads[k] = grads[k] + g
        else:
            grads[k] = np.array(g, dtype=np.float64, copy=True)

    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {node!r}")
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is not None:
            node._backward(g, acc)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- Adam -------------------------------------------------------------------------

def init_adam_state(shapes: dict[str, tuple], lr: float, beta1: float = 0.9,
                    beta2: float = 0.999, eps: float = 1e-8) -> dict:
    return {
        "m": {k: np.zeros(s) for k, s in shapes.items()},
        "v": {k: np.zeros(s) for k, s in shapes.items()},
        "step": 0,
        "lr": lr,
        "beta1": beta1,
        "beta2": beta2,
        "eps": eps,
    }


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: dict) -> tuple[dict[str, np.ndarray], dict]:
    """One bias-corrected Adam update; returns (new params, mutated state)."""
    state["step"] += 1
    t = state["step"]
    b1, b2, lr, eps = state["beta1"], state["beta2"], state["lr"], state["eps"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for '{k}'")
        m = state["m"][k] = b1 * state["m"][k] + (1.0 - b1) * g
        v = state["v"][k] = b2 * state["v"][k] + (1.0 - b2) * (g * g)
        upd = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(upd)):
            raise FloatingPointError(f"non-finite Adam update for '{k}'")
        new[k] = p - upd
    return new, state


class Adam:
    """Stateful wrapper around `adam_step` for a named group of Tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = init_adam_state({k: p.values.shape for k, p in params.items()},
                                     lr, beta1, beta2, eps)

    def step(self) -> None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.values))
                 for k, p in self.params.items()}
        vals = {k: p.values for k, p in self.params.items()}
        new, _ = adam_step(vals, grads, self.state)
        for k, p in self.params.items():
            p.values = new[k]

    def zero_grad(self) -> None:
        zero_grads(self.params.values())


# -- finite differences -------------------------------------------------------------

def finite_diff_check(fn: Callable[[dict[str, Tensor]], Tensor],
                      point: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / (|cd| + 1e-12).

    `fn` maps a dict of Tensors to a scalar Tensor; the analytic gradient is
    obtained by reverse mode at `point`, the reference by central differences.
    """
    tensors = {k: param(v, name=k) for k, v in point.items()}
    out = fn(tensors)
    if not np.isfinite(out.values).all():
        raise FloatingPointError("non-finite function value at check point")
    backward(out)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.values))
                for k, t in tensors.items()}

    worst = 0.0
    with no_grad():
        for k, v in point.items():
            flat = v.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(fn({n: const(a) for n, a in point.items()}).values)
                flat[i] = orig - eps
                lo = float(fn({n: const(a) for n, a in point.items()}).values)
                flat[i] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise FloatingPointError("non-finite evaluation during finite differences")
                cd = (hi - lo) / (2.0 * eps)
                err = abs(analytic[k].reshape(-1)[i] - cd) / (abs(cd) + 1e-12)
                worst = max(worst, err)
    return worst


# -- checkpoint io --------------------------------------------------------------------

def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a versioned parameter blob (zip of .npy members + meta.json).

    Timestamps inside the archive are pinned so identical content yields
    identical bytes.
    """
    meta = dict(meta or {})
    meta["format_version"] = CHECKPOINT_FORMAT_VERSION
    stamp = (1980, 1, 1, 0, 0, 0)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=stamp)
        zf.writestr(info, json.dumps(meta, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=stamp)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json").decode())
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format: {meta.get('format_version')}")
        arrays = {}
        for entry in zf.namelist():
            if entry.endswith(".npy"):
                arrays[entry[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(entry)))
    return arrays, meta
