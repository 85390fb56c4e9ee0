"""Small reverse-mode autodiff engine on float64 numpy arrays.

Only the layer set the U-Net, the losses and GradCAM++ need is provided:
conv2d, relu, maxpool2d, upsample_nearest, concat_channels, linear,
global_avg_pool, the two cross-entropy losses and a class-score selector.

Every op run while gradients are enabled is appended to the active
:class:`GradTape`; ``Tensor.backward`` replays that tape in reverse.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_retain")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: GradTape | None = None
        self._retain = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced by a recorded operation")
        self._tape.backward(self, grad)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that was already replayed")
        out._tape = self
        out.requires_grad = True
        self.records.append(_Record(out, inputs, backward_fn))

    def backward(self, root: Tensor, grad: np.ndarray | None = None) -> list[str]:
        """Replay the tape in exact reverse recording order.

        Returns the op names visited, mostly useful for tests.
        """
        if self.consumed:
            raise TapeError("backward called twice without a new forward pass")
        if grad is None:
            if root.data.size != 1:
                raise DimensionError("implicit gradient only for scalar outputs")
            grad = np.ones_like(root.data)
        grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=DTYPE)}
        visited = []
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            visited.append(rec.backward_fn.__qualname__.split(".")[0])
            if rec.out._retain:
                rec.out.grad = g if rec.out.grad is None else rec.out.grad + g
            for inp, ig in zip(rec.inputs, rec.backward_fn(g)):
                if ig is None or not inp.requires_grad:
                    continue
                _check_finite(ig, "backward")
                if inp._tape is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    key = id(inp)
                    grads[key] = ig if key not in grads else grads[key] + ig
        self.consumed = True
        self.records.clear()
        if _state.tape is self:
            _state.tape = GradTape()
        return visited


class _State:
    def __init__(self):
        self.tape = GradTape()
        self.enabled = True


_state = _State()


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def fresh_tape():
    """Run the block on a new tape, discarding whatever was recorded before."""
    prev = _state.tape
    _state.tape = GradTape()
    try:
        yield _state.tape
    finally:
        _state.tape = GradTape() if prev.consumed else prev


def reset_tape() -> None:
    _state.tape = GradTape()


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced in {where}")


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(data, backward_fn.__qualname__.split(".")[0])
    out = Tensor(data)
    if _state.enabled and any(t.requires_grad for t in inputs):
        _state.tape.record(out, inputs, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- layers


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an OIHW kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d channel axis mismatch: input C={cin}, weight C={wcin}")
    if stride < 1:
        raise DimensionError("conv2d stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d kernel H/W ({kh},{kw}) exceeds padded input H/W ({hp},{wp})")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias axis mismatch: expected ({cout},), got {bias.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col as (cin*kh*kw, n*ho*wo); the innermost copy axis is contiguous in xp
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(cin * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def conv2d_backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(cin, kh, kw, n, ho, wo)
            gxp = np.zeros((cin, n, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, conv2d_backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def relu_backward(g):
        return (g * pos,)

    return _make(np.where(pos, x.data, 0.0), (x,), relu_backward)


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; ties route the gradient to the first row-major maximum."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise DimensionError(f"maxpool2d spatial dims ({h},{w}) not divisible by stride {stride}")
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)  # first occurrence
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def maxpool2d_backward(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, window)
        nn_, cc, ii, jj = np.indices(arg.shape, sparse=True)
        np.add.at(gx, (nn_, cc, ii * stride + di, jj * stride + dj), g)
        return (gx,)

    return _make(out, (x,), maxpool2d_backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if factor < 1:
        raise DimensionError("upsample factor must be >= 1")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def upsample_backward(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), upsample_backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects 4-D tensors")
    bad = [ax for ax, i in (("N", 0), ("H", 2), ("W", 3)) if a.shape[i] != b.shape[i]]
    if bad:
        raise DimensionError(f"concat_channels mismatch on axes {bad}: {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def concat_backward(g):
        return g[:, :ca], g[:, ca:]

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), concat_backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with weight laid out (out_features, in_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear feature axis mismatch: {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def linear_backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, linear_backward)


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape

    def gap_backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), gap_backward)


def select_class_scores(logits: Tensor, classes: Sequence[int]) -> Tensor:
    """Sum over the batch of logits[n, classes[n]].

    Samples do not interact, so the gradient w.r.t. sample n's activations is
    that of its own class score.
    """
    logits = as_tensor(logits)
    classes = np.asarray(classes, dtype=np.int64)
    rows = np.arange(logits.shape[0])

    def score_backward(g):
        gl = np.zeros_like(logits.data)
        gl[rows, classes] = g
        return (gl,)

    return _make(np.asarray(logits.data[rows, classes].sum()), (logits,), score_backward)


# ---------------------------------------------------------------- losses


def log_softmax(z: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = 1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def weighted_cross_entropy(logits: Tensor, target, weights: Sequence[float]) -> Tensor:
    """Mean over all pixels (or rows) of -w[c] * log softmax(logits)[c] at the target class.

    ``logits`` is N,C,H,W with ``target`` N,H,W, or N,C with ``target`` N.
    """
    logits = as_tensor(logits)
    z = logits.data
    c = z.shape[1]
    w = np.asarray(weights, dtype=DTYPE)
    if w.shape != (c,):
        raise ValueError(f"expected {c} class weights, got {w.shape[0] if w.ndim else w}")
    if (w < 0).any() or not (w > 0).any():
        raise ValueError("class weights must be nonnegative with at least one positive")
    t = np.asarray(target)
    if t.shape != (z.shape[0],) + z.shape[2:]:
        raise DimensionError(f"target shape {t.shape} does not match logits {z.shape}")
    t = t.astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ValueError(f"target class out of range [0, {c})")

    logp = log_softmax(z, axis=1)
    picked = np.take_along_axis(logp, t[:, None], axis=1)[:, 0]
    pix_w = w[t]
    count = t.size
    loss = -(pix_w * picked).sum() / count

    def wce_backward(g):
        grad = softmax(z, axis=1)
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, t[:, None], 1.0, axis=1)
        grad = (grad - onehot) * pix_w[:, None] * (g / count)
        return (grad,)

    return _make(np.asarray(loss), (logits,), wce_backward)


def cross_entropy(logits: Tensor, labels, weights: Sequence[float] | None = None) -> Tensor:
    """Classification cross-entropy on N,C logits."""
    c = as_tensor(logits).shape[1]
    return weighted_cross_entropy(logits, labels, np.ones(c) if weights is None else weights)


@dataclass(frozen=True)
class LossSpec:
    kind: str  # "weighted-cross-entropy-pixelwise" | "cross-entropy-classification"
    class_weights: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in ("weighted-cross-entropy-pixelwise", "cross-entropy-classification"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        w = np.asarray(self.class_weights, dtype=DTYPE)
        if (w < 0).any() or not (w > 0).any():
            raise ValueError("class weights must be nonnegative with at least one positive")

    def __call__(self, logits: Tensor, target) -> Tensor:
        if len(self.class_weights) != logits.shape[1]:
            raise ValueError("class_weights length must equal the number of classes")
        return weighted_cross_entropy(logits, target, self.class_weights)


# ------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 2e-4
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.1
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Step schedule: multiply by decay_factor at each listed epoch (0-based)."""
        k = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.learning_rate * self.decay_factor ** k


class StateError(RuntimeError):
    pass


def sgd_step(params: dict[str, Tensor], opt: OptimizerState, lr: float | None = None,
             masks: dict[str, np.ndarray] | None = None) -> None:
    """One momentum SGD update; positions with mask 0 stay exactly 0."""
    lr = opt.learning_rate if lr is None else lr
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise StateError(f"velocity buffer for {name!r} has shape {v.shape}, parameter {p.data.shape}")
        v = opt.momentum * v + p.grad + opt.weight_decay * p.data
        new = p.data - lr * v
        if masks is not None and name in masks:
            m = masks[name]
            new = np.where(m, new, 0.0)
            v = np.where(m, v, 0.0)
        opt.velocity[name] = v
        p.data = new


# ---------------------------------------------------------- verification


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], epsilon: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the scalar output from ``params`` on each call.
    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    params = list(params)
    if not params:
        return 0.0
    for p in params:
        p.requires_grad = True
        p.grad = None
    reset_tape()
    fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = fn().item()
                flat[i] = orig - epsilon
                fm = fn().item()
                flat[i] = orig
                num = (fp - fm) / (2 * epsilon)
                err = abs(af[i] - num) / max(abs(af[i]), abs(num), floor)
                worst = max(worst, err)
    return worst
