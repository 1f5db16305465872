"""Minimal reverse-mode differentiable kernel.

Everything is 64-bit and CPU-only. The graph is built eagerly from a small
set of array operations (affine layers, ReLU, row softmax, dropout, bilinear
forms, gradient reversal) which is exactly the set needed by the training
pipeline; there is no general compiler or GPU path. Gradients accumulate
into leaf tensors, so one backward pass over a composite loss fills every
parameter gradient at once. `finite_diff_check` verifies any scalar loss
against central differences, which is the correctness gate for the whole
kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be parsed or shapes disagree."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce `grad` back to `shape` by summing the axes numpy broadcast over."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the backward rule that produced it.

    Leaves created with ``requires_grad=True`` (parameters, or inputs whose
    gradient is wanted) accumulate into ``.grad`` when ``backward`` runs.
    Interior nodes are plain records: value, parents, and a closure that
    pushes the upstream gradient one step further.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, parents=(), backward=None, requires_grad=False, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self._parents = tuple(p for p in parents if isinstance(p, Tensor))
        self._backward = backward
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self._parents
        )
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def backward(self, upstream: np.ndarray | None = None):
        """Accumulate gradients of self w.r.t. every ancestor leaf.

        `upstream` defaults to ones, which is the usual seed for a scalar
        loss. Gradients add into `.grad`, so zero them between steps.
        """
        if upstream is None:
            upstream = np.ones_like(self.value)
        else:
            upstream = np.asarray(upstream, dtype=np.float64)
            if upstream.shape != self.value.shape:
                raise ValueError(
                    f"upstream gradient shape {upstream.shape} does not match "
                    f"tensor shape {self.value.shape}"
                )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): upstream}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node._accum(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    if parent._backward is None:
                        parent._accum(pg)
                    else:
                        key = id(parent)
                        if key in grads:
                            grads[key] = grads[key] + pg
                        else:
                            grads[key] = pg

    def detach(self) -> "Tensor":
        return Tensor(self.value.copy())

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_val = self.value + other.value

        def bwd(g):
            return (
                (self, _unbroadcast(g, self.value.shape)),
                (other, _unbroadcast(g, other.value.shape)),
            )

        return Tensor(out_val, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.value, (self,), lambda g: ((self, -g),))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out_val = self.value * other.value

        def bwd(g):
            return (
                (self, _unbroadcast(g * other.value, self.value.shape)),
                (other, _unbroadcast(g * self.value, other.value.shape)),
            )

        return Tensor(out_val, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_val = self.value / other.value

        def bwd(g):
            return (
                (self, _unbroadcast(g / other.value, self.value.shape)),
                (
                    other,
                    _unbroadcast(
                        -g * self.value / (other.value * other.value),
                        other.value.shape,
                    ),
                ),
            )

        return Tensor(out_val, (self, other), bwd)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.value, other.value
        if a.shape[-1] != b.shape[0]:
            raise ValueError(
                f"matmul shape mismatch: {a.shape} @ {b.shape}"
            )
        out_val = a @ b

        def bwd(g):
            return ((self, g @ b.T), (other, a.T @ g))

        return Tensor(out_val, (self, other), bwd)

    @property
    def T(self) -> "Tensor":
        return Tensor(self.value.T, (self,), lambda g: ((self, g.T),))

    # -- elementwise nonlinearities ---------------------------------------

    def relu(self) -> "Tensor":
        mask = self.value > 0.0
        return Tensor(self.value * mask, (self,), lambda g: ((self, g * mask),))

    def log(self) -> "Tensor":
        val = self.value
        return Tensor(np.log(val), (self,), lambda g: ((self, g / val),))

    def sqrt(self) -> "Tensor":
        out_val = np.sqrt(self.value)

        def bwd(g):
            return ((self, g * 0.5 / out_val),)

        return Tensor(out_val, (self,), bwd)

    def __pow__(self, p: float) -> "Tensor":
        val = self.value
        return Tensor(
            val**p, (self,), lambda g: ((self, g * p * val ** (p - 1)),)
        )

    def clip(self, lo: float, hi: float) -> "Tensor":
        inside = (self.value >= lo) & (self.value <= hi)
        return Tensor(
            np.clip(self.value, lo, hi), (self,), lambda g: ((self, g * inside),)
        )

    # -- reductions and reshapes ------------------------------------------

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        out_val = self.value.sum(axis=axis, keepdims=keepdims)
        shape = self.value.shape

        def bwd(g):
            if axis is None:
                return ((self, np.broadcast_to(g, shape).astype(np.float64)),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return ((self, np.broadcast_to(gg, shape).astype(np.float64)),)

        return Tensor(out_val, (self,), bwd)

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.value.size)

    def rows(self, start: int, stop: int) -> "Tensor":
        """View of rows [start, stop); backward scatters into place."""
        out_val = self.value[start:stop]
        shape = self.value.shape

        def bwd(g):
            full = np.zeros(shape)
            full[start:stop] = g
            return ((self, full),)

        return Tensor(out_val, (self,), bwd)

    def softmax_rows(self) -> "Tensor":
        out_val = softmax_rows(self.value)

        def bwd(g):
            inner = (g * out_val).sum(axis=-1, keepdims=True)
            return ((self, out_val * (g - inner)),)

        return Tensor(out_val, (self,), bwd)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    """A graph constant: participates in forward math, receives no gradient."""
    return Tensor(np.asarray(x, dtype=np.float64))


def concat_rows(parts: list[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out_val = np.concatenate([p.value for p in parts], axis=0)
    sizes = [p.value.shape[0] for p in parts]

    def bwd(g):
        out = []
        at = 0
        for p, n in zip(parts, sizes):
            out.append((p, g[at : at + n]))
            at += n
        return tuple(out)

    return Tensor(out_val, tuple(parts), bwd)


def softmax_rows(logits):
    """Row-stabilized softmax. ndarray in, ndarray out; Tensor in, Tensor out."""
    if isinstance(logits, Tensor):
        return logits.softmax_rows()
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax_rows requires finite logits")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def grl(x: Tensor, lam: float) -> Tensor:
    """Gradient reversal node: identity forward, -lam * upstream backward."""
    if lam < 0:
        raise ValueError(f"grl lambda must be nonnegative, got {lam}")
    if not isinstance(x, Tensor):
        raise TypeError("grl operates on graph tensors")
    return Tensor(x.value, (x,), lambda g: ((x, -lam * g),))


def bilinear_logits(features, B, P):
    """Pairwise similarity logits between feature rows and prototype rows.

    Entry (n, i) is features[n] . B @ P[i], i.e. features @ B @ P.T. Returns
    a Tensor if any input is a Tensor (gradients flow to all three), else a
    plain array.
    """
    graph = any(isinstance(a, Tensor) for a in (features, B, P))
    f, b, p = as_tensor(features), as_tensor(B), as_tensor(P)
    m = f.value.shape[1]
    if b.value.shape != (m, m):
        raise ValueError(
            f"bilinear matrix must be {m}x{m} to match features, got "
            f"{b.value.shape}"
        )
    if p.value.shape[1] != m:
        raise ValueError(
            f"prototype width {p.value.shape[1]} does not match feature width {m}"
        )
    out = f @ b @ p.T
    return out if graph else out.value


# -- parameters -----------------------------------------------------------


class ParamSet:
    """Named trainable matrices, each a leaf Tensor with a gradient buffer."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"parameter {name!r} must be 2-D, got shape {arr.shape}")
        t = Tensor(arr, requires_grad=True, name=name)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grad(self):
        for t in self._entries.values():
            t.zero_grad()

    def matrices(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self._entries.items()}


@dataclass
class MlpArch:
    """Layer widths plus per-layer activation and dropout placement.

    `activations[i]` applies after layer i and is one of 'relu', 'none',
    'softmax'. `dropout_after` lists layer indices that are followed by
    dropout (active only when `train` is set).
    """

    widths: tuple
    activations: tuple
    dropout_after: tuple = ()
    dropout_rate: float = 0.0
    train: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.activations = tuple(self.activations)
        self.dropout_after = tuple(int(i) for i in self.dropout_after)
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer (two widths)")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"layer widths must be positive: {self.widths}")
        if len(self.activations) != self.n_layers:
            raise ValueError(
                f"need {self.n_layers} activation tags, got {len(self.activations)}"
            )
        bad = set(self.activations) - {"relu", "none", "softmax"}
        if bad:
            raise ValueError(f"unknown activation tags: {sorted(bad)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        if any(i < 0 or i >= self.n_layers for i in self.dropout_after):
            raise ValueError(f"dropout positions out of range: {self.dropout_after}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]


def init_mlp_params(arch: MlpArch, rng: np.random.Generator) -> ParamSet:
    """Uniform +-sqrt(6/(fan_in+fan_out)) init for every weight and bias."""
    params = ParamSet()
    for i in range(arch.n_layers):
        fan_in, fan_out = arch.widths[i], arch.widths[i + 1]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params.add(f"W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.add(f"b{i}", rng.uniform(-bound, bound, size=(1, fan_out)))
    return params


def forward_mlp(x, params: ParamSet, arch: MlpArch, rng: np.random.Generator | None = None):
    """Run the MLP and return (output tensor, tape).

    The tape, called with an upstream gradient of the output's shape,
    back-propagates it: parameter gradients accumulate into `params` and the
    gradient w.r.t. the input rows is returned. In eval mode (arch.train
    False) dropout is the identity. Gradient flows to the input only if `x`
    is already a Tensor that requires grad or was produced by the graph.

    Args:
        x: (batch, in_width) array or Tensor.
        params: weights W0,b0,...; shapes must match the arch.
        arch: layer spec.
        rng: needed only when arch.train and dropout positions exist.

    Returns:
        (out, tape) where out is a Tensor of shape (batch, out_width).
    """
    leaf = x if isinstance(x, Tensor) else Tensor(
        np.asarray(x, dtype=np.float64), requires_grad=True, name="input"
    )
    if leaf.value.ndim != 2 or leaf.value.shape[1] != arch.in_width:
        raise ValueError(
            f"input has shape {leaf.value.shape}, expected (batch, {arch.in_width})"
        )
    h = leaf
    for i in range(arch.n_layers):
        for pname in (f"W{i}", f"b{i}"):
            if pname not in params:
                raise ValueError(f"params missing {pname!r} for layer {i}")
        w, b = params[f"W{i}"], params[f"b{i}"]
        want = (arch.widths[i], arch.widths[i + 1])
        if w.value.shape != want:
            raise ValueError(
                f"layer {i} weight shape {w.value.shape}, expected {want}"
            )
        if b.value.shape != (1, arch.widths[i + 1]):
            raise ValueError(
                f"layer {i} bias shape {b.value.shape}, expected (1, {arch.widths[i + 1]})"
            )
        h = h @ w + b
        act = arch.activations[i]
        if act == "relu":
            h = h.relu()
        elif act == "softmax":
            h = h.softmax_rows()
        if i in arch.dropout_after and arch.train and arch.dropout_rate > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout requires an rng")
            keep = rng.random(h.value.shape) >= arch.dropout_rate
            h = h * constant(keep / (1.0 - arch.dropout_rate))
    out = h

    def tape(upstream: np.ndarray) -> np.ndarray:
        out.backward(upstream)
        return None if leaf.grad is None else leaf.grad.copy()

    return out, tape


def mlp_apply(x: np.ndarray, params: ParamSet, arch: MlpArch) -> np.ndarray:
    """Eval-mode forward pass returning a plain array (no gradients kept)."""
    eval_arch = arch if not arch.train else MlpArch(
        arch.widths, arch.activations, arch.dropout_after, arch.dropout_rate, False
    )
    out, _ = forward_mlp(np.asarray(x, dtype=np.float64), params, eval_arch)
    return out.value


# -- optimizer -------------------------------------------------------------


@dataclass
class RmsPropState:
    """Running squared-gradient accumulators plus hyperparameters."""

    learning_rate: float = 1e-3
    rho: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    acc: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must be in (0, 1), got {self.rho}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight decay must be nonnegative, got {self.weight_decay}")


def rmsprop_step(params: ParamSet, state: RmsPropState):
    """One RMSprop update over every parameter; gradients are cleared after.

    Per entry: s <- rho*s + (1-rho)*g^2, then
    theta <- theta - lr*g/(sqrt(s)+eps) - lr*weight_decay*theta.
    Weight decay is decoupled from the adaptive denominator.
    """
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.value)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        s = state.acc.get(name)
        if s is None:
            s = np.zeros_like(p.value)
            state.acc[name] = s
        s *= state.rho
        s += (1.0 - state.rho) * g * g
        p.value = (
            p.value
            - state.learning_rate * g / (np.sqrt(s) + state.eps)
            - state.learning_rate * state.weight_decay * p.value
        )
        p.zero_grad()


# -- verification ----------------------------------------------------------


def finite_diff_report(loss_fn, params: ParamSet, h: float = 1e-5) -> dict:
    """Worst relative gradient error per parameter, by central differences.

    `loss_fn(params)` must rebuild the loss graph from the current parameter
    values and return a scalar Tensor, deterministically (dropout off, any
    rng fixed). Relative error for one entry is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    params.zero_grad()
    out = loss_fn(params)
    if out.value.size != 1:
        raise ValueError("loss_fn must return a scalar tensor")
    out.backward(np.ones_like(out.value))
    analytic = {name: p.grad.copy() for name, p in params.items()}
    params.zero_grad()

    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = float(loss_fn(params).value)
            flat[idx] = orig - h
            down = float(loss_fn(params).value)
            flat[idx] = orig
            numeric = (up - down) / (2.0 * h)
            a = a_flat[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report[name] = worst
    return report


def finite_diff_check(loss_fn, params: ParamSet, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    report = finite_diff_report(loss_fn, params, h)
    return max(report.values()) if report else 0.0


# -- checkpoint text format -------------------------------------------------

CHECKPOINT_HEADER = "protomatch-ckpt v1"


def write_checkpoint(path, matrices: dict):
    """Write named matrices as text: `name rows cols` then one line per row.

    Values are printed with 17 significant digits, which round-trips float64
    exactly.
    """
    lines = [CHECKPOINT_HEADER]
    for name, mat in matrices.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"parameter name {name!r} contains whitespace")
        arr = np.asarray(mat, dtype=np.float64)
        if arr.ndim != 2:
            raise CheckpointError(f"block {name!r} must be 2-D, got shape {arr.shape}")
        lines.append(f"{name} {arr.shape[0]} {arr.shape[1]}")
        for row in arr:
            lines.append(" ".join(f"{v:.17e}" for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_checkpoint(path) -> dict:
    """Parse the text checkpoint format back into {name: matrix}."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise CheckpointError(
            f"bad checkpoint header: expected {CHECKPOINT_HEADER!r}"
        )
    matrices: dict[str, np.ndarray] = {}
    at = 1
    while at < len(lines):
        if not lines[at].strip():
            at += 1
            continue
        head = lines[at].split()
        if len(head) != 3:
            raise CheckpointError(f"malformed block header at line {at + 1}: {lines[at]!r}")
        name, rows_s, cols_s = head
        try:
            rows, cols = int(rows_s), int(cols_s)
        except ValueError:
            raise CheckpointError(f"bad shape in block {name!r}") from None
        if name in matrices:
            raise CheckpointError(f"duplicate block {name!r}")
        if at + rows >= len(lines) + 1:
            raise CheckpointError(f"truncated block {name!r}")
        block = np.empty((rows, cols), dtype=np.float64)
        for r in range(rows):
            line = lines[at + 1 + r] if at + 1 + r < len(lines) else None
            parts = line.split() if line is not None else []
            if len(parts) != cols:
                raise CheckpointError(
                    f"truncated block {name!r}: row {r} has {len(parts)} of {cols} values"
                )
            block[r] = [float(v) for v in parts]
        if not np.all(np.isfinite(block)):
            raise CheckpointError(f"non-finite values in block {name!r}")
        matrices[name] = block
        at += 1 + rows
    return matrices
