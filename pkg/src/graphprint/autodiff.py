"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

A :class:`Tensor` wraps a two-dimensional ``numpy`` array and records the
operations applied to it on a tape of closures. Calling :meth:`Tensor.backward`
on a 1x1 result replays the tape in reverse topological order and accumulates
gradients into every leaf created with ``requires_grad=True``.

Design notes that matter for correctness:

* Everything is float64. No broadcasting beyond the explicitly provided
  ops (bias rows, scalar shifts), so every backward rule is exact.
* Reductions that feed forward values (batch-norm statistics) sum their
  operands in sorted order, which makes the forward pass bit-identical
  under any permutation of the rows being reduced. Gradient accumulation
  does not need that guarantee and uses plain segment sums.
* Max-style reductions save argmax indices and route each output gradient
  to exactly one winning input row; ties pick the lowest index, so the
  backward pass is deterministic.
"""

from __future__ import annotations

import math
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ShapeError, ValidationError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D; got array of shape {arr.shape}")
    return arr


class Tensor:
    """A 2-D float64 matrix participating in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op",
                 "_backward_done")

    def __init__(self, values, requires_grad: bool = False,
                 _prev: tuple = (), _op: str = "leaf"):
        self.data = _as_matrix(values)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev = _prev
        self._backward: Callable[[], None] | None = None
        self._op = _op
        self._backward_done = False

    # -- shape helpers -------------------------------------------------

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph plumbing -------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this 1x1 value into all parameter leaves."""
        if self.data.shape != (1, 1):
            raise ValidationError(
                f"backward requires a 1x1 scalar, got shape {self.data.shape}")
        if self._backward_done:
            raise ValidationError(
                "backward was already called on this recorded value; "
                "re-record the computation before differentiating again")
        self._backward_done = True

        # Iterative reverse topological order; recursion would overflow on
        # deep stacked blocks.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones((1, 1))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- arithmetic ------------------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        if self.data.shape != other.data.shape:
            raise ShapeError(
                f"add requires equal shapes, got {self.data.shape} and {other.data.shape}")
        out = Tensor(self.data + other.data,
                     requires_grad=self.requires_grad or other.requires_grad,
                     _prev=(self, other), _op="add")
        if out.requires_grad:
            def backward():
                g = out.grad
                if self.requires_grad:
                    self._accumulate(g)
                if other.requires_grad:
                    other._accumulate(g)
            out._backward = backward
        return out

    def __sub__(self, other: "Tensor") -> "Tensor":
        if self.data.shape != other.data.shape:
            raise ShapeError(
                f"sub requires equal shapes, got {self.data.shape} and {other.data.shape}")
        out = Tensor(self.data - other.data,
                     requires_grad=self.requires_grad or other.requires_grad,
                     _prev=(self, other), _op="sub")
        if out.requires_grad:
            def backward():
                g = out.grad
                if self.requires_grad:
                    self._accumulate(g)
                if other.requires_grad:
                    other._accumulate(-g)
            out._backward = backward
        return out

    def __mul__(self, scalar: float) -> "Tensor":
        s = float(scalar)
        out = Tensor(self.data * s, requires_grad=self.requires_grad,
                     _prev=(self,), _op="scale")
        if out.requires_grad:
            def backward():
                self._accumulate(out.grad * s)
            out._backward = backward
        return out

    __rmul__ = __mul__

    def shift(self, scalar: float) -> "Tensor":
        """Add a scalar constant elementwise."""
        out = Tensor(self.data + float(scalar), requires_grad=self.requires_grad,
                     _prev=(self,), _op="shift")
        if out.requires_grad:
            def backward():
                self._accumulate(out.grad)
            out._backward = backward
        return out

    def add_bias(self, bias: "Tensor") -> "Tensor":
        """Add a 1xC bias row to every row of an NxC matrix."""
        if bias.data.shape != (1, self.cols):
            raise ShapeError(
                f"bias shape {bias.data.shape} does not match (1, {self.cols})")
        out = Tensor(self.data + bias.data,
                     requires_grad=self.requires_grad or bias.requires_grad,
                     _prev=(self, bias), _op="add_bias")
        if out.requires_grad:
            def backward():
                g = out.grad
                if self.requires_grad:
                    self._accumulate(g)
                if bias.requires_grad:
                    bias._accumulate(g.sum(axis=0, keepdims=True))
            out._backward = backward
        return out

    # -- elementwise nonlinearities ---------------------------------------

    def gelu(self) -> "Tensor":
        """x * Phi(x) with the exact normal CDF (error-function form)."""
        phi = ndtr(self.data)
        out = Tensor(self.data * phi, requires_grad=self.requires_grad,
                     _prev=(self,), _op="gelu")
        if out.requires_grad:
            x = self.data
            def backward():
                pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
                self._accumulate(out.grad * (phi + x * pdf))
            out._backward = backward
        return out

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0.0), requires_grad=self.requires_grad,
                     _prev=(self,), _op="relu")
        if out.requires_grad:
            # Subgradient at 0 is taken from the inactive side (0).
            mask = self.data > 0.0
            def backward():
                self._accumulate(out.grad * mask)
            out._backward = backward
        return out

    def square(self) -> "Tensor":
        out = Tensor(self.data * self.data, requires_grad=self.requires_grad,
                     _prev=(self,), _op="square")
        if out.requires_grad:
            def backward():
                self._accumulate(out.grad * (2.0 * self.data))
            out._backward = backward
        return out

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0):
            raise ValidationError("sqrt requires a nonnegative input")
        root = np.sqrt(self.data)
        out = Tensor(root, requires_grad=self.requires_grad,
                     _prev=(self,), _op="sqrt")
        if out.requires_grad:
            safe = np.maximum(root, 1e-12)
            def backward():
                self._accumulate(out.grad / (2.0 * safe))
            out._backward = backward
        return out

    # -- reductions --------------------------------------------------------

    def sum(self) -> "Tensor":
        out = Tensor([[float(self.data.sum())]], requires_grad=self.requires_grad,
                     _prev=(self,), _op="sum")
        if out.requires_grad:
            def backward():
                self._accumulate(np.full_like(self.data, out.grad[0, 0]))
            out._backward = backward
        return out

    def row_sums(self) -> "Tensor":
        """Sum across columns, producing an Nx1 column."""
        out = Tensor(self.data.sum(axis=1, keepdims=True),
                     requires_grad=self.requires_grad, _prev=(self,), _op="row_sums")
        if out.requires_grad:
            def backward():
                self._accumulate(np.broadcast_to(out.grad, self.data.shape))
            out._backward = backward
        return out

    # -- row selection -------------------------------------------------------

    def gather_rows(self, index, plan: "ScatterPlan | None" = None) -> "Tensor":
        """Select rows by index; backward scatter-adds into the source rows."""
        idx = np.asarray(index, dtype=np.intp)
        if idx.ndim != 1:
            raise ShapeError("gather_rows takes a flat index vector")
        if idx.size and (idx.min() < 0 or idx.max() >= self.rows):
            raise ShapeError(
                f"gather index out of range for {self.rows} rows")
        out = Tensor(self.data[idx], requires_grad=self.requires_grad,
                     _prev=(self,), _op="gather_rows")
        if out.requires_grad:
            local_plan = plan if plan is not None else ScatterPlan(idx, self.rows)
            def backward():
                if self.grad is None:
                    self.grad = np.zeros_like(self.data)
                local_plan.scatter_add(self.grad, out.grad)
            out._backward = backward
        return out

    def l2_normalize_rows(self) -> "Tensor":
        """Scale each row to unit L2 norm; rows with norm < 1e-12 become zero."""
        norms = np.sqrt(np.sum(self.data * self.data, axis=1, keepdims=True))
        dead = norms < 1e-12
        safe = np.where(dead, 1.0, norms)
        y = np.where(dead, 0.0, self.data / safe)
        out = Tensor(y, requires_grad=self.requires_grad,
                     _prev=(self,), _op="l2_normalize_rows")
        if out.requires_grad:
            def backward():
                g = out.grad
                # d/dx (x/|x|) = (g - (g.y) y) / |x| rowwise; zero rows stay zero.
                dots = np.sum(g * y, axis=1, keepdims=True)
                dx = np.where(dead, 0.0, (g - dots * y) / safe)
                self._accumulate(dx)
            out._backward = backward
        return out


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(
            f"matmul shape mismatch: ({a.rows}x{a.cols}) @ ({b.rows}x{b.cols})")
    out = Tensor(a.data @ b.data,
                 requires_grad=a.requires_grad or b.requires_grad,
                 _prev=(a, b), _op="matmul")
    if out.requires_grad:
        def backward():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        out._backward = backward
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Horizontal concatenation [a | b]."""
    if a.rows != b.rows:
        raise ShapeError(
            f"concat_cols requires equal row counts, got {a.rows} and {b.rows}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1),
                 requires_grad=a.requires_grad or b.requires_grad,
                 _prev=(a, b), _op="concat_cols")
    if out.requires_grad:
        split = a.cols
        def backward():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g[:, :split])
            if b.requires_grad:
                b._accumulate(g[:, split:])
        out._backward = backward
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Vertical concatenation of matrices with equal column counts."""
    parts = list(parts)
    if not parts:
        raise ValidationError("concat_rows needs at least one block")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise ShapeError("concat_rows requires equal column counts")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0),
                 requires_grad=any(p.requires_grad for p in parts),
                 _prev=tuple(parts), _op="concat_rows")
    if out.requires_grad:
        offsets = np.cumsum([0] + [p.rows for p in parts])
        def backward():
            g = out.grad
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    p._accumulate(g[lo:hi])
        out._backward = backward
    return out


class ScatterPlan:
    """Precomputed segment-sum routing for the backward pass of a gather.

    Sorting the gather index once lets every later backward pass run as a
    contiguous ``np.add.reduceat`` instead of a slow scattered ``np.add.at``.
    Plans are reused across layers and steps for a fixed graph.
    """

    __slots__ = ("order", "starts", "targets")

    def __init__(self, index, n_rows: int):
        idx = np.asarray(index, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
            raise ShapeError("scatter index out of range")
        order = np.argsort(idx, kind="stable")
        sorted_idx = idx[order]
        if idx.size:
            starts = np.flatnonzero(
                np.concatenate([[True], sorted_idx[1:] != sorted_idx[:-1]]))
            self.targets = sorted_idx[starts]
        else:
            starts = np.empty(0, dtype=np.intp)
            self.targets = np.empty(0, dtype=np.intp)
        self.order = order
        self.starts = starts

    def scatter_add(self, out: np.ndarray, grad: np.ndarray) -> None:
        if self.order.size == 0:
            return
        sums = np.add.reduceat(grad[self.order], self.starts, axis=0)
        out[self.targets] += sums


def neighbor_max(edge_values: Tensor, edge_slots: np.ndarray) -> Tensor:
    """Per-vertex, per-channel max over that vertex's edge rows.

    ``edge_slots`` is an (N, max_fan) matrix of edge-row ids, padded with -1
    for vertices with fewer edges. A vertex with no edges yields a zero row.
    Backward routes each output gradient to the single winning edge row;
    ties go to the lowest edge index (first occurrence of the max).
    """
    slots = np.asarray(edge_slots, dtype=np.intp)
    if slots.ndim != 2:
        raise ShapeError("edge_slots must be an (N, max_fan) index matrix")
    n_edges = edge_values.rows
    if slots.size and slots.max() >= n_edges:
        raise ShapeError(
            f"edge slot index {slots.max()} out of range for {n_edges} edge rows")
    n, max_fan = slots.shape
    c = edge_values.cols
    pad = slots < 0
    if max_fan == 0:
        out_data = np.zeros((n, c))
        winners = np.full((n, c), -1, dtype=np.intp)
    else:
        safe = np.where(pad, 0, slots)
        vals = edge_values.data[safe]                    # (N, max_fan, C)
        vals[pad] = -np.inf
        arg = vals.argmax(axis=1)                        # first max wins ties
        out_data = np.take_along_axis(vals, arg[:, None, :], axis=1)[:, 0, :]
        winners = slots[np.arange(n)[:, None], arg]
        empty = pad.all(axis=1)
        if empty.any():
            out_data[empty] = 0.0
            winners[empty] = -1
    out = Tensor(out_data, requires_grad=edge_values.requires_grad,
                 _prev=(edge_values,), _op="neighbor_max")
    if out.requires_grad:
        def backward():
            g = out.grad
            valid = winners >= 0
            if edge_values.grad is None:
                edge_values.grad = np.zeros_like(edge_values.data)
            rows = winners[valid]
            cols = np.broadcast_to(np.arange(c), winners.shape)[valid]
            np.add.at(edge_values.grad, (rows, cols), g[valid])
        out._backward = backward
    return out


def segment_max(x: Tensor, indptr: np.ndarray) -> Tensor:
    """Columnwise max over contiguous row segments [indptr[i], indptr[i+1])."""
    bounds = np.asarray(indptr, dtype=np.intp)
    if bounds.ndim != 1 or bounds.size < 2:
        raise ShapeError("indptr must list at least one segment")
    if bounds[0] != 0 or bounds[-1] != x.rows or np.any(np.diff(bounds) <= 0):
        raise ValidationError("segments must be non-empty and cover all rows")
    n_seg = bounds.size - 1
    out_data = np.empty((n_seg, x.cols))
    winners = np.empty((n_seg, x.cols), dtype=np.intp)
    for s in range(n_seg):
        lo, hi = bounds[s], bounds[s + 1]
        block = x.data[lo:hi]
        arg = block.argmax(axis=0)
        out_data[s] = block[arg, np.arange(x.cols)]
        winners[s] = arg + lo
    out = Tensor(out_data, requires_grad=x.requires_grad,
                 _prev=(x,), _op="segment_max")
    if out.requires_grad:
        def backward():
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            cols = np.broadcast_to(np.arange(x.cols), winners.shape)
            np.add.at(x.grad, (winners.ravel(), cols.ravel()), out.grad.ravel())
        out._backward = backward
    return out


# -- batch normalization ----------------------------------------------------

def _sorted_column_sums(block: np.ndarray) -> np.ndarray:
    # Summing each column in sorted order makes the result independent of
    # the row order of the block (bitwise), which keeps forward outputs
    # invariant under vertex permutations.
    return np.sort(block, axis=0).sum(axis=0)


class BatchNorm:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes with the statistics of the current rows (optionally
    per contiguous row segment, so several independent graphs can share one
    call) and updates running statistics with momentum 0.9. Infer mode
    normalizes with the running statistics. A train-mode call whose segments
    have fewer than 2 rows cannot estimate a variance; it falls back to the
    running statistics and emits a diagnostic warning.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = parameter(np.ones((1, channels)))
        self.beta = parameter(np.zeros((1, channels)))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = float(momentum)
        self.eps = float(eps)

    @property
    def channels(self) -> int:
        return self.gamma.cols

    def __call__(self, x: Tensor, mode: str, indptr: np.ndarray | None = None) -> Tensor:
        if mode not in ("train", "infer"):
            raise ValidationError(f"unknown batchnorm mode {mode!r}")
        if x.cols != self.channels:
            raise ShapeError(
                f"batchnorm expects {self.channels} channels, got {x.cols}")
        if x.rows < 1:
            raise ValidationError("batchnorm requires at least one row")
        if indptr is None:
            bounds = np.array([0, x.rows], dtype=np.intp)
        else:
            bounds = np.asarray(indptr, dtype=np.intp)
        seg_sizes = np.diff(bounds)

        if mode == "train" and seg_sizes.min() < 2:
            warnings.warn(
                "batchnorm train mode with a single-row segment: falling back "
                "to running statistics", RuntimeWarning, stacklevel=2)
            mode = "infer"

        if mode == "infer":
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x.data - self.running_mean) * inv
            out = Tensor(xhat * self.gamma.data + self.beta.data,
                         requires_grad=x.requires_grad or self.gamma.requires_grad
                         or self.beta.requires_grad,
                         _prev=(x, self.gamma, self.beta), _op="batchnorm_infer")
            if out.requires_grad:
                gamma, beta = self.gamma, self.beta
                def backward():
                    g = out.grad
                    if x.requires_grad:
                        x._accumulate(g * (gamma.data * inv))
                    if gamma.requires_grad:
                        gamma._accumulate((g * xhat).sum(axis=0, keepdims=True))
                    if beta.requires_grad:
                        beta._accumulate(g.sum(axis=0, keepdims=True))
                out._backward = backward
            return out

        # Train mode: per-segment statistics, order-invariant sums.
        n_seg = seg_sizes.size
        means = np.empty((n_seg, x.cols))
        variances = np.empty((n_seg, x.cols))
        for s in range(n_seg):
            lo, hi = bounds[s], bounds[s + 1]
            block = x.data[lo:hi]
            m = _sorted_column_sums(block) / seg_sizes[s]
            d = block - m
            variances[s] = _sorted_column_sums(d * d) / seg_sizes[s]
            means[s] = m
        mean_rows = np.repeat(means, seg_sizes, axis=0)
        var_rows = np.repeat(variances, seg_sizes, axis=0)
        inv_rows = 1.0 / np.sqrt(var_rows + self.eps)
        xhat = (x.data - mean_rows) * inv_rows

        # Pooled statistics (weighted over segments) feed the running update.
        total = float(seg_sizes.sum())
        pooled_mean = (means * seg_sizes[:, None]).sum(axis=0) / total
        pooled_var = (variances * seg_sizes[:, None]).sum(axis=0) / total
        self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * pooled_mean
        self.running_var = self.momentum * self.running_var + (1 - self.momentum) * pooled_var

        out = Tensor(xhat * self.gamma.data + self.beta.data,
                     requires_grad=x.requires_grad or self.gamma.requires_grad
                     or self.beta.requires_grad,
                     _prev=(x, self.gamma, self.beta), _op="batchnorm_train")
        if out.requires_grad:
            gamma, beta = self.gamma, self.beta
            starts = bounds[:-1]
            def backward():
                g = out.grad
                if gamma.requires_grad:
                    gamma._accumulate((g * xhat).sum(axis=0, keepdims=True))
                if beta.requires_grad:
                    beta._accumulate(g.sum(axis=0, keepdims=True))
                if x.requires_grad:
                    # Full batch-statistics chain rule, per segment:
                    # dx = gamma/sigma * (g - mean(g) - xhat * mean(g*xhat))
                    gm = np.add.reduceat(g, starts, axis=0) / seg_sizes[:, None]
                    gxm = np.add.reduceat(g * xhat, starts, axis=0) / seg_sizes[:, None]
                    gm_rows = np.repeat(gm, seg_sizes, axis=0)
                    gxm_rows = np.repeat(gxm, seg_sizes, axis=0)
                    dx = gamma.data * inv_rows * (g - gm_rows - xhat * gxm_rows)
                    x._accumulate(dx)
            out._backward = backward
        return out


# -- gradient checking --------------------------------------------------------

def grad_check(build: Callable[[], Tensor], params: Iterable[Tensor],
               h: float = 1e-6) -> float:
    """Compare analytic gradients against central finite differences.

    ``build`` must re-record the computation from scratch on every call and
    return a 1x1 Tensor. Returns the maximum relative error
    ``|g_a - g_n| / max(1, |g_a|, |g_n|)`` over every coordinate of every
    parameter.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = build()
    if loss.data.shape != (1, 1):
        raise ValidationError("grad_check target must evaluate to a 1x1 scalar")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = float(build().data[0, 0])
            flat[i] = saved - h
            down = float(build().data[0, 0])
            flat[i] = saved
            gn = (up - down) / (2.0 * h)
            rel = abs(ga_flat[i] - gn) / max(1.0, abs(ga_flat[i]), abs(gn))
            worst = max(worst, rel)
    return worst
