"""Dense/sparse 2-D linear algebra with tape-based reverse-mode gradients.

Everything is a (rows, cols) matrix; scalars are 1x1. Working precision is
float32; the test suite runs the same graphs in float64 when it compares
analytic gradients against central finite differences. Any operation that
produces NaN or Inf raises immediately instead of letting the value propagate.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse: stale operand, double replay, or a non-scalar loss."""


def _as_2d(data, dtype):
    arr = np.array(data, dtype=dtype, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    """A 2-D value. Leaves are created directly; results come from a Tape.

    `grad` accumulates additively across backward passes for leaves with
    requires_grad=True; call zero_grad() between optimizer steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_gen")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        self.data = _as_2d(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._gen = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.shape != (1, 1):
            raise ValueError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        self.grad = None

    def _accumulate_grad(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g.astype(self.data.dtype, copy=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def parameter(data, dtype=np.float32):
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=np.float32):
    return Tensor(data, requires_grad=False, dtype=dtype)


class SparseMatrix:
    """Immutable sparse matrix in coordinate form.

    Triples are stored sorted lexicographically by (row, col) with unique
    coordinates; values may be any finite float. A CSR view is cached for
    matvec work.
    """

    __slots__ = ("shape", "rows", "cols", "vals", "_csr_cache", "_csc_cache")

    def __init__(self, shape, rows, cols, vals, dtype=np.float32):
        n, m = int(shape[0]), int(shape[1])
        if n <= 0 or m <= 0:
            raise ValueError(f"sparse shape must be positive, got {shape}")
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=dtype)
        if not (rows.shape == cols.shape == vals.shape) or rows.ndim != 1:
            raise ValueError("rows, cols, vals must be equal-length 1-D arrays")
        if rows.size:
            if rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= m:
                raise ValueError("sparse coordinate out of bounds")
            order = np.lexsort((cols, rows))
            rows, cols, vals = rows[order], cols[order], vals[order]
            same = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if same.any():
                k = int(np.flatnonzero(same)[0])
                raise ValueError(f"duplicate sparse coordinate ({rows[k]}, {cols[k]})")
        if not np.isfinite(vals).all():
            raise NonFiniteError("sparse values must be finite")
        self.shape = (n, m)
        self.rows = rows
        self.cols = cols
        self.vals = vals
        self._csr_cache = None
        self._csc_cache = None

    @classmethod
    def from_dense(cls, arr, dtype=np.float32):
        arr = np.asarray(arr)
        r, c = np.nonzero(arr)
        return cls(arr.shape, r, c, arr[r, c], dtype=dtype)

    @property
    def nnz(self):
        return int(self.vals.size)

    def to_dense(self):
        out = np.zeros(self.shape, dtype=self.vals.dtype)
        out[self.rows, self.cols] = self.vals
        return out

    def csr(self):
        if self._csr_cache is None:
            self._csr_cache = scipy.sparse.csr_matrix(
                (self.vals, (self.rows, self.cols)), shape=self.shape
            )
        return self._csr_cache

    def csr_t(self):
        if self._csc_cache is None:
            self._csc_cache = scipy.sparse.csr_matrix(
                (self.vals, (self.cols, self.rows)), shape=(self.shape[1], self.shape[0])
            )
        return self._csc_cache

    def transpose(self):
        return SparseMatrix(
            (self.shape[1], self.shape[0]), self.cols, self.rows, self.vals,
            dtype=self.vals.dtype,
        )

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


def sym_normalize(m: SparseMatrix) -> SparseMatrix:
    """Scale each entry (u, v) by 1/sqrt(deg(u) * deg(v)).

    Degrees are the row and column sums of the matrix. Entries must be
    nonnegative; rows or columns with zero degree have no entries and stay
    all-zero.
    """
    if m.vals.size and m.vals.min() < 0:
        raise ValueError("sym_normalize needs nonnegative entries")
    row_deg = np.zeros(m.shape[0], dtype=np.float64)
    col_deg = np.zeros(m.shape[1], dtype=np.float64)
    np.add.at(row_deg, m.rows, m.vals.astype(np.float64))
    np.add.at(col_deg, m.cols, m.vals.astype(np.float64))
    scale = 1.0 / np.sqrt(row_deg[m.rows] * col_deg[m.cols])
    vals = (m.vals.astype(np.float64) * scale).astype(m.vals.dtype)
    return SparseMatrix(m.shape, m.rows, m.cols, vals, dtype=m.vals.dtype)


def _check_binary_shapes(name, a, b):
    ra, ca = a.shape
    rb, cb = b.shape
    if (ra != rb and 1 not in (ra, rb)) or (ca != cb and 1 not in (ca, cb)):
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(g, shape):
    # reduce a broadcasted gradient back to the operand's shape
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] > 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] > 1:
        g = g.sum(axis=1, keepdims=True)
    return g


class _Node:
    __slots__ = ("name", "inputs", "out", "bwd")

    def __init__(self, name, inputs, out, bwd):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tape:
    """Ordered record of executed primitives, replayed in reverse exactly once.

    Results belong to the tape that made them; using one after reset() (or on
    a different tape) raises. Leaves (parameters, constants) are tape-free and
    may appear anywhere.
    """

    def __init__(self):
        self._nodes = []
        self._gen = 0
        self._spent = False

    # -- bookkeeping ------------------------------------------------------

    def _check_operand(self, t):
        if not isinstance(t, Tensor):
            raise TypeError(f"expected Tensor, got {type(t).__name__}")
        if t._tape is not None and (t._tape is not self or t._gen != self._gen):
            raise TapeError("operand belongs to a reset or foreign tape")

    def _record(self, name, out_arr, inputs, bwd):
        if not np.isfinite(out_arr).all():
            raise NonFiniteError(f"{name} produced non-finite values")
        out = Tensor.__new__(Tensor)
        out.data = out_arr
        out.requires_grad = False
        out.grad = None
        out._tape = self
        out._gen = self._gen
        self._nodes.append(_Node(name, inputs, out, bwd))
        return out

    @property
    def op_names(self):
        return [n.name for n in self._nodes]

    def reset(self):
        self._nodes.clear()
        self._gen += 1
        self._spent = False

    def backward(self, loss: Tensor):
        """Propagate d(loss)/d(tensor) to every requires_grad leaf.

        Gradients accumulate additively across uses and across calls on
        fresh tapes; the same tape cannot be replayed twice.
        """
        if self._spent:
            raise TapeError("tape already replayed; reset() before reuse")
        self._check_operand(loss)
        if loss._tape is not self:
            raise TapeError("loss was not computed on this tape")
        if loss.shape != (1, 1):
            raise TapeError(f"loss must be 1x1, got {loss.shape}")
        self._spent = True
        grads = {id(loss): (loss, np.ones((1, 1), dtype=loss.data.dtype))}
        for node in reversed(self._nodes):
            entry = grads.pop(id(node.out), None)
            if entry is None:
                continue
            gs = node.bwd(entry[1])
            for t, g in zip(node.inputs, gs):
                if g is None:
                    continue
                if not np.isfinite(g).all():
                    raise NonFiniteError(f"backward of {node.name} produced non-finite values")
                prev = grads.get(id(t))
                if prev is None:
                    grads[id(t)] = (t, g)
                else:
                    grads[id(t)] = (t, prev[1] + g)
        for t, g in grads.values():
            if t.requires_grad:
                t._accumulate_grad(g)

    # -- primitives -------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_operand(a)
        self._check_operand(b)
        if a.cols != b.rows:
            raise ValueError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data @ b.data
        ad, bd = a.data, b.data

        def bwd(g):
            return g @ bd.T, ad.T @ g

        return self._record("matmul", out, (a, b), bwd)

    def spmm(self, m: SparseMatrix, x: Tensor) -> Tensor:
        """Sparse-dense product m @ x. The sparse operand is a constant."""
        self._check_operand(x)
        if m.shape[1] != x.rows:
            raise ValueError(f"spmm: inner dims differ, {m.shape} x {x.shape}")
        vals = m.vals.astype(x.data.dtype, copy=False)
        out = np.zeros((m.shape[0], x.cols), dtype=x.data.dtype)
        np.add.at(out, m.rows, vals[:, None] * x.data[m.cols])
        rows, cols = m.rows, m.cols

        def bwd(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, cols, vals[:, None] * g[rows])
            return (gx,)

        return self._record("spmm", out, (x,), bwd)

    def spmm_weighted(self, structure: SparseMatrix, vals: Tensor, x: Tensor) -> Tensor:
        """Like spmm but edge values come from an (nnz, 1) tensor.

        Gradients flow into both the edge values and the dense operand; the
        coordinate structure itself is fixed.
        """
        self._check_operand(vals)
        self._check_operand(x)
        if vals.shape != (structure.nnz, 1):
            raise ValueError(
                f"spmm_weighted: values must be ({structure.nnz}, 1), got {vals.shape}"
            )
        if structure.shape[1] != x.rows:
            raise ValueError(
                f"spmm_weighted: inner dims differ, {structure.shape} x {x.shape}"
            )
        rows, cols = structure.rows, structure.cols
        v = vals.data
        out = np.zeros((structure.shape[0], x.cols), dtype=x.data.dtype)
        np.add.at(out, rows, v * x.data[cols])
        xd = x.data

        def bwd(g):
            gv = (g[rows] * xd[cols]).sum(axis=1, keepdims=True)
            gx = np.zeros_like(xd)
            np.add.at(gx, cols, v * g[rows])
            return gv, gx

        return self._record("spmm_weighted", out, (vals, x), bwd)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_operand(a)
        self._check_operand(b)
        _check_binary_shapes("add", a, b)
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data + b.data
        sa, sb = a.shape, b.shape

        def bwd(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

        return self._record("add", out, (a, b), bwd)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_operand(a)
        self._check_operand(b)
        _check_binary_shapes("sub", a, b)
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data - b.data
        sa, sb = a.shape, b.shape

        def bwd(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)

        return self._record("sub", out, (a, b), bwd)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_operand(a)
        self._check_operand(b)
        _check_binary_shapes("mul", a, b)
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data * b.data
        ad, bd = a.data, b.data
        sa, sb = a.shape, b.shape

        def bwd(g):
            return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

        return self._record("mul", out, (a, b), bwd)

    def div(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_operand(a)
        self._check_operand(b)
        _check_binary_shapes("div", a, b)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = a.data / b.data
        ad, bd = a.data, b.data
        sa, sb = a.shape, b.shape

        def bwd(g):
            ga = _unbroadcast(g / bd, sa)
            gb = _unbroadcast(-g * ad / (bd * bd), sb)
            return ga, gb

        return self._record("div", out, (a, b), bwd)

    def scale(self, a: Tensor, c: float) -> Tensor:
        self._check_operand(a)
        c = float(c)
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data * a.data.dtype.type(c)

        def bwd(g):
            return (g * g.dtype.type(c),)

        return self._record("scale", out, (a,), bwd)

    def sigmoid(self, a: Tensor) -> Tensor:
        self._check_operand(a)
        x = a.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def bwd(g):
            return (g * out * (1.0 - out),)

        return self._record("sigmoid", out, (a,), bwd)

    def softplus(self, a: Tensor) -> Tensor:
        """ln(1 + exp(x)), computed stably."""
        self._check_operand(a)
        x = a.data
        out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

        def bwd(g):
            s = np.empty_like(x)
            pos = x >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            s[~pos] = ex / (1.0 + ex)
            return (g * s,)

        return self._record("softplus", out, (a,), bwd)

    def log(self, a: Tensor) -> Tensor:
        self._check_operand(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a.data)
        ad = a.data

        def bwd(g):
            return (g / ad,)

        return self._record("log", out, (a,), bwd)

    def exp(self, a: Tensor) -> Tensor:
        self._check_operand(a)
        with np.errstate(over="ignore"):
            out = np.exp(a.data)

        def bwd(g):
            return (g * out,)

        return self._record("exp", out, (a,), bwd)

    def relu(self, a: Tensor) -> Tensor:
        self._check_operand(a)
        out = np.maximum(a.data, 0)
        mask = (a.data > 0).astype(a.data.dtype)

        def bwd(g):
            return (g * mask,)

        return self._record("relu", out, (a,), bwd)

    def leaky_relu(self, a: Tensor, slope=0.2) -> Tensor:
        self._check_operand(a)
        slope = float(slope)
        out = np.where(a.data > 0, a.data, a.data * a.data.dtype.type(slope))
        mask = np.where(a.data > 0, a.data.dtype.type(1.0), a.data.dtype.type(slope))

        def bwd(g):
            return (g * mask,)

        return self._record("leaky_relu", out, (a,), bwd)

    def maximum(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise max; on ties the gradient goes to the first operand."""
        self._check_operand(a)
        self._check_operand(b)
        _check_binary_shapes("maximum", a, b)
        out = np.maximum(a.data, b.data)
        take_a = (a.data >= b.data).astype(a.data.dtype)
        sa, sb = a.shape, b.shape

        def bwd(g):
            return _unbroadcast(g * take_a, sa), _unbroadcast(g * (1.0 - take_a), sb)

        return self._record("maximum", out, (a, b), bwd)

    def l2_normalize(self, a: Tensor) -> Tensor:
        """Row-wise x / ||x||; all-zero rows stay zero (zero gradient there)."""
        self._check_operand(a)
        norm = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
        nonzero = norm > 0
        safe = np.where(nonzero, norm, 1.0)
        out = a.data / safe

        def bwd(g):
            dot = (g * out).sum(axis=1, keepdims=True)
            ga = (g - dot * out) / safe
            return (np.where(nonzero, ga, 0.0),)

        return self._record("l2_normalize", out, (a,), bwd)

    def concat(self, tensors) -> Tensor:
        """Column-wise concatenation of tensors with equal row counts."""
        tensors = list(tensors)
        if not tensors:
            raise ValueError("concat needs at least one tensor")
        for t in tensors:
            self._check_operand(t)
        rows = tensors[0].rows
        if any(t.rows != rows for t in tensors):
            raise ValueError("concat: row counts differ")
        out = np.concatenate([t.data for t in tensors], axis=1)
        widths = [t.cols for t in tensors]
        splits = np.cumsum(widths)[:-1]

        def bwd(g):
            return tuple(np.split(g, splits, axis=1))

        return self._record("concat", out, tuple(tensors), bwd)

    def matmul_nt(self, a: Tensor, b: Tensor) -> Tensor:
        """a @ b.T without materializing a transpose, (n, d) x (m, d) -> (n, m)."""
        self._check_operand(a)
        self._check_operand(b)
        if a.cols != b.cols:
            raise ValueError(f"matmul_nt: column dims differ, {a.shape} x {b.shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data @ b.data.T
        ad, bd = a.data, b.data

        def bwd(g):
            return g @ bd, g.T @ ad

        return self._record("matmul_nt", out, (a, b), bwd)

    def row_concat(self, tensors) -> Tensor:
        """Stack tensors with equal column counts, top to bottom."""
        tensors = list(tensors)
        if not tensors:
            raise ValueError("row_concat needs at least one tensor")
        for t in tensors:
            self._check_operand(t)
        cols = tensors[0].cols
        if any(t.cols != cols for t in tensors):
            raise ValueError("row_concat: column counts differ")
        out = np.concatenate([t.data for t in tensors], axis=0)
        splits = np.cumsum([t.rows for t in tensors])[:-1]

        def bwd(g):
            return tuple(np.split(g, splits, axis=0))

        return self._record("row_concat", out, tuple(tensors), bwd)

    def row_gather(self, a: Tensor, idx) -> Tensor:
        """Select rows by index; repeated indices accumulate gradient."""
        self._check_operand(a)
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
            raise IndexError(f"row_gather index out of range for {a.rows} rows")
        out = a.data[idx]
        shape = a.shape

        def bwd(g):
            ga = np.zeros(shape, dtype=g.dtype)
            np.add.at(ga, idx, g)
            return (ga,)

        return self._record("row_gather", out, (a,), bwd)

    def dropout(self, a: Tensor, p: float, rng) -> Tensor:
        """Inverted dropout: keep with prob 1-p, scale kept entries by 1/(1-p).

        p=0 is the exact identity. p=1 is rejected.
        """
        self._check_operand(a)
        p = float(p)
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        if p == 0.0:
            mask = np.ones_like(a.data)
        else:
            keep = rng.random(a.shape) >= p
            mask = keep.astype(a.data.dtype) / a.data.dtype.type(1.0 - p)
        out = a.data * mask

        def bwd(g):
            return (g * mask,)

        return self._record("dropout", out, (a,), bwd)

    def sum(self, a: Tensor) -> Tensor:
        self._check_operand(a)
        out = np.array([[a.data.sum()]], dtype=a.data.dtype)
        shape = a.shape

        def bwd(g):
            return (np.full(shape, g[0, 0], dtype=g.dtype),)

        return self._record("sum", out, (a,), bwd)

    def mean(self, a: Tensor) -> Tensor:
        self._check_operand(a)
        out = np.array([[a.data.mean()]], dtype=a.data.dtype)
        shape = a.shape
        n = a.data.size

        def bwd(g):
            return (np.full(shape, g[0, 0] / n, dtype=g.dtype),)

        return self._record("mean", out, (a,), bwd)

    def rowsum(self, a: Tensor) -> Tensor:
        """Sum along columns, shape (n, d) -> (n, 1)."""
        self._check_operand(a)
        out = a.data.sum(axis=1, keepdims=True)
        cols = a.cols

        def bwd(g):
            return (np.repeat(g, cols, axis=1),)

        return self._record("rowsum", out, (a,), bwd)

    def softmax(self, a: Tensor) -> Tensor:
        """Row-wise softmax with max-shift stabilization."""
        self._check_operand(a)
        shifted = a.data - a.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=1, keepdims=True)

        def bwd(g):
            dot = (g * out).sum(axis=1, keepdims=True)
            return (out * (g - dot),)

        return self._record("softmax", out, (a,), bwd)

    def stop_gradient(self, a: Tensor) -> Tensor:
        """Identity forward; blocks all gradient flow."""
        self._check_operand(a)
        out = a.data.copy()

        def bwd(g):
            return (None,)

        return self._record("stop_gradient", out, (a,), bwd)

    def cosine_similarity(self, a: Tensor, b: Tensor) -> Tensor:
        """Row-wise cosine, shape (n, d) x (n, d) -> (n, 1).

        Composed from l2_normalize, mul and rowsum, so a row that is all zero
        on either side yields cosine 0.
        """
        an = self.l2_normalize(a)
        bn = self.l2_normalize(b)
        return self.rowsum(self.mul(an, bn))


def backward(tape: Tape, loss: Tensor):
    tape.backward(loss)
