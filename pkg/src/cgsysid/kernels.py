"""Volterra kernel representations: dense, hierarchical (low-rank off-diagonal
orthants), and symmetric Toeplitz.

Every kernel flattens to a 1-D float64 parameter vector whose layout is fixed
by its :class:`KernelSpec`.  The hierarchical layout is level-major::

    [split level 0 | split level 1 | ... | dense leaves]

where split level ``l`` holds an array of shape ``(2**l, M, k, d, h)``:
diagonal node, off-diagonal orthant (ascending bitmask, ``M = 2**d - 2``),
rank component, axis, and entries of the factor vector of side ``h``.
Leaves are ``(n // leaf, leaf, ..., leaf)`` in C order.

Orthant masks use bit ``a`` for axis ``a``; a set bit selects the upper half.
Masks ``0`` and ``2**d - 1`` are the two diagonal children.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import _hot

REPRS = ("dense", "hierarchical", "toeplitz_sym")
MAX_DENSE_ENTRIES = 2 ** 24


def _is_pow2(x: int) -> bool:
    return isinstance(x, (int, np.integer)) and x >= 1 and (x & (x - 1)) == 0


@dataclass(frozen=True)
class KernelSpec:
    """Structure descriptor of one kernel; ``k`` and ``leaf_size`` only
    matter for the hierarchical representation.  A hierarchical kernel with
    ``n <= leaf_size`` is a single dense leaf."""

    repr: str
    d: int
    n: int
    k: int = 1
    leaf_size: int = 2

    def __post_init__(self):
        if self.repr not in REPRS:
            raise ValueError(f"unknown kernel representation {self.repr!r}")
        if not _is_pow2(self.n):
            raise ValueError(f"kernel side n must be a power of two, got {self.n}")
        if self.d < 1:
            raise ValueError(f"tensor rank must be >= 1, got {self.d}")
        if self.repr == "toeplitz_sym" and self.d != 2:
            raise ValueError("symmetric Toeplitz kernels exist only for d = 2")
        if self.repr == "hierarchical":
            if self.d < 2:
                raise ValueError("hierarchical kernels need d >= 2")
            if self.k < 1:
                raise ValueError(f"rank k must be >= 1, got {self.k}")
            if not _is_pow2(self.leaf_size):
                raise ValueError(f"leaf_size must be a power of two, got {self.leaf_size}")

    def to_dict(self) -> dict:
        return {"repr": self.repr, "d": self.d, "n": self.n, "k": self.k,
                "leaf_size": self.leaf_size}


# ---------------------------------------------------------------------------
# kernel types


@dataclass(frozen=True, eq=False)
class LowRankBlock:
    """Sum of ``k`` d-way outer products; ``factors`` has shape (k, d, s)."""

    factors: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.factors, dtype=np.float64)
        if f.ndim != 3:
            raise ValueError("factors must have shape (k, d, s)")
        object.__setattr__(self, "factors", f)

    @property
    def k(self) -> int:
        return self.factors.shape[0]

    @property
    def d(self) -> int:
        return self.factors.shape[1]

    @property
    def side(self) -> int:
        return self.factors.shape[2]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.side,) * self.d)
        for group in self.factors:
            term = group[0]
            for vec in group[1:]:
                term = np.multiply.outer(term, vec)
            out += term
        return out


@dataclass(frozen=True, eq=False)
class HKernel:
    """Hierarchical tensor node.

    A leaf carries ``leaf`` (dense, side ``n``); a split carries two diagonal
    ``children`` (orthants ``0`` and ``2**d - 1``) and ``blocks``, a dict from
    off-diagonal orthant mask to :class:`LowRankBlock` of side ``n // 2``.
    ``k`` and ``leaf_size`` describe the whole tree.
    """

    d: int
    n: int
    k: int
    leaf_size: int
    leaf: np.ndarray | None = None
    children: tuple | None = None
    blocks: dict = field(default_factory=dict)

    @property
    def spec(self) -> KernelSpec:
        return KernelSpec("hierarchical", self.d, self.n, self.k, self.leaf_size)

    @property
    def is_leaf(self) -> bool:
        return self.leaf is not None


@dataclass(frozen=True, eq=False)
class SymToeplitz:
    """Symmetric Toeplitz matrix ``M[i, j] = row[|i - j|]``."""

    row: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row", np.asarray(self.row, dtype=np.float64).ravel())

    @property
    def n(self) -> int:
        return self.row.size

    @property
    def d(self) -> int:
        return 2

    @property
    def spec(self) -> KernelSpec:
        return KernelSpec("toeplitz_sym", 2, self.n)


@dataclass(frozen=True, eq=False)
class DenseKernel:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim < 1 or len(set(v.shape)) != 1:
            raise ValueError(f"dense kernel must be a hypercube, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.ndim

    @property
    def spec(self) -> KernelSpec:
        return KernelSpec("dense", self.d, self.n)


Kernel = Union[HKernel, SymToeplitz, DenseKernel]


# ---------------------------------------------------------------------------
# parameter counts


def _split_levels(n: int, leaf_size: int):
    """Node sides that get split, root first."""
    sides = []
    s = n
    while s > leaf_size:
        sides.append(s)
        s //= 2
    return sides, s


def param_count(spec: KernelSpec) -> int:
    """Exact number of stored scalars for ``spec``."""
    if spec.repr == "dense":
        return spec.n ** spec.d
    if spec.repr == "toeplitz_sym":
        return spec.n
    d, n, k = spec.d, spec.n, spec.k
    sides, leaf = _split_levels(n, spec.leaf_size)
    total = sum((n // s) * (2 ** d - 2) * k * d * (s // 2) for s in sides)
    return total + (n // leaf) * leaf ** d


def param_bound_closed_form(p: int, d: int, k: int) -> int:
    """``2**p * (2**(d-1)*d*k*p - d*k*p + 1)``, the solution of
    ``N(p) = k*d*(2**d - 2)*2**(p-1) + 2*N(p-1)``, ``N(0) = 1``."""
    if p < 0 or d < 1 or k < 0:
        raise ValueError("need p >= 0, d >= 1, k >= 0")
    return 2 ** p * (2 ** (d - 1) * d * k * p - d * k * p + 1)


# ---------------------------------------------------------------------------
# flat layout


@dataclass(frozen=True, eq=False)
class HPlan:
    """Flat layout of a hierarchical kernel, shared by both backends."""

    d: int
    n: int
    k: int
    levels: tuple          # (start, nodes, half) per split level
    bits: np.ndarray       # (M, d) orthant bits
    leaf_start: int
    leaf_count: int
    leaf_side: int
    size: int
    blk_start: np.ndarray  # per low-rank block, for the numba path
    blk_side: np.ndarray
    blk_off: np.ndarray
    leaf_starts: np.ndarray
    leaf_offs: np.ndarray


def off_diagonal_masks(d: int) -> list[int]:
    return list(range(1, 2 ** d - 1))


@functools.lru_cache(maxsize=None)
def hplan(d: int, n: int, k: int, leaf_size: int) -> HPlan:
    masks = off_diagonal_masks(d)
    M = len(masks)
    bits = np.array([[(m >> a) & 1 for a in range(d)] for m in masks], dtype=np.int64).reshape(M, d)
    sides, leaf = _split_levels(n, leaf_size)
    levels = []
    blk_start, blk_side, blk_off = [], [], []
    pos = 0
    for s in sides:
        nodes, half = n // s, s // 2
        levels.append((pos, nodes, half))
        for p in range(nodes):
            for mi in range(M):
                blk_start.append(pos + (p * M + mi) * k * d * half)
                blk_side.append(half)
                blk_off.append([p * s + bits[mi, a] * half for a in range(d)])
        pos += nodes * M * k * d * half
    count = n // leaf
    leaf_start = pos
    pos += count * leaf ** d
    return HPlan(
        d=d, n=n, k=k, levels=tuple(levels), bits=bits,
        leaf_start=leaf_start, leaf_count=count, leaf_side=leaf, size=pos,
        blk_start=np.array(blk_start, dtype=np.int64),
        blk_side=np.array(blk_side, dtype=np.int64),
        blk_off=np.array(blk_off, dtype=np.int64).reshape(-1, d),
        leaf_starts=np.array([leaf_start + q * leaf ** d for q in range(count)], dtype=np.int64),
        leaf_offs=np.array([q * leaf for q in range(count)], dtype=np.int64),
    )


def layout(spec: KernelSpec) -> list[tuple[str, slice, tuple]]:
    """Named segments ``(name, slice, shape)`` of the flat parameter vector."""
    if spec.repr == "dense":
        return [("values", slice(0, spec.n ** spec.d), (spec.n,) * spec.d)]
    if spec.repr == "toeplitz_sym":
        return [("row", slice(0, spec.n), (spec.n,))]
    plan = hplan(spec.d, spec.n, spec.k, spec.leaf_size)
    M = plan.bits.shape[0]
    segs = []
    for lvl, (start, nodes, half) in enumerate(plan.levels):
        shape = (nodes, M, spec.k, spec.d, half)
        segs.append((f"level{lvl}", slice(start, start + int(np.prod(shape))), shape))
    shape = (plan.leaf_count,) + (plan.leaf_side,) * spec.d
    segs.append(("leaves", slice(plan.leaf_start, plan.size), shape))
    return segs


def _level_of_side(plan: HPlan, side: int) -> int:
    for i, (_, nodes, _) in enumerate(plan.levels):
        if plan.n // nodes == side:
            return i
    raise KeyError(side)


def flatten(kernel: Kernel) -> np.ndarray:
    if isinstance(kernel, DenseKernel):
        return kernel.values.ravel().copy()
    if isinstance(kernel, SymToeplitz):
        return kernel.row.copy()
    if not isinstance(kernel, HKernel):
        raise TypeError(f"not a kernel: {type(kernel).__name__}")
    plan = hplan(kernel.d, kernel.n, kernel.k, kernel.leaf_size)
    theta = np.zeros(plan.size)
    masks = off_diagonal_masks(kernel.d)
    frontier = [kernel]
    for start, nodes, half in plan.levels:
        if len(frontier) != nodes:
            raise ValueError("hierarchical tree does not match its declared structure")
        width = kernel.k * kernel.d * half
        nxt = []
        for p, node in enumerate(frontier):
            if node.is_leaf or node.n != 2 * half:
                raise ValueError("hierarchical tree does not match its declared structure")
            for mi, m in enumerate(masks):
                blk = node.blocks[m]
                if blk.factors.shape != (kernel.k, kernel.d, half):
                    raise ValueError(f"block {m} has factor shape {blk.factors.shape}")
                off = start + (p * len(masks) + mi) * width
                theta[off:off + width] = blk.factors.ravel()
            nxt.extend(node.children)
        frontier = nxt
    size = plan.leaf_side ** kernel.d
    for q, node in enumerate(frontier):
        if not node.is_leaf or node.leaf.shape != (plan.leaf_side,) * kernel.d:
            raise ValueError("hierarchical tree does not match its declared structure")
        off = plan.leaf_start + q * size
        theta[off:off + size] = node.leaf.ravel()
    return theta


def unflatten(theta: np.ndarray, spec: KernelSpec) -> Kernel:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size != param_count(spec):
        raise ValueError(f"parameter vector of length {theta.size} does not match "
                         f"{spec} ({param_count(spec)} parameters)")
    theta = theta.copy()
    if spec.repr == "dense":
        return DenseKernel(theta.reshape((spec.n,) * spec.d))
    if spec.repr == "toeplitz_sym":
        return SymToeplitz(theta)
    plan = hplan(spec.d, spec.n, spec.k, spec.leaf_size)
    masks = off_diagonal_masks(spec.d)
    d, k = spec.d, spec.k

    def build(lvl: int, p: int, side: int) -> HKernel:
        if lvl == len(plan.levels):
            size = side ** d
            off = plan.leaf_start + p * size
            return HKernel(d, side, k, spec.leaf_size,
                           leaf=theta[off:off + size].reshape((side,) * d))
        start, _, half = plan.levels[lvl]
        width = k * d * half
        blocks = {}
        for mi, m in enumerate(masks):
            off = start + (p * len(masks) + mi) * width
            blocks[m] = LowRankBlock(theta[off:off + width].reshape(k, d, half))
        kids = (build(lvl + 1, 2 * p, half), build(lvl + 1, 2 * p + 1, half))
        return HKernel(d, side, k, spec.leaf_size, children=kids, blocks=blocks)

    return build(0, 0, spec.n)


# ---------------------------------------------------------------------------
# constructors


def _hk_spec(d: int, n: int, k: int, leaf_size: int) -> KernelSpec:
    spec = KernelSpec("hierarchical", d, n, k, leaf_size)
    if n < leaf_size:
        raise ValueError(f"side n={n} is smaller than leaf_size={leaf_size}")
    return spec


def hk_zeros(d: int, n: int, k: int = 1, leaf_size: int = 2) -> HKernel:
    spec = _hk_spec(d, n, k, leaf_size)
    return unflatten(np.zeros(param_count(spec)), spec)


def hk_random(d: int, n: int, k: int = 1, leaf_size: int = 2,
              scale: float = 1.0, seed: int | None = 0) -> HKernel:
    """Every stored scalar i.i.d. uniform in ``[-scale, scale]``."""
    spec = _hk_spec(d, n, k, leaf_size)
    rng = np.random.default_rng(seed)
    return unflatten(rng.uniform(-scale, scale, param_count(spec)), spec)


def zeros(spec: KernelSpec) -> Kernel:
    return unflatten(np.zeros(param_count(spec)), spec)


def random_kernel(spec: KernelSpec, scale: float = 1.0, seed: int | None = 0) -> Kernel:
    rng = np.random.default_rng(seed)
    return unflatten(rng.uniform(-scale, scale, param_count(spec)), spec)


# ---------------------------------------------------------------------------
# dense oracle and projection


def toeplitz_matrix(row: np.ndarray) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    idx = np.arange(row.size)
    return row[np.abs(idx[:, None] - idx[None, :])]


def _hk_dense(node: HKernel) -> np.ndarray:
    if node.is_leaf:
        return node.leaf.copy()
    n, d = node.n, node.d
    half = n // 2
    out = np.zeros((n,) * d)
    full = 2 ** d - 1
    for m, child in ((0, node.children[0]), (full, node.children[1])):
        out[_orthant_index(m, d, half)] = _hk_dense(child)
    for m, blk in node.blocks.items():
        out[_orthant_index(m, d, half)] = blk.to_dense()
    return out


def _orthant_index(mask: int, d: int, half: int) -> tuple:
    return tuple(slice(half, 2 * half) if (mask >> a) & 1 else slice(0, half) for a in range(d))


def to_dense(kernel: Kernel) -> DenseKernel:
    if kernel.n ** kernel.d > MAX_DENSE_ENTRIES:
        raise ValueError(f"refusing to materialize {kernel.n}^{kernel.d} entries "
                         f"(limit {MAX_DENSE_ENTRIES})")
    if isinstance(kernel, DenseKernel):
        return DenseKernel(kernel.values.copy())
    if isinstance(kernel, SymToeplitz):
        return DenseKernel(toeplitz_matrix(kernel.row))
    return DenseKernel(_hk_dense(kernel))


def project_to_hierarchical(dense, k: int = 1, leaf_size: int = 2) -> HKernel:
    """Best rank-``k`` approximation (truncated SVD) of every off-diagonal
    block; diagonal blocks recurse and leaves are copied."""
    A = dense.values if isinstance(dense, DenseKernel) else np.asarray(dense, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"need a square matrix, got shape {A.shape}")
    n = A.shape[0]
    KernelSpec("hierarchical", 2, n, k, leaf_size)

    def build(B: np.ndarray) -> HKernel:
        side = B.shape[0]
        if side <= leaf_size:
            return HKernel(2, side, k, leaf_size, leaf=B.copy())
        h = side // 2
        blocks = {}
        for m, sub in ((1, B[h:, :h]), (2, B[:h, h:])):
            U, s, Vt = np.linalg.svd(sub)
            r = min(k, s.size)
            fac = np.zeros((k, 2, h))
            root = np.sqrt(s[:r])
            fac[:r, 0, :] = (U[:, :r] * root).T
            fac[:r, 1, :] = Vt[:r, :] * root[:, None]
            blocks[m] = LowRankBlock(fac)
        kids = (build(B[:h, :h]), build(B[h:, h:]))
        return HKernel(2, side, k, leaf_size, children=kids, blocks=blocks)

    return build(A)


# ---------------------------------------------------------------------------
# single-vector evaluation


def _check_len(kernel: Kernel, v: np.ndarray, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (kernel.n,):
        raise ValueError(f"{what} has shape {v.shape}, kernel side is {kernel.n}")
    return v


def _contract_dense(values: np.ndarray, w: np.ndarray, ops) -> float:
    # contract the trailing axis repeatedly: n^d + n^(d-1) + ... multiply-adds
    Z = values
    while Z.ndim:
        if ops is not None:
            ops[0] += Z.size
        Z = Z @ w
    return float(Z)


def _hk_form(node: HKernel, w: np.ndarray, ops) -> float:
    if node.is_leaf:
        return _contract_dense(node.leaf, w, ops)
    half = node.n // 2
    lo, hi = w[:half], w[half:]
    acc = _hk_form(node.children[0], lo, ops) + _hk_form(node.children[1], hi, ops)
    for m, blk in node.blocks.items():
        for group in blk.factors:
            prod = 1.0
            for a, vec in enumerate(group):
                prod *= float(vec @ (hi if (m >> a) & 1 else lo))
            if ops is not None:
                ops[0] += node.d * half + node.d
            acc += prod
    return acc


def multilinear_form(kernel: Kernel, w, ops: list | None = None) -> float:
    """``sum kernel[i1..id] * w[i1] * ... * w[id]``.

    ``ops`` is an optional one-element list; the number of scalar
    multiply-adds performed is added to ``ops[0]``.
    """
    w = _check_len(kernel, w, "window")
    if isinstance(kernel, HKernel):
        return _hk_form(kernel, w, ops)
    if isinstance(kernel, SymToeplitz):
        return _contract_dense(toeplitz_matrix(kernel.row), w, ops)
    return _contract_dense(kernel.values, w, ops)


def _hk_matvec(node: HKernel, x: np.ndarray) -> np.ndarray:
    if node.is_leaf:
        return node.leaf @ x
    h = node.n // 2
    y = np.concatenate([_hk_matvec(node.children[0], x[:h]), _hk_matvec(node.children[1], x[h:])])
    for m, blk in node.blocks.items():
        rows = slice(h, 2 * h) if m & 1 else slice(0, h)
        cols = slice(h, 2 * h) if m & 2 else slice(0, h)
        # axis 0 indexes rows, axis 1 indexes columns
        y[rows] += blk.factors[:, 0, :].T @ (blk.factors[:, 1, :] @ x[cols])
    return y


def matvec(kernel: Kernel, x) -> np.ndarray:
    if kernel.d != 2:
        raise ValueError("matvec needs a rank-2 kernel")
    x = _check_len(kernel, x, "vector")
    if isinstance(kernel, HKernel):
        return _hk_matvec(kernel, x)
    if isinstance(kernel, SymToeplitz):
        return toeplitz_matrix(kernel.row) @ x
    return kernel.values @ x


# ---------------------------------------------------------------------------
# batched evaluation on flat parameters


def contract(spec: KernelSpec, theta: np.ndarray, windows: np.ndarray,
             lag_major: bool = False) -> np.ndarray:
    """Contract the kernel with every window.

    ``windows`` is ``(T, n)`` (the same vector on every axis) or ``(d, T, n)``
    (one vector per axis); with ``lag_major=True`` it is already transposed
    to ``(m, n, T)`` and contiguous, which avoids a copy per call.
    Returns shape ``(T,)``.
    """
    wt = _as_wt(spec, windows, lag_major)
    if spec.repr == "hierarchical":
        return _hot.hier_forward(theta, wt, hplan(spec.d, spec.n, spec.k, spec.leaf_size))
    return _hot.dense_forward(_dense_values(spec, theta), wt)


def contract_grad(spec: KernelSpec, theta: np.ndarray, windows: np.ndarray,
                  weights: np.ndarray, lag_major: bool = False) -> np.ndarray:
    """Gradient of ``sum_t weights[t] * contract(...)[t]`` w.r.t. ``theta``."""
    wt = _as_wt(spec, windows, lag_major)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (wt.shape[2],):
        raise ValueError(f"weights shape {weights.shape} does not match {wt.shape[2]} windows")
    if spec.repr == "hierarchical":
        return _hot.hier_backward(theta, wt, weights, hplan(spec.d, spec.n, spec.k, spec.leaf_size))
    G = _hot.dense_backward(wt, weights, spec.d, spec.n)
    if spec.repr == "toeplitz_sym":
        return fold_toeplitz(G)
    return G.ravel()


def fold_toeplitz(G: np.ndarray) -> np.ndarray:
    """Sum a dense matrix gradient over each band ``|i - j| = m``."""
    n = G.shape[0]
    idx = np.arange(n)
    lag = np.abs(idx[:, None] - idx[None, :])
    return np.bincount(lag.ravel(), weights=G.ravel(), minlength=n)


def _dense_values(spec: KernelSpec, theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size != param_count(spec):
        raise ValueError(f"expected {param_count(spec)} parameters, got {theta.size}")
    if spec.repr == "toeplitz_sym":
        return toeplitz_matrix(theta)
    return theta.reshape((spec.n,) * spec.d)


def _as_wt(spec: KernelSpec, windows, lag_major: bool) -> np.ndarray:
    if lag_major:
        wt = windows
        if wt.ndim == 2:
            wt = wt[None]
    else:
        wt = _hot.lag_major(windows)
    if wt.ndim != 3 or wt.shape[0] not in (1, spec.d) or wt.shape[1] != spec.n:
        raise ValueError(f"windows of shape {np.shape(windows)} do not fit {spec}")
    return wt


def apply_batch(spec: KernelSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Rows of ``X @ M.T`` for a rank-2 kernel ``M`` given by flat ``theta``."""
    if spec.d != 2:
        raise ValueError("apply_batch needs a rank-2 kernel")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != spec.n:
        raise ValueError(f"inputs have length {X.shape[1]}, kernel side is {spec.n}")
    if spec.repr != "hierarchical":
        return X @ _dense_values(spec, theta).T
    plan = hplan(2, spec.n, spec.k, spec.leaf_size)
    m = X.shape[0]
    Y = np.zeros_like(X)
    for start, nodes, half in plan.levels:
        F = theta[start:start + nodes * 2 * spec.k * 2 * half].reshape(nodes, 2, spec.k, 2, half)
        Xs = X.reshape(m, nodes, 2, half)
        Ys = Y.reshape(m, nodes, 2, half)
        for mi, mask in enumerate((1, 2)):
            rb, cb = mask & 1, (mask >> 1) & 1
            # coefficients (m, P, k) = <v_g, x_cols>, then spread along u_g
            c = np.einsum("mph,pgh->mpg", Xs[:, :, cb, :], F[:, mi, :, 1, :])
            Ys[:, :, rb, :] += np.einsum("mpg,pgh->mph", c, F[:, mi, :, 0, :])
    if plan.leaf_count:
        s = plan.leaf_side
        Lf = theta[plan.leaf_start:plan.size].reshape(plan.leaf_count, s, s)
        Y += np.einsum("qij,mqj->mqi", Lf, X.reshape(m, plan.leaf_count, s)).reshape(m, -1)
    return Y


def apply_batch_grad(spec: KernelSpec, theta: np.ndarray, X: np.ndarray,
                     U: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(U * apply_batch(spec, theta, X))`` w.r.t. ``theta``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    if X.shape != U.shape:
        raise ValueError(f"input batch {X.shape} and upstream {U.shape} differ")
    return contract_grad(spec, theta, np.stack([U, X]), np.ones(X.shape[0]))


# ---------------------------------------------------------------------------
# gradients of the single-vector operations


def grad_multilinear_form(kernel: Kernel, w, upstream: float = 1.0) -> np.ndarray:
    w = _check_len(kernel, w, "window")
    return float(upstream) * contract_grad(kernel.spec, flatten(kernel), w[None], np.ones(1))


def grad_matvec(kernel: Kernel, x, upstream) -> np.ndarray:
    """Gradient of ``upstream @ matvec(kernel, x)`` in flatten order."""
    if kernel.d != 2:
        raise ValueError("grad_matvec needs a rank-2 kernel")
    x = _check_len(kernel, x, "vector")
    u = _check_len(kernel, upstream, "upstream")
    return contract_grad(kernel.spec, flatten(kernel), np.stack([u[None], x[None]]), np.ones(1))


# ---------------------------------------------------------------------------
# serialization


def kernel_to_dict(kernel: Kernel) -> dict:
    out = kernel.spec.to_dict()
    out["parameters"] = flatten(kernel).tolist()
    return out


def spec_from_dict(obj: dict) -> KernelSpec:
    try:
        return KernelSpec(str(obj["repr"]), int(obj["d"]), int(obj["n"]),
                          int(obj.get("k", 1)), int(obj.get("leaf_size", 2)))
    except KeyError as exc:
        raise ValueError(f"kernel description lacks field {exc}") from None


def kernel_from_dict(obj: dict) -> Kernel:
    spec = spec_from_dict(obj)
    if "parameters" not in obj:
        raise ValueError("kernel description lacks field 'parameters'")
    return unflatten(np.asarray(obj["parameters"], dtype=np.float64), spec)
