"""Structured chart grids and their finite-difference operators.

Every reference surface lives on a single logically rectangular grid.  Each
axis is periodic, pole-terminated (sphere latitude) or plain-bounded.  All
difference operators are second-order centred stencils assembled as sparse
matrices acting on flattened node arrays (C order).

Pole handling: a pole axis uses nodes offset by half a step from the poles,
so the ghost node beyond the last row is the reflected row shifted by half a
period along the periodic partner axis.  Component fields of tensors pick up
a factor ``(-1)**parity`` when fetched across a pole, where ``parity`` counts
the tensor indices along the pole axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

MIN_NODES = 8


class GridError(ValueError):
    """Invalid grid construction."""


@dataclass(frozen=True, eq=False)
class ChartGrid:
    """Node layout of a chart.

    Parameters
    ----------
    dims : tuple of int
        Node count per axis.
    spacing : tuple of float
        Step per axis in chart coordinates.
    origin : tuple of float
        Coordinate of node 0 on each axis.
    periodic : tuple of bool
        Axis wraps by index.
    pole_axes : tuple of bool
        Axis endpoints are coordinate poles.  The partner periodic axis used
        for the half-period shift is ``pole_partner``.
    """

    dims: tuple[int, ...]
    spacing: tuple[float, ...]
    origin: tuple[float, ...]
    periodic: tuple[bool, ...]
    pole_axes: tuple[bool, ...]
    pole_partner: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        m = len(self.dims)
        if not (len(self.spacing) == len(self.origin) == len(self.periodic) == len(self.pole_axes) == m):
            raise GridError("per-axis tuples must all have one entry per axis")
        for k in range(m):
            if self.dims[k] < MIN_NODES:
                raise GridError(f"axis {k} has {self.dims[k]} nodes; at least {MIN_NODES} are required")
            if not self.spacing[k] > 0:
                raise GridError(f"axis {k} spacing must be positive")
            if self.periodic[k] and self.pole_axes[k]:
                raise GridError(f"axis {k} cannot be both periodic and pole-terminated")
            if self.pole_axes[k]:
                p = self.pole_partner
                if p is None or p == k or not self.periodic[p]:
                    raise GridError("a pole axis needs a periodic partner axis")
                if self.dims[p] % 2:
                    raise GridError("the partner of a pole axis needs an even node count")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.dims)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_coords(self, k: int) -> np.ndarray:
        return self.origin[k] + self.spacing[k] * np.arange(self.dims[k])

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        """Flattened chart coordinates of every node, one array per axis."""
        mesh = np.meshgrid(*[self.axis_coords(k) for k in range(self.ndim)], indexing="ij")
        return tuple(c.ravel() for c in mesh)

    def parity(self, indices) -> int:
        """Number of tensor indices lying along a pole axis, mod 2."""
        return sum(1 for i in indices if self.pole_axes[i]) % 2

    # -- sparse operators -------------------------------------------------

    def _shift(self, axis: int, step: int, parity: int) -> sp.csr_matrix:
        """Matrix returning, at each node, the value at the neighbour ``step`` away."""
        key = ("shift", axis, step, parity)
        if key in self._cache:
            return self._cache[key]
        n = self.dims[axis]
        idx = np.arange(self.size).reshape(self.shape)
        rows, cols, vals = [], [], []
        j = np.arange(n)
        target = j + step
        inside = (target >= 0) & (target < n)

        def take(sel_src, sel_dst, sign=1.0, partner_shift=0):
            src = np.take(idx, sel_src, axis=axis)
            dst = np.take(idx, sel_dst, axis=axis)
            if partner_shift:
                dst = np.roll(dst, -partner_shift, axis=self.pole_partner)
            rows.append(src.ravel())
            cols.append(dst.ravel())
            vals.append(np.full(src.size, sign))

        if self.periodic[axis]:
            take(j, target % n)
        else:
            take(j[inside], target[inside])
            lo = j[target < 0]
            hi = j[target >= n]
            if self.pole_axes[axis]:
                half = self.dims[self.pole_partner] // 2
                sign = -1.0 if parity % 2 else 1.0
                # reflection about the pole: row -1-q  <->  row q, row n+q <-> row n-1-q
                if lo.size:
                    take(lo, -1 - target[target < 0], sign, half)
                if hi.size:
                    take(hi, 2 * n - 1 - target[target >= n], sign, half)
            else:
                # quadratic extrapolation from the three nearest interior rows
                for s, q in ((lo, target[target < 0]), (hi, target[target >= n])):
                    if not s.size:
                        continue
                    if np.any((q < -1) | (q > n)):
                        raise GridError("extrapolation deeper than one ghost row is not supported")
                    edge = np.where(q < 0, 0, n - 1)
                    inward = np.where(q < 0, 1, -1)
                    for w, off in ((3.0, 0), (-3.0, 1), (1.0, 2)):
                        take(s, edge + inward * off, w)
        mat = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.size, self.size),
        )
        self._cache[key] = mat
        return mat

    def d1(self, axis: int, parity: int = 0) -> sp.csr_matrix:
        """Centred first derivative along ``axis``."""
        key = ("d1", axis, parity % 2)
        if key not in self._cache:
            h = self.spacing[axis]
            op = (self._shift(axis, 1, parity % 2) - self._shift(axis, -1, parity % 2)) / (2.0 * h)
            self._cache[key] = op.tocsr()
        return self._cache[key]

    def d2(self, i: int, j: int, parity: int = 0) -> sp.csr_matrix:
        """Second derivative: compact three-point stencil when ``i == j``,
        composed centred first differences otherwise."""
        key = ("d2", min(i, j), max(i, j), parity % 2)
        if key in self._cache:
            return self._cache[key]
        if i == j:
            h = self.spacing[i]
            eye = sp.identity(self.size, format="csr")
            op = (self._shift(i, 1, parity % 2) - 2.0 * eye + self._shift(i, -1, parity % 2)) / h**2
        else:
            a, b = (i, j) if self.pole_axes[i] or not self.pole_axes[j] else (j, i)
            # differentiate along b first; the result gains b's pole parity
            op = self.d1(a, parity + self.pole_axes[b]) @ self.d1(b, parity)
        self._cache[key] = op.tocsr()
        return self._cache[key]

    def gradient(self, u: np.ndarray, parity: int = 0) -> np.ndarray:
        """Chart partial derivatives of a node field, shape ``(N, m)``."""
        return np.stack([self.d1(k, parity) @ u for k in range(self.ndim)], axis=-1)

    def hessian(self, u: np.ndarray, parity: int = 0) -> np.ndarray:
        """Chart second partials of a node field, shape ``(N, m, m)``, symmetric."""
        m = self.ndim
        out = np.empty(u.shape[:1] + (m, m))
        for i in range(m):
            for j in range(i, m):
                out[:, i, j] = self.d2(i, j, parity) @ u
                out[:, j, i] = out[:, i, j]
        return out

    def neighbour_pairs(self) -> np.ndarray:
        """Index pairs of nodes adjacent along an axis or a cell diagonal
        (each unordered pair once, ghost-free, periodic wrap honoured)."""
        if "pairs" in self._cache:
            return self._cache["pairs"]
        idx = np.arange(self.size).reshape(self.shape)
        pairs = []
        offsets = [o for o in np.ndindex(*([3] * self.ndim))]
        for off in offsets:
            d = np.array(off) - 1
            # keep one representative of each +/- offset
            nz = d[d != 0]
            if nz.size == 0 or nz[0] < 0:
                continue
            src = idx
            dst = idx
            valid = np.ones(self.shape, dtype=bool)
            for k, dk in enumerate(d):
                if dk == 0:
                    continue
                dst = np.roll(dst, -dk, axis=k)
                if not self.periodic[k]:
                    mask = np.ones(self.shape, dtype=bool)
                    sl = [slice(None)] * self.ndim
                    sl[k] = slice(-1, None) if dk > 0 else slice(0, 1)
                    mask[tuple(sl)] = False
                    valid &= mask
            pairs.append(np.stack([src[valid], dst[valid]], axis=-1))
        out = np.concatenate(pairs, axis=0)
        self._cache["pairs"] = out
        return out

    def quad_faces(self, wrap=None) -> np.ndarray:
        """Grid quads as node index quadruples (m = 2 only).

        ``wrap`` selects the axes whose last and first rows are joined;
        it defaults to the periodic axes.
        """
        if self.ndim != 2:
            raise GridError("faces exist only for two-dimensional charts")
        wrap = self.periodic if wrap is None else tuple(wrap)
        idx = np.arange(self.size).reshape(self.shape)
        n0, n1 = self.shape
        i_hi = n0 if wrap[0] else n0 - 1
        j_hi = n1 if wrap[1] else n1 - 1
        faces = []
        for i in range(i_hi):
            for j in range(j_hi):
                a = idx[i, j]
                b = idx[(i + 1) % n0, j]
                c = idx[(i + 1) % n0, (j + 1) % n1]
                d = idx[i, (j + 1) % n1]
                faces.append((a, b, c, d))
        return np.array(faces, dtype=np.int64)
