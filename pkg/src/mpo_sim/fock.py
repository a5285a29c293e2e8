"""Truncated Fock spaces for the subharmonic and pump modes.

Modes are numbered from 1: modes ``1..n`` are the subharmonic (``a``-type)
modes and ``n+1..n+m`` the pump (``b``-type) modes.  Basis vectors are
indexed row-major over the occupation tuple ``(s_1..s_n, p_1..p_m)``.

The creation operator annihilates the top shell of its mode (hard cutoff).
Identities of the untruncated algebra therefore only hold away from the
truncation edge; :func:`interior_projector` selects that subspace.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ModeLayout",
    "OperatorMatrix",
    "QuantumState",
    "make_layout",
    "annihilation",
    "creation",
    "number",
    "identity",
    "basis_state",
    "commutator",
    "interior_projector",
    "edge_mask",
    "dump_operator",
    "load_operator",
]


@dataclass(frozen=True)
class ModeLayout:
    n: int
    m: int
    trunc: tuple[int, ...]

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError(f"need at least one subharmonic and one pump mode, got n={self.n}, m={self.m}")
        if len(self.trunc) != self.n + self.m:
            raise ValueError(f"expected {self.n + self.m} cutoffs, got {len(self.trunc)}")
        bad = [d for d in self.trunc if d < 2]
        if bad:
            raise ValueError(f"every cutoff must be >= 2 (a mode must hold one photon), got {list(self.trunc)}")

    @property
    def n_modes(self) -> int:
        return self.n + self.m

    @cached_property
    def dim(self) -> int:
        return int(np.prod(self.trunc))

    @cached_property
    def strides(self) -> tuple[int, ...]:
        out = []
        acc = 1
        for d in reversed(self.trunc):
            out.append(acc)
            acc *= d
        return tuple(reversed(out))

    @cached_property
    def occupations(self) -> np.ndarray:
        """Occupation table, shape ``(dim, n+m)``; row ``i`` decodes index ``i``."""
        grids = np.indices(self.trunc).reshape(self.n_modes, -1)
        return np.ascontiguousarray(grids.T)

    def encode(self, occ: Sequence[int]) -> int:
        if len(occ) != self.n_modes:
            raise ValueError(f"expected {self.n_modes} occupations, got {len(occ)}")
        for k, (s, d) in enumerate(zip(occ, self.trunc), start=1):
            if not 0 <= s < d:
                raise ValueError(f"occupation {s} of mode {k} outside 0..{d - 1}")
        return int(sum(s * st for s, st in zip(occ, self.strides)))

    def decode(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.dim:
            raise IndexError(f"basis index {index} outside 0..{self.dim - 1}")
        occ = []
        for st, d in zip(self.strides, self.trunc):
            occ.append((index // st) % d)
        return tuple(int(s) for s in occ)

    def check_mode(self, mode: int) -> int:
        if not 1 <= mode <= self.n_modes:
            raise IndexError(f"mode must be in 1..{self.n_modes}, got {mode}")
        return mode - 1

    def mode_name(self, mode: int) -> str:
        k = self.check_mode(mode)
        return f"a{k + 1}" if k < self.n else f"b{k - self.n + 1}"

    def mode_index(self, name: str) -> int:
        """Inverse of :meth:`mode_name` (``'a1'`` -> 1, ``'b1'`` -> n+1)."""
        if len(name) < 2 or name[0] not in "ab" or not name[1:].isdigit():
            raise ValueError(f"unknown mode name {name!r}")
        j = int(name[1:])
        limit = self.n if name[0] == "a" else self.m
        if not 1 <= j <= limit:
            raise ValueError(f"mode {name!r} does not exist for n={self.n}, m={self.m}")
        return j if name[0] == "a" else self.n + j


def make_layout(n: int, m: int, trunc: Iterable[int]) -> ModeLayout:
    return ModeLayout(int(n), int(m), tuple(int(d) for d in trunc))


class OperatorMatrix:
    """Immutable sparse complex operator on a truncated space.

    The wrapped CSR matrix is canonical: sorted indices, no duplicates and no
    stored zeros, so equal operators serialize identically.
    """

    __slots__ = ("_csr",)

    def __init__(self, matrix):
        m = sp.csr_matrix(matrix, dtype=np.complex128, copy=True)
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"operator must be square, got {m.shape}")
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        m.data.setflags(write=False)
        m.indices.setflags(write=False)
        m.indptr.setflags(write=False)
        self._csr = m

    @property
    def csr(self) -> sp.csr_matrix:
        return self._csr

    @property
    def dim(self) -> int:
        return self._csr.shape[0]

    @property
    def nnz(self) -> int:
        return self._csr.nnz

    def entries(self) -> list[tuple[int, int, complex]]:
        coo = self._csr.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return [(int(coo.row[i]), int(coo.col[i]), complex(coo.data[i])) for i in order]

    def dag(self) -> "OperatorMatrix":
        return OperatorMatrix(self._csr.conj().T)

    def toarray(self) -> np.ndarray:
        return self._csr.toarray()

    def max_abs(self) -> float:
        return float(np.max(np.abs(self._csr.data))) if self.nnz else 0.0

    def _check(self, other: "OperatorMatrix"):
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")

    def __matmul__(self, other):
        if isinstance(other, OperatorMatrix):
            self._check(other)
            return OperatorMatrix(self._csr @ other._csr)
        return self._csr @ other

    def __add__(self, other):
        if not isinstance(other, OperatorMatrix):
            return NotImplemented
        self._check(other)
        return OperatorMatrix(self._csr + other._csr)

    def __sub__(self, other):
        if not isinstance(other, OperatorMatrix):
            return NotImplemented
        self._check(other)
        return OperatorMatrix(self._csr - other._csr)

    def __neg__(self):
        return OperatorMatrix(-self._csr)

    def __mul__(self, scalar):
        if isinstance(scalar, OperatorMatrix):
            return NotImplemented
        return OperatorMatrix(self._csr * complex(scalar))

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, OperatorMatrix):
            return NotImplemented
        if other.dim != self.dim:
            return False
        a, b = self._csr, other._csr
        return (
            a.nnz == b.nnz
            and np.array_equal(a.indptr, b.indptr)
            and np.array_equal(a.indices, b.indices)
            and np.array_equal(a.data, b.data)
        )

    __hash__ = None

    def __repr__(self):
        return f"OperatorMatrix(dim={self.dim}, nnz={self.nnz})"


def _single_mode_lowering(d: int) -> sp.csr_matrix:
    return sp.diags(np.sqrt(np.arange(1, d, dtype=float)), offsets=1, shape=(d, d), format="csr")


def _embed(layout: ModeLayout, k: int, local: sp.spmatrix) -> OperatorMatrix:
    left = int(np.prod(layout.trunc[:k]))
    right = int(np.prod(layout.trunc[k + 1:]))
    op = sp.kron(sp.identity(left, format="csr"), sp.kron(local, sp.identity(right, format="csr")))
    return OperatorMatrix(op)


def annihilation(layout: ModeLayout, mode: int) -> OperatorMatrix:
    """Lowering operator ``a_k`` (or ``b_j`` for pump modes), ``mode`` 1-based."""
    k = layout.check_mode(mode)
    return _embed(layout, k, _single_mode_lowering(layout.trunc[k]))


def creation(layout: ModeLayout, mode: int) -> OperatorMatrix:
    """Raising operator; maps the top occupation ``d_k - 1`` to zero."""
    k = layout.check_mode(mode)
    return _embed(layout, k, _single_mode_lowering(layout.trunc[k]).T)


def number(layout: ModeLayout, mode: int) -> OperatorMatrix:
    k = layout.check_mode(mode)
    occ = layout.occupations[:, k].astype(float)
    return OperatorMatrix(sp.diags(occ, format="csr"))


def identity(layout_or_dim) -> OperatorMatrix:
    dim = layout_or_dim.dim if isinstance(layout_or_dim, ModeLayout) else int(layout_or_dim)
    return OperatorMatrix(sp.identity(dim, format="csr"))


def commutator(A: OperatorMatrix, B: OperatorMatrix) -> OperatorMatrix:
    if A.dim != B.dim:
        raise ValueError(f"dimension mismatch: {A.dim} vs {B.dim}")
    return OperatorMatrix(A.csr @ B.csr - B.csr @ A.csr)


def interior_projector(layout: ModeLayout, margin: int = 1) -> OperatorMatrix:
    """Diagonal projector onto states with every occupation ``<= d_k - 1 - margin``."""
    if margin < 1:
        raise ValueError(f"margin must be >= 1, got {margin}")
    if margin >= min(layout.trunc):
        raise ValueError(f"margin {margin} leaves an empty interior for cutoffs {list(layout.trunc)}")
    limits = np.asarray(layout.trunc) - 1 - margin
    inside = np.all(layout.occupations <= limits, axis=1)
    return OperatorMatrix(sp.diags(inside.astype(float), format="csr"))


def edge_mask(layout: ModeLayout) -> np.ndarray:
    """Boolean mask of basis states with some occupation on its top shell."""
    return np.any(layout.occupations == np.asarray(layout.trunc) - 1, axis=1)


@dataclass(frozen=True)
class QuantumState:
    """Pure vector or density matrix on a truncated space."""

    kind: str
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kind not in ("pure", "mixed"):
            raise ValueError(f"kind must be 'pure' or 'mixed', got {self.kind!r}")
        arr = np.asarray(self.data, dtype=np.complex128)
        if self.kind == "pure" and arr.ndim != 1:
            raise ValueError("pure state needs a 1-d vector")
        if self.kind == "mixed" and (arr.ndim != 2 or arr.shape[0] != arr.shape[1]):
            raise ValueError("mixed state needs a square matrix")
        object.__setattr__(self, "data", arr)

    @classmethod
    def pure(cls, psi) -> "QuantumState":
        return cls("pure", psi)

    @classmethod
    def mixed(cls, rho) -> "QuantumState":
        return cls("mixed", rho)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def density(self) -> "QuantumState":
        if self.kind == "mixed":
            return self
        return QuantumState.mixed(np.outer(self.data, self.data.conj()))

    def norm(self) -> float:
        if self.kind == "pure":
            return float(np.linalg.norm(self.data))
        return float(np.trace(self.data).real)

    def validate(self, tol: float = 1e-10, tol_pos: float = 1e-8) -> None:
        """Raise ``ValueError`` if the state invariants fail."""
        if self.kind == "pure":
            nrm = self.norm()
            if abs(nrm - 1.0) > tol:
                raise ValueError(f"pure state norm {nrm!r} not within {tol} of 1")
            return
        rho = self.data
        herm = np.max(np.abs(rho - rho.conj().T)) if rho.size else 0.0
        if herm > tol:
            raise ValueError(f"density matrix not Hermitian (max deviation {herm:.3e})")
        tr = np.trace(rho)
        if abs(tr - 1.0) > tol:
            raise ValueError(f"density matrix trace {tr!r} not within {tol} of 1")
        lo = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0]
        if lo < -tol_pos:
            raise ValueError(f"density matrix has negative eigenvalue {lo:.3e}")


def basis_state(layout: ModeLayout, occupations: Sequence[int]) -> QuantumState:
    idx = layout.encode(occupations)
    psi = np.zeros(layout.dim, dtype=np.complex128)
    psi[idx] = 1.0
    return QuantumState.pure(psi)


def dump_operator(op: OperatorMatrix) -> str:
    """Text dump: header ``dim D`` then ``row col re im`` lines sorted by (row, col)."""
    buf = io.StringIO()
    buf.write(f"dim {op.dim}\n")
    for r, c, v in op.entries():
        buf.write(f"{r} {c} {v.real!r} {v.imag!r}\n")
    return buf.getvalue()


def load_operator(text: str) -> OperatorMatrix:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("dim "):
        raise ValueError("operator dump must start with 'dim D'")
    dim = int(lines[0].split()[1])
    rows, cols, vals = [], [], []
    for ln in lines[1:]:
        r, c, re, im = ln.split()
        rows.append(int(r))
        cols.append(int(c))
        vals.append(complex(float(re), float(im)))
    return OperatorMatrix(sp.csr_matrix((vals, (rows, cols)), shape=(dim, dim)))
