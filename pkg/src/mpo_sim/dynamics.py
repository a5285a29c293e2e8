"""Reduced open-system dynamics: Lindblad master equation with fixed-step RK4.

The generator acts on density matrices as

    L[rho] = G rho + rho G^† + sum_g J_g rho J_g^†,

with ``G = -i H - 1/2 sum_k R_k^† R_k`` (the drift ``K``) and the jump operators
``J_g`` obtained by merging channels that share a ladder operator
(``sum_l |alpha_l|^2 A rho A^† = (c A) rho (c A)^†``).  A coherent input
``f_k`` on channel ``k`` is the Weyl shift ``R_k -> R_k + f_k``,
``H -> H + H_corr``; expanded, the shift cancels in the jump term and leaves
the Hermitian drive ``i (conj(f_k) R_k - f_k R_k^†)`` in ``G``.

Operators are applied as bands of constant index offset (ladder operators
have a single band), which avoids sparse-times-dense products and
transposes on the hot path.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._kernels import HAVE_NUMBA, axpy, lindblad_bands, lindblad_bands_herm
from .fock import ModeLayout, OperatorMatrix, QuantumState, edge_mask
from .model import Channel, MultiPhotonModel, shift_channels

log = logging.getLogger(__name__)

MAX_DENSITY_DIM = 4096
DENSE_EIG_LIMIT = 2048
_MAX_BANDS = 32


class NumericalGuardError(RuntimeError):
    """A numerical guard (truncation leak, trace drift, step size) tripped."""


def _bands(m: sp.csr_matrix) -> dict[int, np.ndarray]:
    """Split a square sparse matrix into constant-offset bands ``w_o[r] = m[r, r - o]``."""
    coo = m.tocoo()
    D = m.shape[0]
    offsets = coo.row - coo.col
    out = {}
    for o in np.unique(offsets):
        sel = offsets == o
        w = np.zeros(D, dtype=np.complex128)
        w[coo.row[sel]] = coo.data[sel]
        out[int(o)] = w
    return out


def _shift_rows(x: np.ndarray, w: np.ndarray, o: int, out: np.ndarray, tmp: np.ndarray) -> None:
    """``out += diag-band(w, o) @ x``."""
    D = x.shape[0]
    if o >= 0:
        s = D - o
        np.multiply(x[:s], w[o:, None], out=tmp[:s])
        out[o:] += tmp[:s]
    else:
        s = D + o
        np.multiply(x[-o:], w[:s, None], out=tmp[:s])
        out[:s] += tmp[:s]


def _sandwich(x: np.ndarray, W: np.ndarray | None, w: np.ndarray, o: int, out: np.ndarray, tmp: np.ndarray) -> None:
    """``out += J x J^†`` for a single-band ``J`` with weights ``w`` and offset ``o``."""
    D = x.shape[0]
    if o >= 0:
        dst, src = slice(o, D), slice(0, D - o)
    else:
        dst, src = slice(0, D + o), slice(-o, D)
    t = tmp[dst, dst]
    if W is not None:
        np.multiply(x[src, src], W[dst, dst], out=t)
    else:
        np.multiply(x[src, src], w[dst, None], out=t)
        t *= w.conj()[None, dst]
    out[dst, dst] += t


@dataclass
class _Jump:
    op: sp.csr_matrix
    offset: int | None = None
    w: np.ndarray | None = None
    W: np.ndarray | None = None


class Liouvillian:
    """Lindblad generator built from a Hamiltonian and flat channel operators.

    Parameters
    ----------
    hamiltonian : OperatorMatrix
        Hermitian part (time-independent).
    channels : sequence of Channel or OperatorMatrix
        Channel operators ``R_k``.  :class:`~mpo_sim.model.Channel` entries
        sharing a base ladder operator are merged for the master equation.
    inputs : callable, optional
        ``t -> f`` with the coherent input amplitude per channel.
    layout : ModeLayout, optional
        Enables the truncation-edge monitor.
    """

    def __init__(
        self,
        hamiltonian: OperatorMatrix,
        channels: Sequence[Channel | OperatorMatrix],
        inputs: Callable[[float], np.ndarray] | None = None,
        layout: ModeLayout | None = None,
    ):
        self.hamiltonian = hamiltonian
        self.dim = hamiltonian.dim
        self.layout = layout
        self.inputs = inputs
        amps, bases = [], []
        for c in channels:
            if isinstance(c, Channel):
                amps.append(complex(c.amplitude))
                bases.append(c.base)
            else:
                amps.append(1.0 + 0j)
                bases.append(c)
        for b in bases:
            if b.dim != self.dim:
                raise ValueError(f"channel dimension {b.dim} does not match Hamiltonian {self.dim}")
        self.amplitudes = np.asarray(amps, dtype=np.complex128)
        self.bases = tuple(bases)
        self.ops = tuple(a * b for a, b in zip(self.amplitudes, self.bases))
        self._build()

    @classmethod
    def from_model(cls, model: MultiPhotonModel, frame: str = "lab") -> "Liouvillian":
        L = cls(model.frame_hamiltonian(frame), model.channels.channels, model.inputs(frame), model.layout)
        L.frame = frame
        return L

    frame = "lab"

    @property
    def n_channels(self) -> int:
        return len(self.ops)

    def _build(self):
        D = self.dim
        H = self.hamiltonian.csr
        R = sp.csr_matrix((D, D), dtype=np.complex128)
        for op in self.ops:
            R = R + op.csr.conj().T @ op.csr
        self.R = OperatorMatrix(R)
        self.K0 = (-1j * H - 0.5 * R).tocsr()
        # merge channels sharing a base operator
        groups: dict[int, list[int]] = {}
        for k, b in enumerate(self.bases):
            if self.amplitudes[k] != 0:
                groups.setdefault(id(b), []).append(k)
        jumps = []
        for ks in groups.values():
            c = math.sqrt(sum(abs(self.amplitudes[k]) ** 2 for k in ks))
            jumps.append(_Jump((c * self.bases[ks[0]].csr).tocsr()))
        self._jumps = jumps
        # banded fast path
        k_bands = _bands(self.K0)
        n_bands = len(k_bands)
        budget = 256 * 2**20
        for j in jumps:
            b = _bands(j.op)
            n_bands += len(b)
            if len(b) == 1:
                (j.offset, j.w), = b.items()
        self._d = k_bands.pop(0, np.zeros(D, dtype=np.complex128))
        self._k_off = k_bands
        banded = n_bands <= _MAX_BANDS and all(j.offset is not None for j in jumps)
        if banded and HAVE_NUMBA:
            self.backend = "numba"
            self._joffs = np.array([j.offset for j in jumps], dtype=np.int64)
            self._jw = np.array([j.w for j in jumps], dtype=np.complex128).reshape(len(jumps), D)
        elif banded:
            self.backend = "numpy"
            self._E = self._d[:, None] + self._d.conj()[None, :]
            if D * D * 16 * len(jumps) <= budget:
                for j in jumps:
                    j.W = np.outer(j.w, j.w.conj())
        else:
            self.backend = "csr"

    # -- time-dependent pieces -------------------------------------------------

    def input_at(self, t: float) -> np.ndarray | None:
        if self.inputs is None:
            return None
        f = np.asarray(self.inputs(t), dtype=np.complex128)
        if f.shape != (self.n_channels,):
            raise ValueError(f"inputs must return {self.n_channels} amplitudes, got shape {f.shape}")
        return f if np.any(f) else None

    def drive_hamiltonian(self, t: float) -> sp.csr_matrix | None:
        """Hermitian drive ``i sum_k (conj(f_k) R_k - f_k R_k^†)`` equivalent to the Weyl shift."""
        f = self.input_at(t)
        if f is None:
            return None
        Hd = sp.csr_matrix((self.dim, self.dim), dtype=np.complex128)
        for k in np.flatnonzero(f):
            op = self.ops[k].csr
            Hd = Hd + 1j * (np.conj(f[k]) * op - f[k] * op.conj().T)
        return Hd.tocsr()

    def G(self, t: float) -> sp.csr_matrix:
        Hd = self.drive_hamiltonian(t)
        return self.K0 if Hd is None else (self.K0 - 1j * Hd).tocsr()

    def shifted(self, t: float) -> tuple[OperatorMatrix, tuple[OperatorMatrix, ...]]:
        """Explicit drive-shifted form: ``(H + H_corr, (R_k + f_k))``."""
        f = self.input_at(t)
        if f is None:
            return self.hamiltonian, self.ops
        ops, corr = shift_channels(self.ops, f)
        return self.hamiltonian + corr, ops

    def K(self, t: float) -> sp.csr_matrix:
        """Drift ``-i H(t) - 1/2 sum L_k^† L_k`` of the drive-shifted channels."""
        f = self.input_at(t)
        if f is None:
            return self.K0
        K = self.K0.copy()
        for k in np.flatnonzero(f):
            op = self.ops[k].csr
            K = K - f[k] * op.conj().T - 0.5 * abs(f[k]) ** 2 * sp.identity(self.dim, format="csr")
        return K.tocsr()

    # -- application -------------------------------------------------------------

    def apply(self, rho: np.ndarray, t: float = 0.0, hermitian: bool = False) -> np.ndarray:
        """``L[rho]``; ``hermitian=True`` promises a Hermitian ``rho`` (needed by the numpy band path)."""
        if rho.shape != (self.dim, self.dim):
            raise ValueError(f"density matrix shape {rho.shape} does not match dimension {self.dim}")
        if self.backend == "numba":
            return self._apply_kernel(np.ascontiguousarray(rho, dtype=np.complex128), t, hermitian)
        if self.backend == "numpy" and hermitian:
            return self._apply_banded(rho, t)
        return self._apply_csr(rho, t)

    def _g_bands(self, t):
        off = dict(self._k_off)
        Hd = self.drive_hamiltonian(t)
        if Hd is not None:
            for o, w in _bands(Hd).items():
                off[o] = off.get(o, 0) - 1j * w
        d0 = off.pop(0, None)
        return (self._d if d0 is None else self._d + d0), off

    def _apply_kernel(self, rho, t, hermitian=False):
        d, off = self._g_bands(t)
        goffs = np.array(list(off), dtype=np.int64)
        gw = np.array(list(off.values()), dtype=np.complex128).reshape(len(off), self.dim)
        out = np.empty_like(rho)
        (lindblad_bands_herm if hermitian else lindblad_bands)(rho, d, goffs, gw, self._joffs, self._jw, out)
        return out

    def _apply_csr(self, rho, t):
        G = self.G(t)
        rho_h = rho.conj().T
        out = G @ rho + (G @ rho_h).conj().T
        for j in self._jumps:
            out += j.op @ (j.op @ rho_h).conj().T
        return out

    def _apply_banded(self, rho, t):
        d, off = self._g_bands(t)
        if d is self._d:
            out = np.multiply(self._E, rho)
        else:
            out = (d[:, None] + d.conj()[None, :]) * rho
        tmp = np.empty_like(rho)
        if off:
            y = np.zeros_like(rho)
            for o, w in off.items():
                _shift_rows(rho, w, o, y, tmp)
            out += y
            out += y.conj().T
        for j in self._jumps:
            _sandwich(rho, j.W, j.w, j.offset, out, tmp)
        return out


def liouvillian_apply(L: Liouvillian, rho: QuantumState | np.ndarray, t: float = 0.0) -> np.ndarray:
    data = rho.data if isinstance(rho, QuantumState) else np.asarray(rho)
    if isinstance(rho, QuantumState) and rho.kind != "mixed":
        raise ValueError("liouvillian_apply needs a density matrix")
    return L.apply(np.asarray(data, dtype=np.complex128), t)


def expectation(state: QuantumState | np.ndarray, X: OperatorMatrix) -> complex:
    if isinstance(state, QuantumState):
        kind, data = state.kind, state.data
    else:
        data = np.asarray(state)
        kind = "pure" if data.ndim == 1 else "mixed"
    if data.shape[0] != X.dim:
        raise ValueError(f"state dimension {data.shape[0]} does not match operator {X.dim}")
    if kind == "pure":
        return complex(np.vdot(data, X.csr @ data))
    # Tr(X rho) = sum_ij X_ij rho_ji
    coo = X.csr.tocoo()
    return complex(np.sum(coo.data * data[coo.col, coo.row]))


def min_eigenvalue(rho: np.ndarray, dense_limit: int = DENSE_EIG_LIMIT) -> float:
    h = 0.5 * (rho + rho.conj().T)
    if h.shape[0] <= dense_limit:
        return float(sla.eigvalsh(h, subset_by_index=[0, 0], check_finite=False)[0])
    try:
        vals = spla.eigsh(h, k=1, which="SA", tol=1e-10, maxiter=20 * h.shape[0], return_eigenvectors=False)
        return float(vals[0])
    except spla.ArpackNoConvergence as exc:
        if len(exc.eigenvalues):
            return float(np.min(exc.eigenvalues))
        raise


@dataclass
class PropagationResult:
    times: np.ndarray
    states: list[QuantumState]
    trace_err: np.ndarray
    pos_err: np.ndarray
    edge_leak: np.ndarray
    observables: dict[str, np.ndarray] = field(default_factory=dict)
    dt: float = 0.0
    halving_diff: float | None = None

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.states) == len(self.trace_err) == len(self.pos_err) == len(self.edge_leak) == n):
            raise ValueError("propagation arrays must be congruent")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("time grid must be strictly increasing")

    def csv(self) -> str:
        names = list(self.observables)
        lines = [", ".join(["t", "trace_err", "pos_err", "edge_leak", *names])]
        for i, t in enumerate(self.times):
            row = [repr(float(t)), repr(float(self.trace_err[i])), repr(float(self.pos_err[i])), repr(float(self.edge_leak[i]))]
            row += [repr(float(self.observables[k][i].real)) for k in names]
            lines.append(", ".join(row))
        return "\n".join(lines) + "\n"


def _grid_steps(t_grid: Sequence[float], dt: float) -> list[int]:
    steps = []
    for t in t_grid:
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"grid time {t} is not a multiple of dt={dt}")
        steps.append(k)
    if any(b <= a for a, b in zip(steps, steps[1:])) or steps[0] < 0:
        raise ValueError("time grid must be strictly increasing and start at t >= 0")
    return steps


def _axpy(x: np.ndarray, s: complex, y: np.ndarray, out: np.ndarray) -> np.ndarray:
    if axpy is not None:
        axpy(x, complex(s), y, out)
    else:
        np.multiply(y, s, out=out)
        out += x
    return out


def _rk4_step(L: Liouvillian, rho: np.ndarray, t: float, dt: float) -> np.ndarray:
    acc = np.empty_like(rho)
    y = np.empty_like(rho)
    k = L.apply(rho, t, hermitian=True)
    _axpy(rho, dt / 6.0, k, acc)
    _axpy(rho, 0.5 * dt, k, y)
    k = L.apply(y, t + 0.5 * dt, hermitian=True)
    _axpy(acc, dt / 3.0, k, acc)
    _axpy(rho, 0.5 * dt, k, y)
    k = L.apply(y, t + 0.5 * dt, hermitian=True)
    _axpy(acc, dt / 3.0, k, acc)
    _axpy(rho, dt, k, y)
    k = L.apply(y, t + dt, hermitian=True)
    return _axpy(acc, dt / 6.0, k, acc)


def propagate(
    L: Liouvillian,
    rho0: QuantumState | np.ndarray,
    t_grid: Sequence[float],
    dt: float,
    method: str = "rk4",
    observables: Mapping[str, OperatorMatrix] | None = None,
    leak_tol: float = 1e-6,
    trace_tol: float = 1e-6,
    check_positivity: bool = True,
    check_halving: bool = False,
    keep_states: bool = True,
) -> PropagationResult:
    """Integrate ``d rho/dt = L[rho]`` and snapshot on ``t_grid`` (multiples of ``dt``).

    Raises :class:`NumericalGuardError` when the edge population exceeds
    ``leak_tol`` or the trace drifts by more than ``trace_tol``.
    """
    if method != "rk4":
        raise ValueError(f"unsupported method {method!r}; only 'rk4' is implemented")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if L.dim > MAX_DENSITY_DIM:
        raise ValueError(f"density-matrix propagation is capped at D={MAX_DENSITY_DIM}, got {L.dim}")
    state = rho0.density() if isinstance(rho0, QuantumState) else QuantumState.mixed(rho0)
    rho = np.array(state.data, dtype=np.complex128)
    steps = _grid_steps(t_grid, dt)
    observables = dict(observables or {})
    edge = edge_mask(L.layout) if L.layout is not None else None

    times, states, tr_err, pos_err, leak = [], [], [], [], []
    obs = {k: [] for k in observables}

    def snapshot(k):
        t = k * dt
        times.append(t)
        d = np.diagonal(rho)
        tr_err.append(abs(np.sum(d) - 1.0))
        leak.append(float(np.sum(d.real[edge])) if edge is not None else 0.0)
        pos_err.append(max(0.0, -min_eigenvalue(rho)) if check_positivity else float("nan"))
        for name, X in observables.items():
            obs[name].append(expectation(rho, X))
        states.append(QuantumState.mixed(rho.copy()) if keep_states else None)

    k = 0
    if steps[0] == 0:
        snapshot(0)
    for target in steps:
        while k < target:
            rho = _rk4_step(L, rho, k * dt, dt)
            k += 1
            d = np.diagonal(rho)
            drift = abs(np.sum(d) - 1.0)
            if drift > trace_tol:
                raise NumericalGuardError(f"trace drift {drift:.3e} > {trace_tol:.1e} at t={k * dt:.6g}; reduce dt")
            if edge is not None:
                e = float(np.sum(d.real[edge]))
                if e > leak_tol:
                    raise NumericalGuardError(
                        f"truncation-edge population {e:.3e} > {leak_tol:.1e} at t={k * dt:.6g}; raise the cutoffs"
                    )
        if target > 0 or steps[0] != 0:
            if not times or times[-1] != target * dt:
                snapshot(target)

    result = PropagationResult(
        np.asarray(times),
        states,
        np.asarray(tr_err),
        np.asarray(pos_err),
        np.asarray(leak),
        {k: np.asarray(v) for k, v in obs.items()},
        dt,
    )
    if check_halving:
        half = propagate(
            L, rho0, t_grid, dt / 2, method, observables, leak_tol, trace_tol,
            check_positivity=False, check_halving=False, keep_states=keep_states,
        )
        diffs = [np.max(np.abs(result.observables[k] - half.observables[k])) for k in observables]
        if keep_states:
            diffs += [np.max(np.abs(a.data - b.data)) for a, b in zip(result.states, half.states)]
        result.halving_diff = float(max(diffs)) if diffs else 0.0
    return result
