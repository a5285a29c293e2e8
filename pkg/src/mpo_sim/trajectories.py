"""Quantum-jump (photocounting) and diffusive (homodyne) unravelings.

Pure-state trajectories are stepped in batches: the state block ``Psi`` has
one column per trajectory.  Every channel that is not homodyne-monitored is
unraveled by jumps; jumps on unmonitored channels are applied but left out
of the record, which marginalizes them.  A density-matrix conditional path
(one trajectory at a time, monitored channels only) is available for small
dimensions.

Each trajectory owns a Philox stream keyed by ``(seed, index)``; row ``s`` of
its uniform table drives step ``s`` (jump decision, channel choice, one
Gaussian per homodyne channel), so results do not depend on scheduling.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .dynamics import NumericalGuardError, expectation
from .fock import ModeLayout, OperatorMatrix, QuantumState, edge_mask, identity, make_layout
from .model import Channel, MultiPhotonModel, shift_channels
from .rng import normal_from_uniform, step_uniforms

log = logging.getLogger(__name__)

JUMP_GUARD = 0.1
MODES = ("jump", "homodyne")


def max_threads() -> int:
    env = os.environ.get("MPO_SIM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"MPO_SIM_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


class UnravelingSystem:
    """Hamiltonian, channel operators and the detector assignment of a trajectory run.

    Channels are numbered from 1.  ``counting`` channels have their jumps
    recorded, ``homodyne`` channels are unraveled diffusively against a local
    oscillator of phase ``lo_phase(t)[i]``; all other channels jump unrecorded.
    """

    def __init__(
        self,
        hamiltonian: OperatorMatrix,
        channels: Sequence[Channel | OperatorMatrix],
        counting: Sequence[int] = (),
        homodyne: Sequence[int] = (),
        inputs: Callable[[float], np.ndarray] | None = None,
        lo_phase: Callable[[float], np.ndarray] | None = None,
        layout: ModeLayout | None = None,
    ):
        self.hamiltonian = hamiltonian
        self.dim = hamiltonian.dim
        amps, bases = [], []
        for c in channels:
            if isinstance(c, Channel):
                amps.append(complex(c.amplitude))
                bases.append(c.base)
            else:
                amps.append(1.0 + 0j)
                bases.append(c)
        self.amplitudes = np.asarray(amps, dtype=np.complex128)
        self.bases = tuple(bases)
        n_ch = len(bases)
        self.counting = tuple(int(k) for k in counting)
        self.homodyne = tuple(int(k) for k in homodyne)
        for k in self.counting + self.homodyne:
            if not 1 <= k <= n_ch:
                raise ValueError(f"channel {k} out of range 1..{n_ch}")
        if set(self.counting) & set(self.homodyne):
            raise ValueError(f"channels {sorted(set(self.counting) & set(self.homodyne))} assigned to both detectors")
        if len(set(self.counting)) != len(self.counting) or len(set(self.homodyne)) != len(self.homodyne):
            raise ValueError("duplicate channel in detector assignment")
        if self.homodyne and lo_phase is None:
            lo_phase = lambda t, _z=np.zeros(len(self.homodyne)): _z
        self.inputs = inputs
        self.lo_phase = lo_phase
        self.layout = layout
        # distinct base operators, shared across channels
        gid: dict[int, int] = {}
        self.group_ops: list[sp.csr_matrix] = []
        self.group_of = np.empty(n_ch, dtype=np.int64)
        for k, b in enumerate(bases):
            if id(b) not in gid:
                gid[id(b)] = len(self.group_ops)
                self.group_ops.append(b.csr)
            self.group_of[k] = gid[id(b)]
        R = sp.csr_matrix((self.dim, self.dim), dtype=np.complex128)
        for a, b in zip(self.amplitudes, bases):
            if a != 0:
                R = R + abs(a) ** 2 * (b.csr.conj().T @ b.csr)
        self.K0 = (-1j * hamiltonian.csr - 0.5 * R).tocsr()
        self.jump_channels = np.array([k for k in range(n_ch) if k + 1 not in self.homodyne], dtype=np.int64)
        self._counting0 = {k - 1 for k in self.counting}
        self._edge = edge_mask(layout) if layout is not None else None
        # ||A psi||^2 = sum_i diag(A^† A)_i |psi_i|^2 when A^† A is diagonal (ladder operators)
        diags = []
        for A in self.group_ops:
            AA = (A.conj().T @ A).tocsr()
            d = AA.diagonal()
            if abs(AA - sp.diags(d)).max() != 0:
                diags = None
                break
            diags.append(d.real)
        self.diag_norms = np.array(diags).reshape(len(self.group_ops), self.dim) if diags is not None else None
        self._hom_groups = frozenset(int(self.group_of[k - 1]) for k in self.homodyne)
        self._K_cache: tuple[bytes, sp.csr_matrix] | None = None

    @classmethod
    def from_model(
        cls,
        model: MultiPhotonModel,
        mode: str = "jump",
        frame: str = "lab",
        counting: Sequence[int] | None = None,
        homodyne: Sequence[int] | None = None,
    ) -> "UnravelingSystem":
        """Default assignment: counting on ``1..n+m``; homodyne on ``n+m+1..2n+m`` in homodyne mode."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        n, m = model.params.n, model.params.m
        if counting is None:
            counting = tuple(range(1, n + m + 1)) if mode == "jump" else ()
        if homodyne is None:
            homodyne = tuple(range(n + m + 1, 2 * n + m + 1)) if mode == "homodyne" else ()
        phases = model.lo_phases(frame)
        default_hom = tuple(range(n + m + 1, 2 * n + m + 1))
        if tuple(homodyne) != default_hom and homodyne:
            raise ValueError(f"homodyne channels must be the block {default_hom} for a model run")
        return cls(
            model.frame_hamiltonian(frame),
            model.channels.channels,
            counting,
            homodyne,
            model.inputs(frame),
            phases if homodyne else None,
            model.layout,
        )

    @property
    def n_channels(self) -> int:
        return len(self.bases)

    @property
    def monitored(self) -> tuple[int, ...]:
        return tuple(sorted(self.counting + self.homodyne))

    def input_at(self, t: float) -> np.ndarray:
        if self.inputs is None:
            return np.zeros(self.n_channels, dtype=np.complex128)
        return np.asarray(self.inputs(t), dtype=np.complex128)

    def op(self, k: int) -> sp.csr_matrix:
        """Unshifted channel operator ``R_k`` (0-based)."""
        return (self.amplitudes[k] * self.group_ops[self.group_of[k]]).tocsr()

    def overlap_groups(self, f: np.ndarray) -> frozenset[int]:
        """Base operators whose overlaps ``<psi|A psi>`` enter the step (driven or homodyne channels)."""
        driven = {int(self.group_of[k]) for k in np.flatnonzero(f)}
        return self._hom_groups | driven if driven else self._hom_groups

    def K(self, t: float) -> sp.csr_matrix:
        """Drift of the drive-shifted channels ``R_k + f_k``."""
        f = self.input_at(t)
        nz = np.flatnonzero(f)
        if nz.size == 0:
            return self.K0
        key = f.tobytes()
        cached = self._K_cache  # single read: batches share the cache across threads
        if cached is not None and cached[0] == key:
            return cached[1]
        K = self._K_uncached(f, nz)
        self._K_cache = (key, K)
        return K

    def _K_uncached(self, f, nz):
        K = self.K0
        shift = 0.0
        for k in nz:
            K = K - f[k] * self.op(k).conj().T
            shift += abs(f[k]) ** 2
        return (K - 0.5 * shift * sp.identity(self.dim, format="csr")).tocsr()

    def shifted(self, t: float) -> tuple[sp.csr_matrix, list[sp.csr_matrix]]:
        ops = [OperatorMatrix(self.op(k)) for k in range(self.n_channels)]
        shifted, corr = shift_channels(ops, self.input_at(t))
        return (self.hamiltonian + corr).csr, [o.csr for o in shifted]


def pinned_rate_system(rate: float) -> UnravelingSystem:
    """Reference model with a constant counting rate: one channel ``sqrt(rate) * 1``, no Hamiltonian.

    Jumps leave the state unchanged, so counts form a Poisson process of
    intensity ``rate``.  Layout: one subharmonic and one pump mode, two levels each.
    """
    if rate <= 0:
        raise ValueError(f"rate must be positive, got {rate}")
    layout = make_layout(1, 1, (2, 2))
    H = OperatorMatrix(sp.csr_matrix((layout.dim, layout.dim), dtype=np.complex128))
    return UnravelingSystem(H, [math.sqrt(rate) * identity(layout)], counting=(1,), layout=layout)


@dataclass
class MeasurementRecord:
    """Detector output of one trajectory: jump times per counting channel, ``(t, dY)`` per homodyne channel."""

    counting: dict[int, list[float]]
    homodyne: dict[int, list[tuple[float, float]]]
    seed: int
    dt: float
    traj: int = 0
    t_final: float = 0.0

    def __post_init__(self):
        for ch, times in self.counting.items():
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError(f"jump times on channel {ch} are not strictly increasing")
            if times and (times[0] < 0 or times[-1] > self.t_final + 1e-12):
                raise ValueError(f"jump time on channel {ch} outside [0, {self.t_final}]")

    @property
    def monitored(self) -> tuple[int, ...]:
        return tuple(sorted(list(self.counting) + list(self.homodyne)))

    def to_json(self) -> str:
        obj = {
            "traj": self.traj,
            "seed": self.seed,
            "dt": self.dt,
            "t_final": self.t_final,
            "jumps": {str(k): v for k, v in sorted(self.counting.items())},
            "homodyne": {str(k): [list(p) for p in v] for k, v in sorted(self.homodyne.items())},
        }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "MeasurementRecord":
        obj = json.loads(line)
        return cls(
            {int(k): list(v) for k, v in obj["jumps"].items()},
            {int(k): [tuple(p) for p in v] for k, v in obj["homodyne"].items()},
            obj["seed"],
            obj["dt"],
            obj["traj"],
            obj["t_final"],
        )


def write_records(records: Sequence[MeasurementRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list[MeasurementRecord]:
    with open(path, encoding="utf-8") as fh:
        return [MeasurementRecord.from_json(line) for line in fh if line.strip()]


# -- batched pure-state stepping -------------------------------------------------


@dataclass
class _BatchResult:
    trajs: list[int]
    psi: np.ndarray
    records: list[MeasurementRecord]
    obs: np.ndarray  # (n_obs, B, n_grid)
    counts: np.ndarray  # (n_counting, B, n_grid - 1)
    signal: np.ndarray  # (n_homodyne, B, n_grid - 1), summed dY per interval


def _n_steps(t_final: float, dt: float) -> int:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if t_final < 0:
        raise ValueError(f"t_final must be >= 0, got {t_final}")
    n = int(round(t_final / dt))
    if abs(n * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError(f"t_final={t_final} is not a multiple of dt={dt}")
    return n


def _grid_steps(t_grid: Sequence[float], dt: float, n_steps: int) -> np.ndarray:
    steps = []
    for t in t_grid:
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"grid time {t} is not a multiple of dt={dt}")
        steps.append(k)
    steps = np.asarray(steps, dtype=np.int64)
    if steps.size == 0 or np.any(np.diff(steps) <= 0) or steps[0] < 0 or steps[-1] > n_steps:
        raise ValueError("time grid must be strictly increasing inside [0, t_final]")
    return steps


def _initial_pure(psi0, dim: int) -> np.ndarray:
    if isinstance(psi0, QuantumState):
        if psi0.kind != "pure":
            raise ValueError("trajectories need a pure initial state")
        psi0 = psi0.data
    psi = np.asarray(psi0, dtype=np.complex128)
    if psi.shape != (dim,):
        raise ValueError(f"initial state has shape {psi.shape}, expected ({dim},)")
    nrm = np.linalg.norm(psi)
    if abs(nrm - 1.0) > 1e-10:
        raise ValueError(f"initial state must be normalized, norm={nrm!r}")
    return psi


def _col_expect(Psi: np.ndarray, X: sp.csr_matrix) -> np.ndarray:
    return np.einsum("ij,ij->j", Psi.conj(), X @ Psi)


def _rk4(sys: UnravelingSystem, Psi: np.ndarray, t: float, dt: float) -> np.ndarray:
    K1 = sys.K(t)
    Kh = sys.K(t + 0.5 * dt)
    K2 = sys.K(t + dt)
    k1 = K1 @ Psi
    k2 = Kh @ (Psi + 0.5 * dt * k1)
    k3 = Kh @ (Psi + 0.5 * dt * k2)
    k4 = K2 @ (Psi + dt * k3)
    return Psi + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_leak(sys: UnravelingSystem, P: np.ndarray, leak_tol: float, t: float) -> None:
    """Batch-mean population on the truncation-edge shells."""
    if sys._edge is None:
        return
    leak = float(np.mean(np.sum(P[sys._edge], axis=0)))
    if leak > leak_tol:
        raise NumericalGuardError(f"truncation-edge population {leak:.3e} > {leak_tol:.1e} at t={t:.6g}; raise the cutoffs")


def _run_batch(
    sys: UnravelingSystem,
    psi0: np.ndarray,
    trajs: Sequence[int],
    seed: int,
    dt: float,
    n_steps: int,
    grid: np.ndarray,
    obs_ops: Sequence[sp.csr_matrix],
    stride: int,
    leak_tol: float,
) -> _BatchResult:
    B = len(trajs)
    D = sys.dim
    nh = len(sys.homodyne)
    hom0 = [k - 1 for k in sys.homodyne]
    cnt_pos = {k - 1: i for i, k in enumerate(sys.counting)}
    U = np.stack([step_uniforms(seed, i, n_steps, 2 + nh) for i in trajs]) if n_steps else np.zeros((B, 0, 2 + nh))
    Psi = np.repeat(psi0[:, None], B, axis=1)
    slot = {int(s): i for i, s in enumerate(grid)}
    n_grid = len(grid)
    obs = np.zeros((len(obs_ops), B, n_grid))
    counts = np.zeros((len(sys.counting), B, max(n_grid - 1, 0)))
    signal = np.zeros((nh, B, max(n_grid - 1, 0)))
    jumps = [{k: [] for k in sys.counting} for _ in range(B)]
    hom_rec = [{k: [] for k in sys.homodyne} for _ in range(B)]
    hom_acc = np.zeros((nh, B))
    jch = sys.jump_channels
    amp_j = sys.amplitudes[jch]
    grp_j = sys.group_of[jch]

    def snapshot(s):
        i = slot[s]
        for o, X in enumerate(obs_ops):
            obs[o, :, i] = _col_expect(Psi, X).real

    interval = 0  # index of the grid interval (grid[interval], grid[interval+1]]
    for s in range(n_steps):
        if s in slot:
            snapshot(s)
            interval = slot[s]
        t = s * dt
        f = sys.input_at(t)
        Pv = Psi.view(np.float64)
        P = Pv[:, 0::2] ** 2 + Pv[:, 1::2] ** 2  # |psi_i|^2 per column
        _check_leak(sys, P, leak_tol, t)
        need = sys.overlap_groups(f)
        Y = {g: sys.group_ops[g] @ Psi for g in need}
        nn = np.empty((len(sys.group_ops), B))
        if sys.diag_norms is not None:
            nn[:] = sys.diag_norms @ P
        else:
            for g, A in enumerate(sys.group_ops):
                y = Y[g] if g in Y else A @ Psi
                yv = y.view(np.float64)
                nn[g] = (yv[:, 0::2] ** 2 + yv[:, 1::2] ** 2).sum(axis=0)
        ov = np.zeros((len(sys.group_ops), B), dtype=np.complex128)
        if Y:
            Pc = Psi.conj()
            for g, y in Y.items():
                ov[g] = np.einsum("ij,ij->j", Pc, y)
        # rates of the shifted channels ||(a A + f) psi||^2
        fj = f[jch][:, None]
        rates = (np.abs(amp_j) ** 2)[:, None] * nn[grp_j] + 2.0 * np.real(np.conj(fj) * amp_j[:, None] * ov[grp_j]) + np.abs(fj) ** 2
        p = np.maximum(rates, 0.0) * dt
        if p.size and p.max() > JUMP_GUARD:
            c, b = np.unravel_index(int(np.argmax(p)), p.shape)
            raise NumericalGuardError(
                f"jump probability {p[c, b]:.3g} > {JUMP_GUARD} on channel {jch[c] + 1} "
                f"(trajectory {trajs[b]}, t={t:.6g}); reduce dt"
            )
        ptot = p.sum(axis=0) if p.size else np.zeros(B)
        jumped = U[:, s, 0] < ptot
        new = _rk4(sys, Psi, t, dt)
        if nh:
            phase = np.asarray(sys.lo_phase(t), dtype=float)
            dW = math.sqrt(dt) * normal_from_uniform(U[:, s, 2:]).T  # (nh, B)
            for i, k in enumerate(hom0):
                e = np.exp(-1j * phase[i])
                g, a = sys.group_of[k], sys.amplitudes[k]
                cpsi = e * (a * Y[g] + f[k] * Psi)
                x = 2.0 * np.real(e * (a * ov[g] + f[k]))
                new += (cpsi * (0.5 * x * dt + dW[i]) - Psi * (0.125 * x * x * dt + 0.5 * x * dW[i]))
                dY = x * dt + dW[i]
                hom_acc[i] += dY
                if n_grid > 1 and interval < n_grid - 1:
                    signal[i, :, interval] += dY
        for b in np.flatnonzero(jumped):
            c = int(np.searchsorted(np.cumsum(p[:, b]), U[b, s, 1] * ptot[b], side="right"))
            c = min(c, len(jch) - 1)
            k = int(jch[c])
            g = sys.group_of[k]
            y = Y[g][:, b] if g in Y else sys.group_ops[g] @ Psi[:, b]
            new[:, b] = sys.amplitudes[k] * y + f[k] * Psi[:, b]
            if k in cnt_pos:
                jumps[b][k + 1].append((s + 1) * dt)
                if n_grid > 1 and interval < n_grid - 1 and s + 1 <= grid[-1]:
                    counts[cnt_pos[k], b, interval] += 1
        nv = new.view(np.float64)
        nrm = np.sqrt((nv[:, 0::2] ** 2 + nv[:, 1::2] ** 2).sum(axis=0))
        if np.any(nrm == 0) or not np.all(np.isfinite(nrm)):
            raise NumericalGuardError(f"state norm collapsed at t={t:.6g}; reduce dt")
        Psi = new / nrm
        if nh and ((s + 1) % stride == 0 or s + 1 == n_steps):
            for i, k in enumerate(sys.homodyne):
                for b in range(B):
                    hom_rec[b][k].append(((s + 1) * dt, float(hom_acc[i, b])))
            hom_acc[:] = 0.0
    Pv = Psi.view(np.float64)
    _check_leak(sys, Pv[:, 0::2] ** 2 + Pv[:, 1::2] ** 2, leak_tol, n_steps * dt)
    if n_steps in slot:
        snapshot(n_steps)
    t_final = n_steps * dt
    records = [MeasurementRecord(jumps[b], hom_rec[b], seed, dt, int(trajs[b]), t_final) for b in range(B)]
    return _BatchResult(list(trajs), Psi, records, obs, counts, signal)


# -- density-matrix conditional path ---------------------------------------------


def _run_density(
    sys: UnravelingSystem,
    rho0: np.ndarray,
    traj: int,
    seed: int,
    dt: float,
    n_steps: int,
    grid: np.ndarray,
    obs_ops: Sequence[sp.csr_matrix],
    stride: int,
    leak_tol: float,
) -> tuple[np.ndarray, MeasurementRecord, np.ndarray, np.ndarray, np.ndarray]:
    """One conditional density-matrix trajectory; unmonitored channels stay in the drift."""
    nh = len(sys.homodyne)
    U = step_uniforms(seed, traj, n_steps, 2 + nh)
    rho = np.array(rho0, dtype=np.complex128)
    slot = {int(s): i for i, s in enumerate(grid)}
    n_grid = len(grid)
    obs = np.zeros((len(obs_ops), n_grid))
    counts = np.zeros((len(sys.counting), max(n_grid - 1, 0)))
    signal = np.zeros((nh, max(n_grid - 1, 0)))
    jumps = {k: [] for k in sys.counting}
    hom_rec = {k: [] for k in sys.homodyne}
    hom_acc = np.zeros(nh)
    cnt0 = [k - 1 for k in sys.counting]
    interval = 0
    R_dense = [sys.op(k).toarray() for k in range(sys.n_channels)]
    K0 = sys.K0.toarray()
    eye = np.eye(sys.dim)
    cache_key, Ls, G = None, [], None
    for s in range(n_steps):
        if s in slot:
            obs[:, slot[s]] = [expectation(rho, OperatorMatrix(X)).real for X in obs_ops]
            interval = slot[s]
        t = s * dt
        f = sys.input_at(t)
        key = f.tobytes()
        if key != cache_key:
            Ls = [R + fk * eye if fk else R for R, fk in zip(R_dense, f)]
            G = K0 - sum((fk * R.conj().T for R, fk in zip(R_dense, f) if fk), np.zeros_like(K0))
            G -= 0.5 * float(np.sum(np.abs(f) ** 2)) * eye
            cache_key = key
        sand = [L @ rho @ L.conj().T for L in Ls]
        p = np.array([np.trace(sand[k]).real * dt for k in cnt0])
        if p.size and p.max() > JUMP_GUARD:
            raise NumericalGuardError(f"jump probability {p.max():.3g} > {JUMP_GUARD} at t={t:.6g}; reduce dt")
        ptot = float(p.sum()) if p.size else 0.0
        Grho = G @ rho
        drift = Grho + Grho.conj().T
        for k, S in enumerate(sand):
            if k not in cnt0:
                drift += S
        new = rho + dt * drift
        if nh:
            phase = np.asarray(sys.lo_phase(t), dtype=float)
            dW = math.sqrt(dt) * normal_from_uniform(U[s, 2:])
            for i, k in enumerate(sys.homodyne):
                c = np.exp(-1j * phase[i]) * Ls[k - 1]
                crho = c @ rho
                x = 2.0 * np.trace(crho).real
                new += dW[i] * (crho + crho.conj().T - x * rho)
                dY = x * dt + dW[i]
                hom_acc[i] += dY
                if n_grid > 1 and interval < n_grid - 1:
                    signal[i, interval] += dY
        if U[s, 0] < ptot:
            c = min(int(np.searchsorted(np.cumsum(p), U[s, 1] * ptot, side="right")), len(p) - 1)
            new = sand[cnt0[c]]
            jumps[cnt0[c] + 1].append((s + 1) * dt)
            if n_grid > 1 and interval < n_grid - 1 and s + 1 <= grid[-1]:
                counts[c, interval] += 1
        new = 0.5 * (new + new.conj().T)
        tr = np.trace(new).real
        if not tr > 0:
            raise NumericalGuardError(f"conditional state trace {tr!r} at t={t:.6g}; reduce dt")
        rho = new / tr
        if sys._edge is not None:
            leak = float(np.sum(np.diagonal(rho).real[sys._edge]))
            if leak > leak_tol:
                raise NumericalGuardError(f"truncation-edge population {leak:.3e} > {leak_tol:.1e} at t={(s + 1) * dt:.6g}")
        if nh and ((s + 1) % stride == 0 or s + 1 == n_steps):
            for i, k in enumerate(sys.homodyne):
                hom_rec[k].append(((s + 1) * dt, float(hom_acc[i])))
            hom_acc[:] = 0.0
    if n_steps in slot:
        obs[:, slot[n_steps]] = [expectation(rho, OperatorMatrix(X)).real for X in obs_ops]
    rec = MeasurementRecord(jumps, hom_rec, seed, dt, traj, n_steps * dt)
    return rho, rec, obs, counts, signal


# -- public operations -----------------------------------------------------------


def _as_system(system, mode: str, frame: str) -> UnravelingSystem:
    if isinstance(system, UnravelingSystem):
        return system
    if isinstance(system, MultiPhotonModel):
        return UnravelingSystem.from_model(system, mode, frame)
    raise TypeError(f"expected a MultiPhotonModel or UnravelingSystem, got {type(system).__name__}")


def _single(system, psi0, t_final, dt, seed, traj, frame, mode, representation, leak_tol, record_stride):
    sys_ = _as_system(system, mode, frame)
    n_steps = _n_steps(t_final, dt)
    psi = _initial_pure(psi0, sys_.dim)
    grid = np.array([0], dtype=np.int64)
    if representation == "pure":
        res = _run_batch(sys_, psi, [traj], seed, dt, n_steps, grid, [], record_stride, leak_tol)
        return QuantumState.pure(res.psi[:, 0]), res.records[0]
    if representation == "density":
        rho, rec, *_ = _run_density(sys_, np.outer(psi, psi.conj()), traj, seed, dt, n_steps, grid, [], record_stride, leak_tol)
        return QuantumState.mixed(rho), rec
    raise ValueError(f"representation must be 'pure' or 'density', got {representation!r}")


def jump_unraveling(
    system: MultiPhotonModel | UnravelingSystem,
    psi0,
    t_final: float,
    dt: float,
    seed: int,
    traj: int = 0,
    frame: str = "lab",
    representation: str = "pure",
    leak_tol: float = 1e-6,
) -> tuple[QuantumState, MeasurementRecord]:
    """One photocounting trajectory; returns the final conditional state and its record."""
    return _single(system, psi0, t_final, dt, seed, traj, frame, "jump", representation, leak_tol, 1)


def homodyne_unraveling(
    system: MultiPhotonModel | UnravelingSystem,
    psi0,
    t_final: float,
    dt: float,
    seed: int,
    traj: int = 0,
    frame: str = "lab",
    representation: str = "pure",
    leak_tol: float = 1e-6,
    record_stride: int = 1,
) -> tuple[QuantumState, MeasurementRecord]:
    """One homodyne trajectory (Euler-Maruyama); ``record_stride`` sums ``dY`` over blocks of steps."""
    return _single(system, psi0, t_final, dt, seed, traj, frame, "homodyne", representation, leak_tol, record_stride)


@dataclass
class EnsembleStats:
    n_traj: int
    times: np.ndarray
    mean: dict[str, np.ndarray]
    se: dict[str, np.ndarray]
    counting_rate: dict[int, np.ndarray]
    counting_rate_se: dict[int, np.ndarray]
    homodyne_signal: dict[int, np.ndarray]
    homodyne_signal_se: dict[int, np.ndarray]
    records: list[MeasurementRecord] = field(default_factory=list, repr=False)

    @property
    def se_defined(self) -> bool:
        return self.n_traj >= 2

    def rows(self) -> list[tuple[float, str, float, float]]:
        """``(t, name, mean, se)``; interval quantities are stamped at the interval end."""
        out = []
        for i, t in enumerate(self.times):
            for name in self.mean:
                out.append((float(t), name, float(self.mean[name][i]), float(self.se[name][i])))
            if i == 0:
                continue
            for ch in self.counting_rate:
                out.append((float(t), f"rate_{ch}", float(self.counting_rate[ch][i - 1]), float(self.counting_rate_se[ch][i - 1])))
            for ch in self.homodyne_signal:
                out.append((float(t), f"signal_{ch}", float(self.homodyne_signal[ch][i - 1]), float(self.homodyne_signal_se[ch][i - 1])))
        return out

    def csv(self) -> str:
        lines = ["t, obs, mean, se"]
        lines += [f"{t!r}, {name}, {m!r}, {s!r}" for t, name, m, s in self.rows()]
        return "\n".join(lines) + "\n"


def _mean_se(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error over axis 0."""
    n = x.shape[0]
    mean = np.mean(x, axis=0)
    if n < 2:
        return mean, np.full(mean.shape, np.nan)
    return mean, np.std(x, axis=0, ddof=1) / math.sqrt(n)


def ensemble_average(
    system: MultiPhotonModel | UnravelingSystem,
    psi0,
    n_traj: int,
    t_grid: Sequence[float],
    mode: str,
    seed: int,
    dt: float,
    observables: Mapping[str, OperatorMatrix] | None = None,
    frame: str = "lab",
    representation: str = "pure",
    batch_size: int = 128,
    leak_tol: float = 1e-6,
    record_stride: int = 1,
    threads: int | None = None,
) -> EnsembleStats:
    """Run ``n_traj`` trajectories (trajectory ``i`` keyed by ``(seed, i)``) and reduce them.

    ``n_traj = 1`` is allowed; its standard errors are NaN and ``se_defined`` is False.
    """
    if n_traj < 1:
        raise ValueError(f"n_traj must be >= 1, got {n_traj}")
    if n_traj < 2:
        log.warning("n_traj=1: standard errors are undefined")
    sys_ = _as_system(system, mode, frame)
    t_grid = np.asarray(t_grid, dtype=float)
    n_steps = _n_steps(float(t_grid[-1]), dt)
    grid = _grid_steps(t_grid, dt, n_steps)
    psi = _initial_pure(psi0, sys_.dim)
    observables = dict(observables or {})
    obs_ops = [X.csr for X in observables.values()]
    batches = [list(range(i, min(i + batch_size, n_traj))) for i in range(0, n_traj, batch_size)]

    def work(b):
        try:
            if representation == "pure":
                return _run_batch(sys_, psi, b, seed, dt, n_steps, grid, obs_ops, record_stride, leak_tol)
            if representation != "density":
                raise ValueError(f"representation must be 'pure' or 'density', got {representation!r}")
            rho0 = np.outer(psi, psi.conj())
            parts = [_run_density(sys_, rho0, i, seed, dt, n_steps, grid, obs_ops, record_stride, leak_tol) for i in b]
            return _BatchResult(
                b,
                np.zeros((sys_.dim, 0)),
                [p[1] for p in parts],
                np.stack([p[2] for p in parts], axis=1),
                np.stack([p[3] for p in parts], axis=1),
                np.stack([p[4] for p in parts], axis=1),
            )
        except NumericalGuardError as exc:
            raise NumericalGuardError(f"trajectories {b[0]}..{b[-1]}: {exc}") from exc

    n_workers = min(threads or max_threads(), len(batches))
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as ex:
            results = list(ex.map(work, batches))
    else:
        results = [work(b) for b in batches]

    obs = np.concatenate([r.obs for r in results], axis=1)
    counts = np.concatenate([r.counts for r in results], axis=1)
    signal = np.concatenate([r.signal for r in results], axis=1)
    records = [rec for r in results for rec in r.records]
    widths = np.diff(t_grid)
    mean, se = {}, {}
    for o, name in enumerate(observables):
        mean[name], se[name] = _mean_se(obs[o])
    c_rate, c_se = {}, {}
    for i, ch in enumerate(sys_.counting):
        c_rate[ch], c_se[ch] = _mean_se(counts[i] / widths)
    h_sig, h_se = {}, {}
    for i, ch in enumerate(sys_.homodyne):
        h_sig[ch], h_se[ch] = _mean_se(signal[i] / widths)
    return EnsembleStats(n_traj, t_grid, mean, se, c_rate, c_se, h_sig, h_se, records)


def characteristic_functional(
    records: Sequence[MeasurementRecord],
    kappa: Sequence[float] | np.ndarray,
    partition: Sequence[float],
) -> tuple[complex, float]:
    """Monte-Carlo estimate of ``E[exp(i sum_l sum_k kappa_k dX_k(t_{l-1}, t_l))]`` and its standard error.

    ``kappa`` has one entry per monitored channel (ascending channel number),
    or one such row per partition interval.  Counting increments are jump
    counts in ``(t_{l-1}, t_l]``; homodyne increments are summed ``dY``.
    """
    if not records:
        raise ValueError("no records")
    monitored = records[0].monitored
    dt = records[0].dt
    for r in records:
        if r.monitored != monitored or r.dt != dt:
            raise ValueError("records must share the channel set and time step")
    part = np.asarray(partition, dtype=float)
    if part.ndim != 1 or part.size < 2 or np.any(np.diff(part) <= 0):
        raise ValueError("partition must be at least two increasing time points")
    if part[-1] > min(r.t_final for r in records) + 1e-9:
        raise ValueError(f"partition end {part[-1]} beyond record length")
    k = np.asarray(kappa, dtype=float)
    n_int = part.size - 1
    if k.ndim == 1:
        k = np.tile(k, (n_int, 1))
    if k.shape != (n_int, len(monitored)):
        raise ValueError(f"kappa needs {len(monitored)} entries per interval (monitored channels {monitored}), got shape {np.shape(kappa)}")
    half = 0.5 * dt
    lo, hi = part[:-1] + half, part[1:] + half
    vals = np.empty(len(records), dtype=np.complex128)
    for j, r in enumerate(records):
        phase = 0.0
        for c, ch in enumerate(monitored):
            if not np.any(k[:, c]):
                continue
            if ch in r.counting:
                times = np.asarray(r.counting[ch])
                inc = np.searchsorted(times, hi) - np.searchsorted(times, lo)
            else:
                pts = np.asarray(r.homodyne[ch], dtype=float).reshape(-1, 2)
                ends = np.concatenate([[0.0], pts[:, 0]])
                for tp in part:
                    if np.min(np.abs(ends - tp)) > half:
                        raise ValueError(f"partition point {tp} does not fall on the homodyne record grid of channel {ch}")
                inc = np.array([pts[(pts[:, 0] > a) & (pts[:, 0] < b), 1].sum() for a, b in zip(lo, hi)])
            phase += float(np.dot(k[:, c], inc))
        vals[j] = np.exp(1j * phase) if phase else 1.0
    est = complex(np.mean(vals))
    if len(vals) < 2:
        return est, float("nan")
    se = math.sqrt((np.var(vals.real, ddof=1) + np.var(vals.imag, ddof=1)) / len(vals))
    return est, se
