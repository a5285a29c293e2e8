"""Multi-photon parametric model: Hamiltonian, channels and coherent pump.

Channel blocks, in flattening order (``l = 1..8``)::

    1  photocount-sub    alpha1_i a_i        2  photocount-pump   alpha2_j b_j
    3  homodyne          alpha3_i a_i        4  pump-input        alpha4_j b_j
    5  loss-a            alpha5_i a_i        6  loss-b            alpha6_j b_j
    7  thermal-a†        alpha7_i a_i^†      8  thermal-b†        alpha8_j b_j^†

Odd blocks have ``n`` channels, even blocks ``m``; flat channel numbers run
from 1 to ``4(n+m)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .fock import ModeLayout, OperatorMatrix, annihilation, creation, identity, number
from .report import CheckReport

RESONANCE_TOL = 1e-9

ROLES = (
    "photocount-sub",
    "photocount-pump",
    "homodyne",
    "pump-input",
    "loss-a",
    "loss-b",
    "thermal-a†",
    "thermal-b†",
)

FRAMES = ("lab", "rotating")


class ModelError(ValueError):
    """Model parameters violate a physical or structural condition."""


def _as_complex(x) -> complex:
    if isinstance(x, (list, tuple)):
        if len(x) != 2:
            raise ModelError(f"complex value must be a number or [re, im], got {x!r}")
        return complex(float(x[0]), float(x[1]))
    return complex(x)


@dataclass(frozen=True)
class Drive:
    """Coherent pump: amplitude ``lam`` on for ``0 <= t < T``; homodyne phases ``theta``."""

    lam: complex = 0j
    T: float = math.inf
    theta: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lam", _as_complex(self.lam))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "theta", tuple(float(x) for x in self.theta))


@dataclass(frozen=True)
class ModelParams:
    ws: tuple[float, ...]
    wp: tuple[float, ...]
    g: float
    alpha: tuple[tuple[complex, ...], ...]
    drive: Drive = field(default_factory=Drive)

    def __post_init__(self):
        object.__setattr__(self, "ws", tuple(float(w) for w in self.ws))
        object.__setattr__(self, "wp", tuple(float(w) for w in self.wp))
        g = complex(self.g) if not isinstance(self.g, (list, tuple)) else _as_complex(self.g)
        if g.imag != 0.0:
            raise ModelError(f"coupling g must be real for a self-adjoint Hamiltonian, got {g}")
        if g.real == 0.0:
            raise ModelError("coupling g must be nonzero")
        object.__setattr__(self, "g", float(g.real))
        if len(self.alpha) != 8:
            raise ModelError(f"need 8 amplitude lists alpha^(1..8), got {len(self.alpha)}")
        alpha = tuple(tuple(_as_complex(a) for a in block) for block in self.alpha)
        object.__setattr__(self, "alpha", alpha)
        drive = self.drive if isinstance(self.drive, Drive) else Drive(**self.drive)
        if not drive.theta:
            drive = Drive(drive.lam, drive.T, (0.0,) * len(self.ws))
        if len(drive.theta) != len(self.ws):
            raise ModelError(f"need {len(self.ws)} homodyne phases, got {len(drive.theta)}")
        object.__setattr__(self, "drive", drive)

    @property
    def n(self) -> int:
        return len(self.ws)

    @property
    def m(self) -> int:
        return len(self.wp)

    @property
    def resonance_mismatch(self) -> float:
        return abs(math.fsum(self.ws) - math.fsum(self.wp))

    def check_resonance(self, tol: float = RESONANCE_TOL) -> None:
        if self.resonance_mismatch > tol:
            raise ModelError(
                "resonance condition sum(ws) == sum(wp) violated: "
                f"sum(ws)={math.fsum(self.ws)!r}, sum(wp)={math.fsum(self.wp)!r}"
            )

    def block_lengths(self) -> tuple[int, ...]:
        return tuple(self.n if l % 2 else self.m for l in range(1, 9))


def _check_params_layout(params: ModelParams, layout: ModeLayout) -> None:
    if (params.n, params.m) != (layout.n, layout.m):
        raise ModelError(f"params describe n={params.n}, m={params.m} but layout has n={layout.n}, m={layout.m}")


def _product(ops: Sequence[OperatorMatrix]) -> sp.csr_matrix:
    out = ops[0].csr
    for op in ops[1:]:
        out = out @ op.csr
    return out


def interaction(layout: ModeLayout) -> OperatorMatrix:
    """``prod a_i^† prod b_j - prod a_i prod b_j^†`` (anti-Hermitian)."""
    subs = range(1, layout.n + 1)
    pumps = range(layout.n + 1, layout.n_modes + 1)
    up = _product([creation(layout, i) for i in subs] + [annihilation(layout, j) for j in pumps])
    down = _product([annihilation(layout, i) for i in subs] + [creation(layout, j) for j in pumps])
    return OperatorMatrix(up - down)


def total_number(params: ModelParams, layout: ModeLayout) -> OperatorMatrix:
    """Frequency-weighted number operator ``N = N_s + N_p`` (diagonal)."""
    _check_params_layout(params, layout)
    w = np.asarray(params.ws + params.wp)
    return OperatorMatrix(sp.diags(layout.occupations @ w, format="csr"))


def hamiltonian(params: ModelParams, layout: ModeLayout, *, check_resonance: bool = True) -> OperatorMatrix:
    """``H = N_s + N_p + (i g / 2) I``.

    ``check_resonance=False`` exists for off-resonance control experiments only.
    """
    _check_params_layout(params, layout)
    if check_resonance:
        params.check_resonance()
    I = interaction(layout)
    return OperatorMatrix(total_number(params, layout).csr + (0.5j * params.g) * I.csr)


@dataclass(frozen=True)
class Channel:
    index: int  # flat, 1-based
    block: int  # l = 1..8
    j: int  # position inside the block, 1-based
    mode: int  # layout mode, 1-based
    dagger: bool
    amplitude: complex
    base: OperatorMatrix = field(repr=False)

    @property
    def role(self) -> str:
        return ROLES[self.block - 1]

    @cached_property
    def op(self) -> OperatorMatrix:
        return self.amplitude * self.base


class ChannelSet:
    """Flattened channels ``R_1..R_{4(n+m)}`` in ascending block order."""

    def __init__(self, channels: Sequence[Channel], n: int, m: int):
        self.channels = tuple(channels)
        self.n = n
        self.m = m
        if len(self.channels) != 4 * (n + m):
            raise ModelError(f"expected {4 * (n + m)} channels, got {len(self.channels)}")

    def __len__(self):
        return len(self.channels)

    def __iter__(self):
        return iter(self.channels)

    def __getitem__(self, i):
        return self.channels[i]

    @property
    def ops(self) -> tuple[OperatorMatrix, ...]:
        return tuple(c.op for c in self.channels)

    @property
    def roles(self) -> tuple[str, ...]:
        return tuple(c.role for c in self.channels)

    def channel(self, k: int) -> Channel:
        if not 1 <= k <= len(self):
            raise IndexError(f"channel must be in 1..{len(self)}, got {k}")
        return self.channels[k - 1]

    def flat_index(self, block: int, j: int) -> int:
        return flat_index(self.n, self.m, block, j)

    def locate(self, k: int) -> tuple[int, int]:
        c = self.channel(k)
        return c.block, c.j

    def in_block(self, block: int) -> list[int]:
        return [c.index for c in self.channels if c.block == block]


def flat_index(n: int, m: int, block: int, j: int) -> int:
    """Flat channel number of ``R^(block)_j``; both sides 1-based."""
    if not 1 <= block <= 8:
        raise IndexError(f"block must be in 1..8, got {block}")
    size = n if block % 2 else m
    if not 1 <= j <= size:
        raise IndexError(f"block {block} has {size} channels, got j={j}")
    pairs = (block - 1) // 2
    offset = pairs * (n + m) + (n if block % 2 == 0 else 0)
    return offset + j


def flatten_channels(params: ModelParams, layout: ModeLayout) -> ChannelSet:
    _check_params_layout(params, layout)
    for l, (block, size) in enumerate(zip(params.alpha, params.block_lengths()), start=1):
        if len(block) != size:
            raise ModelError(f"alpha^({l}) needs {size} amplitudes, got {len(block)}")
    lowering = [annihilation(layout, k) for k in range(1, layout.n_modes + 1)]
    raising = [creation(layout, k) for k in range(1, layout.n_modes + 1)]
    channels = []
    for l in range(1, 9):
        sub = l % 2 == 1
        dagger = l in (7, 8)
        for j, amp in enumerate(params.alpha[l - 1], start=1):
            mode = j if sub else layout.n + j
            base = (raising if dagger else lowering)[mode - 1]
            channels.append(Channel(len(channels) + 1, l, j, mode, dagger, amp, base))
    return ChannelSet(channels, layout.n, layout.m)


def dissipator_sum(channels) -> OperatorMatrix:
    """``R = sum_k R_k^† R_k``."""
    ops = channels.ops if isinstance(channels, ChannelSet) else tuple(channels)
    total = None
    for op in ops:
        term = op.csr.conj().T @ op.csr
        total = term if total is None else total + term
    return OperatorMatrix(total)


def noise_coefficients(channels: ChannelSet) -> tuple[OperatorMatrix, ...]:
    """Annihilation-noise coefficients ``N_j = -R_j^†`` (scattering matrix is the identity)."""
    return tuple(-op.dag() for op in channels.ops)


def effective_K(params: ModelParams, layout: ModeLayout) -> OperatorMatrix:
    H = hamiltonian(params, layout)
    R = dissipator_sum(flatten_channels(params, layout))
    return OperatorMatrix(-1j * H.csr - 0.5 * R.csr)


def input_amplitudes(params: ModelParams, n_channels: int, t: float, frame: str = "lab") -> np.ndarray:
    """Coherent input ``f_k(t)`` per flat channel; nonzero only on pump-input channels.

    ``f_k(t) = i lam exp(-i wp_k t) / conj(alpha4_k)`` for ``0 <= t < T``.  In the
    rotating frame the carrier ``exp(-i wp_k t)`` is dropped.
    """
    if frame not in FRAMES:
        raise ValueError(f"frame must be one of {FRAMES}, got {frame!r}")
    if t < 0:
        raise ValueError(f"time must be >= 0, got {t}")
    n, m = params.n, params.m
    f = np.zeros(n_channels, dtype=np.complex128)
    lam = params.drive.lam
    if lam == 0 or t >= params.drive.T:
        return f
    for j, (a4, w) in enumerate(zip(params.alpha[3], params.wp), start=1):
        if a4 == 0:
            raise ModelError(f"pump-input amplitude alpha^(4)_{j} is zero, drive amplitude undefined")
        carrier = 1.0 if frame == "rotating" else np.exp(-1j * w * t)
        f[flat_index(n, m, 4, j) - 1] = 1j * lam * carrier / np.conj(a4)
    return f


def shift_channels(ops: Sequence[OperatorMatrix], f: np.ndarray) -> tuple[tuple[OperatorMatrix, ...], OperatorMatrix]:
    """Weyl shift ``L_k = R_k + f_k 1`` and ``H_corr = (i/2) sum_k (conj(f_k) R_k - f_k R_k^†)``."""
    dim = ops[0].dim
    one = identity(dim)
    shifted = []
    corr = sp.csr_matrix((dim, dim), dtype=np.complex128)
    for op, fk in zip(ops, f):
        if fk == 0:
            shifted.append(op)
            continue
        shifted.append(op + fk * one)
        corr = corr + 0.5j * (np.conj(fk) * op.csr - fk * op.csr.conj().T)
    return tuple(shifted), OperatorMatrix(corr)


def drive_shift(params: ModelParams, channels: ChannelSet, t: float, frame: str = "lab"):
    """Channels and Hamiltonian correction at time ``t`` under the coherent pump."""
    f = input_amplitudes(params, len(channels), t, frame)
    return shift_channels(channels.ops, f)


@dataclass(frozen=True)
class MultiPhotonModel:
    params: ModelParams
    layout: ModeLayout

    def __post_init__(self):
        _check_params_layout(self.params, self.layout)
        self.params.check_resonance()

    @cached_property
    def hamiltonian(self) -> OperatorMatrix:
        return hamiltonian(self.params, self.layout)

    @cached_property
    def channels(self) -> ChannelSet:
        return flatten_channels(self.params, self.layout)

    @cached_property
    def number_total(self) -> OperatorMatrix:
        return total_number(self.params, self.layout)

    @cached_property
    def K(self) -> OperatorMatrix:
        return OperatorMatrix(-1j * self.hamiltonian.csr - 0.5 * dissipator_sum(self.channels).csr)

    def frame_hamiltonian(self, frame: str = "lab") -> OperatorMatrix:
        """Hamiltonian in the lab frame, or ``H - N`` in the frame rotating with ``N``."""
        if frame == "lab":
            return self.hamiltonian
        if frame == "rotating":
            return OperatorMatrix((0.5j * self.params.g) * interaction(self.layout).csr)
        raise ValueError(f"frame must be one of {FRAMES}, got {frame!r}")

    def inputs(self, frame: str = "lab") -> Callable[[float], np.ndarray] | None:
        if self.params.drive.lam == 0:
            return None
        n_ch = len(self.channels)
        return lambda t: input_amplitudes(self.params, n_ch, t, frame)

    def lo_phases(self, frame: str = "lab") -> Callable[[float], np.ndarray]:
        """Local-oscillator phases ``theta_k - ws_k t`` of the homodyne channels."""
        theta = np.asarray(self.params.drive.theta)
        ws = np.asarray(self.params.ws)
        if frame == "rotating":
            return lambda t: theta.copy()
        return lambda t: theta - ws * t

    @property
    def has_thermal(self) -> bool:
        return any(a != 0 for a in self.params.alpha[6] + self.params.alpha[7])


def build_model(params: ModelParams, layout: ModeLayout) -> MultiPhotonModel:
    return MultiPhotonModel(params, layout)


@dataclass(frozen=True)
class MeasurementScheme:
    """Commuting projections ``B_k`` and homodyne test functions ``h_k(t)`` on the channel space."""

    B: tuple[np.ndarray, ...]
    h: Callable[[float], np.ndarray]  # t -> array (d', d)
    labels: tuple[str, ...]


def default_scheme(params: ModelParams) -> MeasurementScheme:
    """Counting on channels ``1..n+m``, homodyne on ``n+m+1..2n+m``."""
    n, m = params.n, params.m
    d = 4 * (n + m)
    d_obs = 2 * n + m
    B = []
    for k in range(1, d_obs + 1):
        Bk = np.zeros((d, d))
        if k <= n + m:
            Bk[k - 1, k - 1] = 1.0
        B.append(Bk)
    theta = np.asarray(params.drive.theta)
    ws = np.asarray(params.ws)

    def h(t: float) -> np.ndarray:
        out = np.zeros((d_obs, d), dtype=np.complex128)
        for i in range(n):
            k = n + m + i  # 0-based observable and channel index coincide
            # <h_k|z_k> = exp(i(theta - ws t)) so the component is its conjugate
            out[k, k] = np.exp(-1j * (theta[i] - ws[i] * t))
        return out

    labels = tuple(f"count:{k}" for k in range(1, n + m + 1)) + tuple(
        f"homodyne:{k}" for k in range(n + m + 1, d_obs + 1)
    )
    return MeasurementScheme(tuple(B), h, labels)


def measurement_compatibility_check(
    params: ModelParams,
    scheme: MeasurementScheme | None = None,
    times: Sequence[float] = (0.0, 0.37, 1.0, 2.5, 10.0),
    tol: float = 1e-12,
) -> CheckReport:
    """Check ``Im<h_i|h_j> = 0`` and ``B_i h_j = 0`` for every pair at sample times."""
    scheme = scheme or default_scheme(params)
    worst, where = 0.0, None
    B = scheme.B
    for i, Bi in enumerate(B):
        for j, Bj in enumerate(B[i + 1:], start=i + 1):
            c = float(np.max(np.abs(Bi @ Bj - Bj @ Bi)))
            if c > worst:
                worst, where = c, f"[B_{i + 1}, B_{j + 1}] != 0"
    for t in times:
        hs = scheme.h(t)
        gram = hs.conj() @ hs.T
        im = np.abs(gram.imag)
        if im.max() > worst:
            i, j = np.unravel_index(np.argmax(im), im.shape)
            worst, where = float(im.max()), f"Im<h_{i + 1}|h_{j + 1}> at t={t}"
        for i, Bi in enumerate(B):
            prod = np.abs(Bi @ hs.T)
            if prod.max() > worst:
                j = int(np.argmax(prod.max(axis=0)))
                worst, where = float(prod.max()), f"(B_{i + 1}, h_{j + 1}) at t={t}"
    passed = worst <= tol
    return CheckReport(
        "measurement_compatibility",
        passed,
        tol - worst,
        tol,
        None if passed else where,
        {"observables": list(scheme.labels)},
    )
