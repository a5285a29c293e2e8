"""Finite-truncation certificates for the structural identities and inequalities of the model.

Every check returns a :class:`~mpo_sim.report.CheckReport`.  Checks that are
only valid away from the truncation edge restrict to the interior subspace
(``margin`` shells below every cutoff) and report how many basis states were
excluded.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .fock import (
    ModeLayout,
    OperatorMatrix,
    annihilation,
    commutator,
    creation,
    interior_projector,
)
from .model import (
    ModelParams,
    MultiPhotonModel,
    hamiltonian,
    interaction,
    noise_coefficients,
    total_number,
)
from .report import CheckReport

ORDER16 = 16.0
ORDER32 = 32.0


def L0(q, eps: float, n: int, m: int):
    """``q^(2(n+m)) / (1 + eps q^(2(n+m)))^2`` (elementwise for arrays)."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    p = np.asarray(q, dtype=float) ** (2 * (n + m))
    out = p / (1.0 + eps * p) ** 2
    return float(out) if np.ndim(out) == 0 else out


def admissible_eps(params: ModelParams) -> float:
    """Upper bound ``1 / (2 r^(2(n+m)))`` on eps with ``r`` the largest frequency."""
    r = max(params.ws + params.wp)
    return 1.0 / (2.0 * r ** (2 * (params.n + params.m)))


def _excluded(layout: ModeLayout, margin: int) -> tuple[np.ndarray, int]:
    P = interior_projector(layout, margin)
    inside = P.csr.diagonal().real > 0.5
    return inside, int(layout.dim - inside.sum())


# -- lemma r & k ------------------------------------------------------------------


def rk_critical_point(r: float, k: int) -> float:
    """Maximizer of ``x^(2k) - 4^k (x - r)^(2k)`` on ``(0, 2r)``."""
    c = 2.0 ** (2 * k / (2 * k - 1))
    return c / (c - 1.0) * r


def lemma_rk_check(r: float, k: int, eps: float, grid: Sequence[float] | None = None) -> CheckReport:
    """Scan ``(1 + eps x^(2k))^2 / (1 + eps (x - r)^(2k))^2 <= 16^k`` over ``x >= 0``.

    The default grid covers ``[0, max(100, 50 r)]`` at step ``1e-3 * r`` and always
    includes ``0, r, 2r``, the polynomial maximizer and a refined neighborhood
    of the grid maximum.
    """
    if r <= 0 or k < 1 or eps <= 0:
        raise ValueError(f"need r > 0, k >= 1, eps > 0; got r={r}, k={k}, eps={eps}")
    if grid is None:
        hi = max(100.0, 50.0 * r)
        x = np.arange(0.0, hi + 1e-3 * r, 1e-3 * r)
    else:
        x = np.asarray(grid, dtype=float)
        if np.any(x < 0):
            raise ValueError("grid must lie in [0, inf)")
    xm = rk_critical_point(r, k)
    x = np.concatenate([x, [0.0, r, 2 * r, xm]])

    def ratio(x):
        return ((1.0 + eps * x ** (2 * k)) / (1.0 + eps * (x - r) ** (2 * k))) ** 2

    vals = ratio(x)
    i = int(np.argmax(vals))
    # refine around the grid maximum
    lo, hi = max(0.0, x[i] - 2e-3 * r), x[i] + 2e-3 * r
    xf = np.linspace(lo, hi, 4001)
    vf = ratio(xf)
    j = int(np.argmax(vf))
    if vf[j] > vals[i]:
        x_worst, worst = float(xf[j]), float(vf[j])
    else:
        x_worst, worst = float(x[i]), float(vals[i])
    bound = ORDER16**k
    passed = worst <= bound
    return CheckReport(
        "lemma_rk",
        passed,
        margin=bound - worst,
        tolerance=0.0,
        location={"x": x_worst} if not passed else None,
        details={
            "r": r,
            "k": k,
            "eps": eps,
            "eps_bound": 1.0 / (2.0 * r ** (2 * k)),
            "max_ratio": worst,
            "ratio_bound": bound,
            "x_max_ratio": x_worst,
            "x_critical": xm,
            "n_points": int(x.size + xf.size),
        },
    )


# -- functionals L^x_k --------------------------------------------------------------


def scriptL_values(params: ModelParams, layout: ModeLayout, eps: float) -> dict:
    """Matrix elements ``<x e | [C_eps, x] e>`` for every ladder operator ``x`` and basis state ``e``.

    Returns ``{(kind, mode): (direct, closed_form)}`` arrays over the basis, with
    ``kind`` in ``a, a+, b, b+`` and ``mode`` numbered from 1 within its kind.
    """
    n, m = layout.n, layout.m
    w = np.asarray(params.ws + params.wp)
    occ = layout.occupations
    q = occ @ w
    c = L0(q, eps, n, m)
    C = sp.diags(c, format="csr")
    out = {}
    for mode in range(1, n + m + 1):
        sub = mode <= n
        j = mode if sub else mode - n
        wk = w[mode - 1]
        s = occ[:, mode - 1]
        for dagger in (False, True):
            x = (creation if dagger else annihilation)(layout, mode).csr
            comm = C @ x - x @ C
            direct = (x.conj().T @ comm).diagonal().real
            if dagger:
                closed = (s + 1) * (L0(q + wk, eps, n, m) - c)
            else:
                closed = s * (L0(q - wk, eps, n, m) - c)
            kind = ("a" if sub else "b") + ("+" if dagger else "")
            out[(kind, j)] = (direct, closed)
    return out


def scriptL_bound_check(
    params: ModelParams,
    layout: ModeLayout,
    eps: float,
    margin: int = 1,
    tol: float = 1e-10,
) -> CheckReport:
    """Closed forms (equality at ``tol``) and the bound ``|L^x_k(q)| <= 32^(n+m) L_0(q)`` on interior states."""
    bound_eps = admissible_eps(params)
    if not 0 < eps < bound_eps:
        raise ValueError(f"eps={eps} outside the admissible range (0, {bound_eps}) = (0, 1/(2 r^(2(n+m))))")
    n, m = layout.n, layout.m
    inside, n_excl = _excluded(layout, margin)
    idx = np.flatnonzero(inside)
    w = np.asarray(params.ws + params.wp)
    q = layout.occupations @ w
    l0 = L0(q, eps, n, m)
    const = ORDER32 ** (n + m)
    worst_cf, where_cf = 0.0, None
    worst_b, where_b = -math.inf, None
    max_ratio = 0.0
    violations = []
    for (kind, j), (direct, closed) in scriptL_values(params, layout, eps).items():
        d = np.abs(direct[idx] - closed[idx])
        i = int(np.argmax(d))
        if d[i] > worst_cf:
            worst_cf, where_cf = float(d[i]), (kind, j, layout.decode(int(idx[i])))
        excess = np.abs(direct[idx]) - const * l0[idx]
        i = int(np.argmax(excess))
        if excess[i] > worst_b:
            worst_b, where_b = float(excess[i]), (kind, j, layout.decode(int(idx[i])))
        pos = l0[idx] > 0
        if np.any(pos):
            max_ratio = max(max_ratio, float(np.max(np.abs(direct[idx][pos]) / l0[idx][pos])))
        for ii in np.flatnonzero(excess > 0):
            violations.append({"op": kind, "mode": j, "state": layout.decode(int(idx[ii])), "value": float(direct[idx[ii]]), "L0": float(l0[idx[ii]])})
    cf_ok = worst_cf <= tol
    bound_ok = worst_b <= 0.0
    passed = cf_ok and bound_ok
    location = None
    if not passed:
        location = {"closed_form": where_cf} if not cf_ok else {"bound": where_b}
    return CheckReport(
        "scriptL_bound",
        passed,
        margin=min(tol - worst_cf, -worst_b),
        tolerance=tol,
        location=location,
        details={
            "eps": eps,
            "closed_form_residual": worst_cf,
            "closed_form_passed": cf_ok,
            "bound_constant": const,
            "bound_max_excess": worst_b,
            "bound_passed": bound_ok,
            "bound_worst": where_b,
            "max_ratio_where_L0_positive": max_ratio,
            "bound_violations": violations[:50],
            "n_bound_violations": len(violations),
            "interior_states": int(idx.size),
            "excluded_states": n_excl,
        },
    )


# -- propositions -------------------------------------------------------------------


def _f_diag(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        v = np.asarray(f(x), dtype=np.complex128)
    return np.broadcast_to(v, x.shape).copy()


def fN_intertwine_check(
    layout: ModeLayout,
    params: ModelParams,
    f: Callable[[np.ndarray], np.ndarray],
    margin: int = 1,
    tol: float = 1e-12,
) -> CheckReport:
    """``x f(N) = f(N + s w) x`` for ``x`` in ``a_k, a_k^†, b_j, b_j^†`` (``s = +1`` lowering, ``-1`` raising)."""
    N = total_number(params, layout)
    q = N.csr.diagonal().real
    P = interior_projector(layout, margin).csr
    _, n_excl = _excluded(layout, margin)
    w = np.asarray(params.ws + params.wp)
    fN = sp.diags(_f_diag(f, q), format="csr")
    worst, where = 0.0, None
    per_op = {}
    for mode in range(1, layout.n_modes + 1):
        for dagger in (False, True):
            x = (creation if dagger else annihilation)(layout, mode).csr
            shift = -w[mode - 1] if dagger else w[mode - 1]
            fs = sp.diags(_f_diag(f, q + shift), format="csr")
            res = ((x @ fN - fs @ x) @ P).tocoo()
            val = float(np.max(np.abs(res.data))) if res.nnz else 0.0
            name = layout.mode_name(mode) + ("+" if dagger else "")
            per_op[name] = val
            if val > worst or where is None:
                if res.nnz and val > 0:
                    i = int(np.argmax(np.abs(res.data)))
                    where = (name, layout.decode(int(res.row[i])), layout.decode(int(res.col[i])))
                    worst = val
                elif where is None:
                    where = (name, None, None)
    passed = worst <= tol
    return CheckReport(
        "fN_intertwine",
        passed,
        margin=tol - worst,
        tolerance=tol,
        location=where if not passed else None,
        details={"residual": worst, "per_operator": per_op, "excluded_states": n_excl},
    )


def HN_commute_check(model: MultiPhotonModel, margin: int = 1, tol: float = 1e-12, detune: float = 0.1) -> CheckReport:
    """``[H, N] P`` on the interior, plus an off-resonance control with ``wp_1`` shifted by ``detune``."""
    layout, params = model.layout, model.params
    P = interior_projector(layout, margin).csr
    _, n_excl = _excluded(layout, margin)
    res = (commutator(model.hamiltonian, model.number_total).csr @ P).tocoo()
    worst = float(np.max(np.abs(res.data))) if res.nnz else 0.0
    where = None
    if res.nnz and worst > 0:
        i = int(np.argmax(np.abs(res.data)))
        where = (layout.decode(int(res.row[i])), layout.decode(int(res.col[i])))
    # control: break resonance, the residual must become g/2 * detune * |I_ij|
    wp = list(params.wp)
    wp[0] += detune
    off = ModelParams(params.ws, tuple(wp), params.g, params.alpha, params.drive)
    Hc = hamiltonian(off, layout, check_resonance=False)
    Nc = total_number(off, layout)
    rc = (commutator(Hc, Nc).csr @ P).tocoo()
    control = float(np.max(np.abs(rc.data))) if rc.nnz else 0.0
    Ielts = np.abs(interaction(layout).csr.data)
    Ielts = Ielts[Ielts > 0]
    expected = detune * abs(params.g) / 2.0 * float(Ielts.min()) if Ielts.size else 0.0
    control_ok = control >= expected * (1 - 1e-12) and control > 0
    passed = worst <= tol and control_ok
    if not passed and where is None:
        where = "off-resonance control"
    return CheckReport(
        "HN_commute",
        passed,
        margin=tol - worst,
        tolerance=tol,
        location=where if not passed else None,
        details={
            "residual": worst,
            "control_detune": detune,
            "control_residual": control,
            "control_lower_bound": expected,
            "control_passed": control_ok,
            "excluded_states": n_excl,
        },
    )


# -- hypotheses ------------------------------------------------------------------------


def _interior_vectors(layout: ModeLayout, n: int, rng: np.random.Generator, margin: int) -> np.ndarray:
    inside, _ = _excluded(layout, margin)
    U = np.zeros((layout.dim, n), dtype=np.complex128)
    k = int(inside.sum())
    U[inside] = rng.normal(size=(k, n)) + 1j * rng.normal(size=(k, n))
    return U / np.linalg.norm(U, axis=0)


def hypothesis_suite(
    model: MultiPhotonModel,
    n_samples: int = 200,
    seed: int = 0,
    tol: float = 1e-10,
    margin: int = 1,
    noise: Sequence[OperatorMatrix] | None = None,
) -> list[CheckReport]:
    """Unitarity of ``S = 1``, the dissipation identities, ``N_i = -R_i^†`` and the ``Q``/``Z`` domination.

    ``noise`` replaces the computed ``N_i`` (to exercise the failure path).
    """
    layout = model.layout
    chans = model.channels
    ops = [c.op.csr for c in chans]
    d = len(ops)
    rng = np.random.default_rng(seed)
    U = _interior_vectors(layout, n_samples, rng, margin)
    _, n_excl = _excluded(layout, margin)
    reports = []

    S = np.eye(d)
    res_s = max(np.max(np.abs(S.conj().T @ S - np.eye(d))), np.max(np.abs(S @ S.conj().T - np.eye(d))))
    reports.append(CheckReport("hyp2_S_unitary", res_s <= tol, tol - res_s, tol, None if res_s <= tol else "S", {"residual": float(res_s), "d": d}))

    K = model.K.csr
    KU = K @ U
    lhs = 2.0 * np.real(np.einsum("ij,ij->j", KU.conj(), U))
    rhs = -sum(np.sum(np.abs(R @ U) ** 2, axis=0) for R in ops)
    r1 = np.abs(lhs - rhs)
    N_ops = [N.csr for N in (noise if noise is not None else noise_coefficients(chans))]
    KsU = K.conj().T @ U
    lhs2 = 2.0 * np.real(np.einsum("ij,ij->j", KsU.conj(), U))
    rhs2 = -sum(np.sum(np.abs(N.conj().T @ U) ** 2, axis=0) for N in N_ops)
    r2 = np.abs(lhs2 - rhs2)
    worst6 = float(max(r1.max(), r2.max()))
    loc6 = None
    if worst6 > tol:
        which = "K" if r1.max() >= r2.max() else "K*"
        loc6 = {"form": which, "sample": int(np.argmax(r1 if which == "K" else r2))}
    reports.append(
        CheckReport(
            "hyp6_dissipation",
            worst6 <= tol,
            tol - worst6,
            tol,
            loc6,
            {"residual_K": float(r1.max()), "residual_Kstar": float(r2.max()), "n_samples": n_samples, "excluded_states": n_excl},
        )
    )

    worst7, loc7 = 0.0, None
    for k, (N, R) in enumerate(zip(N_ops, ops), start=1):
        diff = N + R.conj().T
        v = float(np.max(np.abs(diff.data))) if diff.nnz else 0.0
        if v > worst7:
            worst7, loc7 = v, {"channel": k, "role": chans.channel(k).role}
    reports.append(CheckReport("hyp7_noise_coefficients", worst7 == 0.0, 0.0 - worst7, 0.0, loc7, {"residual": worst7, "n_channels": d}))

    p = model.params
    k1 = max(abs(a) ** 2 for block in p.alpha for a in block)
    k2 = sum(abs(a) ** 2 for a in p.alpha[6]) + sum(abs(a) ** 2 for a in p.alpha[7])
    Q = k1 * model.number_total.csr.diagonal().real + k2
    Z = sum((R.conj().T @ R) for R in ops)
    Zd = sp.csr_matrix(Z).diagonal().real
    inside, _ = _excluded(layout, margin)
    gap = (Q - Zd)[inside]
    i = int(np.argmin(gap))
    zq = np.einsum("ij,ij->j", U.conj(), Z @ U).real
    qq = np.einsum("ij,ij->j", U.conj(), Q[:, None] * U).real
    sample_gap = float(np.min(qq - zq))
    worst_gap = float(min(gap[i], sample_gap))
    ok = worst_gap >= -tol
    loc = None
    if not ok:
        loc = {"state": layout.decode(int(np.flatnonzero(inside)[i]))} if gap[i] <= sample_gap else {"sample": int(np.argmin(qq - zq))}
    reports.append(
        CheckReport(
            "QZ_domination",
            ok,
            worst_gap,
            tol,
            loc,
            {"k1": k1, "k2": k2, "min_diagonal_gap": float(gap[i]), "min_sample_gap": sample_gap, "excluded_states": n_excl},
        )
    )
    return reports


def C_eps_profile(eps: float, n: int, m: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: L0(x, eps, n, m)


def default_suite(model: MultiPhotonModel, seed: int = 0, eps: float | None = None) -> list[CheckReport]:
    """All structural checks at their default tolerances for one model."""
    from .model import measurement_compatibility_check

    p, lay = model.params, model.layout
    if eps is None:
        eps = 0.99 * admissible_eps(p)
    r = max(p.ws + p.wp)
    k = p.n + p.m
    reports = [
        measurement_compatibility_check(p),
        HN_commute_check(model),
        fN_intertwine_check(lay, p, C_eps_profile(eps, p.n, p.m)),
        *hypothesis_suite(model, seed=seed),
        lemma_rk_check(r, k, eps),
        scriptL_bound_check(p, lay, eps),
    ]
    return reports
