import math

import numpy as np
import pytest

from mpo_sim import dynamics
from mpo_sim.dynamics import (
    Liouvillian,
    NumericalGuardError,
    expectation,
    liouvillian_apply,
    min_eigenvalue,
    propagate,
)
from mpo_sim.fock import QuantumState, annihilation, basis_state, make_layout, number
from mpo_sim.model import build_model, dissipator_sum

from conftest import dpo_params, loss_system, random_density


def dense_generator(model, frame, t, rho):
    """Reference ``-i[H + H_corr, rho] + sum D[R_k + f_k] rho`` with dense matrices."""
    L = Liouvillian.from_model(model, frame)
    H, ops = L.shifted(t)
    Hm = H.toarray()
    out = -1j * (Hm @ rho - rho @ Hm)
    for op in ops:
        A = op.toarray()
        AdA = A.conj().T @ A
        out += A @ rho @ A.conj().T - 0.5 * (AdA @ rho + rho @ AdA)
    return out


@pytest.mark.parametrize("frame", ["lab", "rotating"])
def test_apply_matches_dense_reference(small_dpo, frame):
    rng = np.random.default_rng(3)
    rho = random_density(small_dpo.layout.dim, rng)
    L = Liouvillian.from_model(small_dpo, frame)
    for t in (0.0, 0.37, 2.1):
        ref = dense_generator(small_dpo, frame, t, rho)
        assert np.max(np.abs(L.apply(rho, t) - ref)) < 1e-12
        assert abs(np.trace(L.apply(rho, t))) < 1e-12


def test_backends_agree(small_dpo, monkeypatch):
    rng = np.random.default_rng(4)
    D = small_dpo.layout.dim
    rho = random_density(D, rng)
    X = rng.normal(size=(D, D)) + 1j * rng.normal(size=(D, D))
    L = Liouvillian.from_model(small_dpo, "lab")
    ref = L._apply_csr(rho, 0.8)
    if dynamics.HAVE_NUMBA:
        assert L.backend == "numba"
        assert np.max(np.abs(L.apply(X, 0.8) - L._apply_csr(X, 0.8))) < 1e-12
    monkeypatch.setattr(dynamics, "HAVE_NUMBA", False)
    Ln = Liouvillian.from_model(small_dpo, "lab")
    assert Ln.backend == "numpy"
    assert np.max(np.abs(Ln.apply(rho, 0.8, hermitian=True) - ref)) < 1e-12
    # non-Hermitian input falls back to the exact sparse path
    assert np.max(np.abs(Ln.apply(X, 0.8) - L._apply_csr(X, 0.8))) < 1e-12


def test_generic_operator_channels_use_csr():
    lay = make_layout(1, 1, (3, 3))
    a, b = annihilation(lay, 1), annihilation(lay, 2)
    L = Liouvillian(number(lay, 1), [a + b], layout=lay)
    assert L.backend == "csr"
    rho = random_density(lay.dim, np.random.default_rng(0))
    A = (a + b).toarray()
    H = number(lay, 1).toarray()
    ref = -1j * (H @ rho - rho @ H) + A @ rho @ A.conj().T - 0.5 * (A.conj().T @ A @ rho + rho @ A.conj().T @ A)
    assert np.max(np.abs(liouvillian_apply(L, QuantumState.mixed(rho)) - ref)) < 1e-13
    with pytest.raises(ValueError):
        liouvillian_apply(L, basis_state(lay, (0, 0)))


def test_decay_oracle():
    lay, H, ops = loss_system(1.0, d=3)
    L = Liouvillian(H, ops, layout=lay)
    res = propagate(L, basis_state(lay, (1, 0)), [0.0, 1.0], 1e-3, observables={"n": number(lay, 1)}, leak_tol=1.0)
    assert abs(res.observables["n"][-1].real - math.exp(-1.0)) < 1e-6


def test_rk4_fourth_order():
    lay, H, ops = loss_system(1.0, d=4)
    L = Liouvillian(H + number(lay, 1), ops, layout=lay)
    psi = np.zeros(lay.dim, complex)
    psi[lay.encode((0, 0))] = psi[lay.encode((2, 0))] = 1 / math.sqrt(2)
    errs = []
    for dt in (0.2, 0.1, 0.05):
        r = propagate(L, QuantumState.pure(psi), [0.0, 2.0], dt, leak_tol=1.0, observables={"n": number(lay, 1)})
        errs.append(abs(r.observables["n"][-1].real - 2 * 0.5 * math.exp(-2.0)))
    assert 12 < errs[0] / errs[1] < 20
    assert 12 < errs[1] / errs[2] < 20


def test_propagation_invariants_and_csv(small_dpo):
    L = Liouvillian.from_model(small_dpo, "lab")
    obs = {"n_a1": number(small_dpo.layout, 1)}
    res = propagate(L, basis_state(small_dpo.layout, (1, 1, 0)), np.arange(0, 2.01, 0.5), 0.05, observables=obs, leak_tol=1.0)
    assert res.trace_err.max() < 1e-12
    assert res.pos_err.max() < 1e-8
    for s in res.states:
        s.validate(tol=1e-10, tol_pos=1e-8)
    lines = res.csv().splitlines()
    assert lines[0] == "t, trace_err, pos_err, edge_leak, n_a1"
    assert len(lines) == 6
    assert float(lines[-1].split(",")[0]) == pytest.approx(2.0)


def test_halving_check(small_dpo):
    L = Liouvillian.from_model(small_dpo, "rotating")
    res = propagate(L, basis_state(small_dpo.layout, (1, 0, 0)), [0.0, 1.0], 0.1, leak_tol=1.0, check_halving=True,
                    observables={"n": number(small_dpo.layout, 1)})
    assert res.halving_diff is not None and res.halving_diff < 1e-5


def test_guards():
    lay, H, ops = loss_system(1.0, d=3)
    L = Liouvillian(H, ops, layout=lay)
    with pytest.raises(NumericalGuardError, match="truncation-edge"):
        propagate(L, basis_state(lay, (2, 0)), [0.0, 0.1], 0.01, leak_tol=1e-6)
    with pytest.raises(ValueError, match="multiple of dt"):
        propagate(L, basis_state(lay, (1, 0)), [0.0, 0.105], 0.01, leak_tol=1.0)
    with pytest.raises(ValueError):
        propagate(L, basis_state(lay, (1, 0)), [0.0, 1.0], -0.1)
    # a wildly unstable step violates the trace guard
    Lbig = Liouvillian(H, [30.0 * o for o in ops], layout=lay)
    with pytest.raises(NumericalGuardError, match="trace drift"):
        propagate(Lbig, basis_state(lay, (1, 0)), [0.0, 1.0], 0.1, leak_tol=1.0)


def test_heisenberg_duality(small_dpo):
    """``Tr(X L[rho]) = Tr(L^*[X] rho)`` with the adjoint generator built from the same operators."""
    rng = np.random.default_rng(7)
    D = small_dpo.layout.dim
    rho = random_density(D, rng)
    X = rng.normal(size=(D, D)) + 1j * rng.normal(size=(D, D))
    X = X + X.conj().T
    L = Liouvillian.from_model(small_dpo, "lab")
    t = 0.4
    H, ops = L.shifted(t)
    Hm = H.toarray()
    adj = 1j * (Hm @ X - X @ Hm)
    for op in ops:
        A = op.toarray()
        AdA = A.conj().T @ A
        adj += A.conj().T @ X @ A - 0.5 * (AdA @ X + X @ AdA)
    lhs = np.trace(X @ L.apply(rho, t))
    rhs = np.trace(adj @ rho)
    assert abs(lhs - rhs) < 1e-11


def test_expectation_and_min_eig():
    lay = make_layout(1, 1, (3, 2))
    psi = basis_state(lay, (2, 1))
    N = number(lay, 1)
    assert expectation(psi, N) == pytest.approx(2.0)
    assert expectation(psi.density(), N) == pytest.approx(2.0)
    rho = np.diag([0.5, 0.6, -0.1, 0, 0, 0]).astype(complex)
    assert min_eigenvalue(rho) == pytest.approx(-0.1)
    assert min_eigenvalue(rho, dense_limit=2) == pytest.approx(-0.1, abs=1e-8)


def test_drive_sets_dissipator_sum(small_dpo):
    L = Liouvillian.from_model(small_dpo, "lab")
    assert (L.R - dissipator_sum(small_dpo.channels)).max_abs() < 1e-14
    assert L.drive_hamiltonian(0.0) is not None
    Lr = Liouvillian.from_model(build_model(dpo_params(lam=0.0), small_dpo.layout), "lab")
    assert Lr.drive_hamiltonian(0.0) is None
