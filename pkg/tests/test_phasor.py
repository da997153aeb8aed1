import numpy as np
import pytest

from adpower import models
from adpower.phasor import (
    AdmittanceMatrix,
    Phasor,
    SingularMatrixError,
    apply_fault,
    clear_fault,
    phasor_arith,
    solve_network,
)
from adpower.simulator import Simulation, init_steady_state
from adpower.tape import Tape


def c(p):
    return complex(p.to_complex())


def test_basic_arithmetic():
    assert c(phasor_arith("mul", Phasor(1.0, 0.0), Phasor(0.0, 1.0))) == 1j
    assert c(phasor_arith("div", Phasor(1.0, 1.0), Phasor(1.0, 1.0))) == pytest.approx(1.0)
    a = Phasor(0.3, -1.7)
    z = phasor_arith("mul", phasor_arith("conj", a), a)
    assert z.re == pytest.approx(0.3**2 + 1.7**2)
    assert abs(z.im) < 1e-15
    assert c(phasor_arith("scale", a, 2.0)) == pytest.approx(0.6 - 3.4j)
    assert c(phasor_arith("sub", a, a)) == 0


def test_division_by_zero_phasor():
    t = Tape(2)
    z = Phasor(t.var([1.0, 0.0]), t.var([1.0, 0.0]))
    with pytest.raises(ZeroDivisionError, match="lane 1"):
        Phasor(1.0, 0.0) / z


def test_unknown_kind():
    with pytest.raises(ValueError):
        phasor_arith("pow", Phasor(1.0), Phasor(1.0))


def test_identity_and_diagonal_solves():
    i = [Phasor(1.5, -2.0), Phasor(0.25, 4.0)]
    v = solve_network(AdmittanceMatrix.from_complex(np.eye(2)), i)
    assert [c(x) for x in v] == [1.5 - 2j, 0.25 + 4j]
    v = solve_network(AdmittanceMatrix.from_complex(np.diag([2.0, 4.0])), [Phasor(2.0), Phasor(4.0)])
    assert [c(x) for x in v] == [pytest.approx(1.0), pytest.approx(1.0)]


def test_random_4x4_residual():
    rng = np.random.default_rng(4)
    y = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4)) + 4 * np.eye(4)
    i = rng.normal(size=4) + 1j * rng.normal(size=4)
    v = np.array([c(x) for x in solve_network(AdmittanceMatrix.from_complex(y),
                                               [Phasor.from_complex(z) for z in i])])
    assert np.max(np.abs(y @ v - i)) < 1e-10


def test_pivoting_needed_and_lanes_disagree():
    # lane 0 needs a row swap, lane 1 does not
    t = Tape(2)
    a00 = Phasor(t.var([0.0, 3.0]), 0.0)
    y = AdmittanceMatrix.from_complex(np.array([[0.0, 1.0], [2.0, 1.0]]))
    rows = [list(r) for r in y.entries]
    rows[0][0] = a00
    y = y.with_entries(rows)
    v = solve_network(y, [Phasor(1.0), Phasor(3.0)])
    for lane, a in enumerate([0.0, 3.0]):
        m = np.array([[a, 1.0], [2.0, 1.0]])
        expect = np.linalg.solve(m, [1.0, 3.0])
        got = [x.to_complex()[lane] for x in v]
        np.testing.assert_allclose(got, expect, rtol=1e-14)


def test_singular_matrix_reports_lane_and_step():
    y = AdmittanceMatrix.from_complex(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(SingularMatrixError) as ei:
        solve_network(y, [Phasor(1.0), Phasor(1.0)])
    assert ei.value.step == 1 and ei.value.lane == 0


def test_fault_overlay_roundtrip_and_bounds():
    base = AdmittanceMatrix.from_complex(np.array([[2 - 1j, -1.0], [-1.0, 2.0]]))
    f = apply_fault(base, 0, Phasor(1e5, -1e5))
    diff = f.to_complex() - base.to_complex()
    assert diff[0, 0] == 1e5 - 1e5j and np.count_nonzero(diff) == 1
    np.testing.assert_array_equal(clear_fault(f).to_complex(), base.to_complex())
    np.testing.assert_array_equal(apply_fault(f, 0, Phasor(1e5, -1e5)).to_complex(), f.to_complex())
    with pytest.raises(IndexError):
        apply_fault(base, 2, Phasor(1.0))


def test_bus_voltage_collapses_during_fault(smib):
    init = init_steady_state(smib)
    sim = Simulation(smib, init)
    currents = []
    for g, s in zip(smib.generators, init.state.gen):
        inj, _ = models.gen_norton(g.params, s, smib.s_base)
        currents.append(inj)
    v = solve_network(sim.faulted(0), currents)
    assert abs(c(v[0])) < 0.01
    v0 = solve_network(sim.y_base, currents)
    np.testing.assert_allclose([c(x) for x in v0], init.bus_voltages, atol=1e-10)


def test_gradient_flow_through_solve_3bus():
    rng = np.random.default_rng(11)
    y0 = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3)) + 5 * np.eye(3)
    i = [Phasor.from_complex(z) for z in rng.normal(size=3) + 1j * rng.normal(size=3)]

    def norm2(y01_re):
        t = Tape(len(np.atleast_1d(y01_re)))
        p = t.var(y01_re)
        rows = [list(r) for r in AdmittanceMatrix.from_complex(y0).entries]
        rows[0][1] = Phasor(p, y0[0, 1].imag)
        v = solve_network(AdmittanceMatrix.from_complex(y0).with_entries(rows), i)
        loss = sum((x.abs2() for x in v), 0.0)
        return t, p, loss

    x = y0[0, 1].real
    t, p, loss = norm2(x)
    g = t.backward(loss)[p][0]
    h = 1e-6
    _, _, lp = norm2(np.array([x + h, x - h]))
    fd = (lp.value[0] - lp.value[1]) / (2 * h)
    assert g == pytest.approx(fd, rel=1e-5)
