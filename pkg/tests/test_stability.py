import numpy as np
import pytest

from itots.lmi import Status, check_solution, solve
from itots.stability import (COROLLARY1, THEOREM1, ModelInvalid, ParamSlot, RegionSweep,
                             SweepAxis, analyze, build_corollary1, build_theorem1,
                             certificate_values, quadratic_as_line_integral, read_sweep_csv, sweep)
from itots.tsmodel import BetaBounds, Complement, Gaussian, MembershipFamily, TSModel, beta_bounds

from conftest import example1


def single_rule(A, C=None):
    fam = MembershipFamily((Gaussian(0.5, 1.0), Complement()))
    n = len(A)
    return TSModel(A=[A], C=[np.zeros((n, n)) if C is None else C], ordinals=[[1, 1]],
                   families=[fam, fam])


def test_theorem1_size_example1(ex1):
    prob = build_theorem1(ex1, beta_bounds(ex1))
    assert len(prob.space) == 1 + 4 + 2 + 10 * 3
    assert len(prob.constraints) == 4 + 4 + 16 + 1
    assert prob.block_sizes()[-1] == 8


def test_theorem1_slack_blocks_aliased(ex1):
    Q = build_theorem1(ex1, 0.1).handles["Q"]
    for i in range(4):
        for j in range(4):
            assert Q[(i, j)] is Q[(j, i)]


@pytest.mark.parametrize("beta", [0.0, 0.1])
def test_theorem1_rule_block_matches_formula(ex1, rng, beta):
    prob = build_theorem1(ex1, beta)
    h = prob.handles
    x = rng.standard_normal(len(prob.space))
    D = h["D"].value(x)
    for con in prob.constraints:
        if not con.label.startswith("rule("):
            continue
        i, j = (int(t) - 1 for t in con.label[5:-3].split(","))
        Pj = h["P"][j].evaluate(x)
        A, C = ex1.A[i], ex1.C[i]
        ref = Pj @ A + A.T @ Pj + C.T @ (Pj + beta * D) @ C + h["Q"][(i, j)].evaluate(x)
        np.testing.assert_allclose(con.expr.evaluate(x), -ref, atol=1e-12)


def test_theorem1_needs_full_rule_base():
    with pytest.raises(ModelInvalid):
        build_theorem1(single_rule(-np.eye(2)), 0.0)


def test_corollary1_hurwitz_single_rule():
    res = analyze(single_rule(np.array([[-1.0, 2.0], [0.0, -3.0]])), COROLLARY1)
    assert res.feasible and res.certificate.valid(single_rule(np.array([[-1.0, 2.0], [0.0, -3.0]])))


def test_corollary1_unstable_single_rule():
    res = analyze(single_rule(np.eye(2)), COROLLARY1)
    assert not res.feasible
    assert res.status == Status.INFEASIBLE
    assert res.letter == "I"


def test_theorem1_certificate_example1(ex1_analysis):
    assert ex1_analysis.feasible
    cert = ex1_analysis.certificate
    inv = cert.invariants()
    assert min(inv.values()) >= -1e-9
    assert np.linalg.eigvalsh(cert.theta())[0] > 0
    np.testing.assert_array_equal(np.diag(cert.Pbar), 0.0)
    for key, Qij in cert.Q.items():
        np.testing.assert_array_equal(Qij, cert.Q[(key[1], key[0])])


def test_theorem1_requires_beta(ex1):
    with pytest.raises(ValueError):
        analyze(ex1, THEOREM1, None)


def test_strongly_unstable_vertex_infeasible_for_both():
    model = example1(a=2.0, b=-1.0)
    assert analyze(model, THEOREM1, beta_bounds(model)).letter == "I"
    assert analyze(model, COROLLARY1).letter == "I"


def test_line_integral_strictly_more_general_at_a_point():
    # located by the default sweep; both tests agree elsewhere on the diagonal
    model = example1(a=-0.5, b=-0.5)
    assert analyze(model, THEOREM1, beta_bounds(model)).letter == "F"
    assert analyze(model, COROLLARY1).letter == "I"


def test_quadratic_embeds_in_line_integral(ex1):
    res = analyze(ex1, COROLLARY1)
    assert res.feasible
    embedded = quadratic_as_line_integral(ex1, res.certificate)
    prob = build_theorem1(ex1, 0.0)
    values = certificate_values(prob, ex1, embedded)
    assert min(check_solution(prob, values)) >= -1e-9


def test_certificate_scaling(ex1, ex1_analysis):
    # every constraint is homogeneous in the decision variables
    prob = build_theorem1(ex1, beta_bounds(ex1))
    values = certificate_values(prob, ex1, ex1_analysis.certificate)
    base = min(check_solution(prob, values))
    assert base >= -1e-9
    for c in (1.5, 4.0, 100.0):
        assert min(check_solution(prob, c * values)) >= base - 1e-9


def test_sweep_axis_values():
    ax = SweepAxis("a", -2.0, 2.0, 0.1)
    vals = ax.values()
    assert len(vals) == 41 and vals[0] == -2.0 and vals[-1] == 2.0
    assert len(SweepAxis("b", -2.0, 0.5, 0.1).values()) == 26
    assert len(SweepAxis("c", 1.0, 1.0, 0.1).values()) == 1


def test_small_sweep_and_csv_round_trip(ex1):
    slots = [ParamSlot("a", "A", 1, 2, 2), ParamSlot("b", "A", 4, 1, 1)]
    axes = [SweepAxis("a", -1.0, 0.0, 0.5), SweepAxis("b", -0.5, -0.5, 0.1)]
    res = sweep(ex1, slots, axes)
    assert [(c[0], c[1]) for c in res.cells] == [(-1.0, -0.5), (-0.5, -0.5), (0.0, -0.5)]
    assert res.inclusion_violations() == []
    text = res.to_csv()
    assert text.splitlines()[0] == "a,b,theorem1,corollary1"
    assert read_sweep_csv(text) == res.cells
    assert sweep(ex1, slots, axes).to_csv() == text
    counts = res.counts()
    assert sum(counts[f"theorem1_{x}"] for x in "FIX") == 3


def test_one_cell_sweep(ex1):
    slots = [ParamSlot("a", "A", 1, 2, 2), ParamSlot("b", "A", 4, 1, 1)]
    axes = [SweepAxis("a", -1.0, -1.0, 0.1), SweepAxis("b", -1.0, -1.0, 0.1)]
    text = sweep(ex1, slots, axes).to_csv()
    assert len(text.splitlines()) == 2


def test_inclusion_violation_reported():
    res = RegionSweep((SweepAxis("a", 0, 0, 1), SweepAxis("b", 0, 1, 1)),
                      [(0.0, 0.0, "I", "F"), (0.0, 1.0, "X", "F")])
    # solver failures are excluded from the inclusion property
    assert res.inclusion_violations() == [(0.0, 0.0, "I", "F")]


def test_param_slot_apply(ex1):
    model = ex1.replace()
    ParamSlot("b", "A", 4, 1, 1).apply(model, 0.25)
    assert model.A[3][0, 0] == 0.25 and ex1.A[3][0, 0] == -1.0


def test_solver_status_passthrough(ex1):
    sol = solve(build_corollary1(ex1))
    assert sol.status == Status.OPTIMAL


def test_parallel_sweep_matches_serial(ex1):
    slots = [ParamSlot("a", "A", 1, 2, 2), ParamSlot("b", "A", 4, 1, 1)]
    axes = [SweepAxis("a", -0.6, -0.5, 0.1), SweepAxis("b", -0.5, -0.4, 0.1)]
    serial = sweep(ex1, slots, axes, workers=1).to_csv()
    assert sweep(ex1, slots, axes, workers=2).to_csv() == serial
