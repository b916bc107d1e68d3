"""Direct checks of the CDCL backend against exhaustive truth tables."""

import itertools

import numpy as np
import pytest

from rminfer.solver import SatSolver, SolverLimitError


def brute_force_models(n_vars, clauses):
    models = []
    for bits in itertools.product([False, True], repeat=n_vars):
        assign = (None,) + bits
        ok = True
        for cl in clauses:
            if not any(assign[abs(l)] == (l > 0) for l in cl):
                ok = False
                break
        if ok:
            models.append(bits)
    return models


def enumerate_with_solver(n_vars, clauses):
    solver = SatSolver()
    solver.ensure_vars(n_vars)
    for cl in clauses:
        solver.add_clause(cl)
    found = []
    while solver.solve():
        m = solver.model()
        found.append(tuple(bool(m[v]) for v in range(1, n_vars + 1)))
        solver.add_clause([-v if m[v] else v for v in range(1, n_vars + 1)])
    return found


def test_simple_sat():
    s = SatSolver()
    s.add_clause([1, 2])
    s.add_clause([-1, 2])
    assert s.solve()
    assert s.model()[2]


def test_simple_unsat():
    s = SatSolver()
    for cl in ([1, 2], [-1, 2], [1, -2], [-1, -2]):
        s.add_clause(cl)
    assert not s.solve()


def test_unit_conflict_is_unsat():
    s = SatSolver()
    s.add_clause([3])
    s.add_clause([-3])
    assert not s.solve()


def test_empty_clause_is_unsat():
    s = SatSolver()
    s.add_clause([1, 2])
    s.add_clause([])
    assert not s.solve()


def test_tautology_is_dropped():
    s = SatSolver()
    s.add_clause([1, -1])
    assert s.solve()


def test_assumptions():
    s = SatSolver()
    s.add_clause([1, 2])
    s.add_clause([-1, -2])
    assert s.solve(assumptions=[1])
    assert s.model()[1] and not s.model()[2]
    assert s.solve(assumptions=[-1])
    assert not s.model()[1] and s.model()[2]
    assert not s.solve(assumptions=[1, 2])
    assert s.solve()  # no assumptions: still satisfiable


def test_pigeonhole_unsat():
    # 4 pigeons, 3 holes: var(p, h) = 3*p + h + 1
    s = SatSolver()
    for p in range(4):
        s.add_clause([3 * p + h + 1 for h in range(3)])
    for h in range(3):
        for p1 in range(4):
            for p2 in range(p1 + 1, 4):
                s.add_clause([-(3 * p1 + h + 1), -(3 * p2 + h + 1)])
    assert not s.solve()


def test_conflict_budget():
    s = SatSolver()
    for p in range(7):
        s.add_clause([6 * p + h + 1 for h in range(6)])
    for h in range(6):
        for p1 in range(7):
            for p2 in range(p1 + 1, 7):
                s.add_clause([-(6 * p1 + h + 1), -(6 * p2 + h + 1)])
    with pytest.raises(SolverLimitError):
        s.solve(max_conflicts=5)


@pytest.mark.parametrize("seed", range(20))
def test_random_3sat_model_sets_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    n_vars = rng.integers(4, 9)
    n_clauses = rng.integers(5, 30)
    clauses = []
    for _ in range(n_clauses):
        vs = rng.choice(np.arange(1, n_vars + 1), size=3, replace=False)
        signs = rng.integers(0, 2, size=3) * 2 - 1
        clauses.append([int(v * s) for v, s in zip(vs, signs)])
    expected = sorted(brute_force_models(int(n_vars), clauses))
    got = sorted(enumerate_with_solver(int(n_vars), clauses))
    assert got == expected


def test_incremental_addition_between_solves():
    s = SatSolver()
    s.ensure_vars(3)
    s.add_clause([1, 2, 3])
    assert s.solve()
    s.add_clause([-1])
    s.add_clause([-2])
    assert s.solve()
    assert s.model()[3]
    s.add_clause([-3])
    assert not s.solve()


def test_decision_var_restriction_still_complete_when_rest_propagates():
    # y is functionally determined by x through equivalence clauses
    s = SatSolver()
    s.ensure_vars(2)
    s.add_clause([-1, 2])
    s.add_clause([1, -2])
    s.set_decision_vars([1])
    seen = set()
    while s.solve():
        m = s.model()
        seen.add((bool(m[1]), bool(m[2])))
        s.add_clause([-1 if m[1] else 1])
    assert seen == {(True, True), (False, False)}


def test_iter_clauses_roundtrip():
    s = SatSolver()
    s.add_clause([2])
    s.add_clause([1, -3])
    s.add_clause([-2, 3, 4])
    got = sorted(tuple(sorted(c)) for c in s.iter_clauses())
    assert got == [(-3, 1), (-2, 3, 4), (2,)]
