from itertools import combinations

import numpy as np
import pytest

from diagengine.errors import MatchingError, ModelValidationError
from diagengine.model_io import loads_model
from diagengine.structural import (ALGEBRAIC, INTEGRAL, FaultSignatureMatrix, StructuralModel, compute_matching,
                                   default_residual_equation, design_residuals, dm_decompose,
                                   enumerate_msos, fault_signature, isolability, redundancy,
                                   select_tests)

EQS = [f"e{i}" for i in range(1, 13)]
M1 = frozenset({"e1", "e4", "e5", "e7", "e8", "e9", "e10", "e11"})
M2 = frozenset({"e1", "e2", "e3", "e5", "e6", "e7", "e8", "e11", "e12"})
M6 = frozenset(EQS) - {"e5", "e11"}
M3 = frozenset(EQS) - {"e8"}
M4 = frozenset(EQS) - {"e7"}
M5 = frozenset(EQS) - {"e1"}


def brute_force_msos(model):
    """Minimal proper structurally over-determined sets by exhaustive search."""
    pso = []
    for k in range(1, len(model.equations) + 1):
        for combo in combinations(model.equations, k):
            subset = frozenset(combo)
            if any(found <= subset for found in pso):
                continue
            if set(dm_decompose(model, subset).over_equations) == subset:
                pso.append(subset)
    return set(pso)


# =============================================================================
# MODEL
# =============================================================================

def test_bundled_models_load(three_tank, two_tank):
    assert len(three_tank.equations) == 12
    assert three_tank.knowns == ("y1", "y2", "y3")
    assert len(two_tank.faults) == 10
    assert two_tank.differential_constraints() == {"e13": ("h1", "dh1"), "e14": ("h2", "dh2")}


def test_dangling_edge_rejected():
    with pytest.raises(ModelValidationError, match="dangling edge"):
        StructuralModel("m", ["e1"], ["x"], [], [], {("e1", "x"), ("e2", "x")})


def test_duplicate_and_clashing_names_rejected():
    with pytest.raises(ModelValidationError, match="duplicate"):
        StructuralModel("m", ["e1", "e1"], ["x"], [], [], {("e1", "x")})
    with pytest.raises(ModelValidationError, match="both known and unknown"):
        StructuralModel("m", ["e1"], ["x"], ["x"], [], {("e1", "x")})


def test_dynamic_pair_must_link_state_and_derivative():
    with pytest.raises(ModelValidationError, match="must link exactly"):
        StructuralModel("m", ["e1", "e2"], ["x", "dx", "z"], [], [],
                        {("e1", "x"), ("e1", "dx"), ("e1", "z"), ("e2", "z")},
                        dynamic_pairs=[("x", "dx", "e1")])


def test_incidence_frame(three_tank):
    frame = three_tank.incidence_frame()
    assert frame.shape == (12, 19)
    assert frame.loc["e7", "y1"] == 1 and frame.loc["e7", "p1"] == 1
    assert frame.loc["e7"].sum() == 2


# =============================================================================
# DULMAGE-MENDELSOHN
# =============================================================================

def test_dm_full_three_tank(three_tank):
    dm = dm_decompose(three_tank)
    assert dm.redundancy == 2
    assert dm.under_equations == ()
    assert set(dm.over_equations) == set(three_tank.equations)
    assert redundancy(three_tank) == 2


def test_dm_of_exactly_determined_subset(three_tank):
    dm = dm_decompose(three_tank, M1 - {"e7"})
    assert dm.over_equations == ()
    assert dm.redundancy == 0
    assert dm.matching_size == 7


def test_dm_under_determined_part():
    model = loads_model("model m\nunknowns a b c\nknowns y\nequation e1 a b\nequation e2 c y\nequation e3 c\n")
    dm = dm_decompose(model)
    assert dm.under_equations == ("e1",)
    assert set(dm.under_unknowns) == {"a", "b"}
    assert dm.over_equations == ("e2", "e3")
    assert dm.redundancy == 1


# =============================================================================
# MSO ENUMERATION
# =============================================================================

def test_three_tank_msos(three_tank):
    msos = enumerate_msos(three_tank)
    assert msos == [M1, M2, M6, M3, M4, M5]


def test_three_tank_msos_match_exhaustive_search(three_tank):
    assert set(enumerate_msos(three_tank)) == brute_force_msos(three_tank)


def test_two_tank_msos_are_minimal(two_tank):
    msos = enumerate_msos(two_tank)
    assert msos
    assert len(set(msos)) == len(msos)
    for mso in msos:
        assert set(dm_decompose(two_tank, mso).over_equations) == set(mso)
        assert redundancy(two_tank, mso) == 1
        for e in mso:
            assert dm_decompose(two_tank, mso - {e}).over_equations == ()


@pytest.mark.slow
def test_two_tank_msos_match_exhaustive_search(two_tank):
    assert set(enumerate_msos(two_tank)) == brute_force_msos(two_tank)


def random_model(rng):
    n_x = int(rng.integers(2, 6))
    n_e = n_x + int(rng.integers(1, 4))
    unknowns = [f"x{i}" for i in range(n_x)]
    equations = [f"e{i}" for i in range(n_e)]
    edges = set()
    for k, e in enumerate(equations):
        size = int(rng.integers(1, min(3, n_x) + 1))
        for v in rng.choice(unknowns, size=size, replace=False):
            edges.add((e, str(v)))
        edges.add((e, f"f{k}"))
    return StructuralModel("random", equations, unknowns, [], [f"f{k}" for k in range(n_e)], edges)


@pytest.mark.parametrize("seed", range(60))
def test_msos_match_exhaustive_search_on_random_models(seed):
    model = random_model(np.random.default_rng(seed))
    msos = enumerate_msos(model)
    assert set(msos) == brute_force_msos(model)
    assert len(set(msos)) == len(msos)


def test_no_redundancy_gives_no_msos():
    model = loads_model("model m\nunknowns x\nknowns y\nequation e1 x y\n")
    assert enumerate_msos(model) == []


def test_msos_are_deterministic(two_tank):
    assert enumerate_msos(two_tank) == enumerate_msos(two_tank)


# =============================================================================
# FAULT SIGNATURE / ISOLABILITY / TEST SELECTION
# =============================================================================

def test_fault_signature_three_tank(three_tank):
    fsm = fault_signature(enumerate_msos(three_tank), three_tank)
    frame = fsm.to_frame()
    assert list(frame.index) == ["r0", "r1", "r2", "r3", "r4", "r5"]
    assert list(frame.columns) == ["fV1", "fV2", "fV3", "fT1", "fT2", "fT3"]
    assert frame.loc["r0"].tolist() == [1, 0, 0, 1, 1, 0]
    assert frame.loc["r1"].tolist() == [1, 1, 1, 0, 1, 1]
    assert frame.loc["r2"].tolist() == [1, 1, 1, 1, 0, 1]
    assert frame.loc["r3"].sum() == 6 and frame.loc["r4"].sum() == 6
    assert frame.loc["r5"].tolist() == [0, 1, 1, 1, 1, 1]
    assert fsm.detectable().all()


def test_isolability_three_tank(three_tank):
    iso = isolability(fault_signature(enumerate_msos(three_tank), three_tank))
    frame = iso.to_frame()
    assert np.all(np.diag(iso.matrix))
    for a, b in (("fV2", "fV3"), ("fV2", "fT3"), ("fV3", "fT3")):
        assert frame.loc[a, b] == 1 and frame.loc[b, a] == 1
    assert frame.loc["fV1", "fT1"] == 0
    assert iso.isolated_pairs() == 24


def test_isolability_subset_relation():
    model = loads_model("model m\nunknowns x\nknowns y z\nfaults f1 f2\n"
                        "equation e1 x y f1\nequation e2 x z f2\nequation e3 x\n")
    fsm = fault_signature([frozenset({"e1", "e2"}), frozenset({"e2", "e3"})], model)
    iso = isolability(fsm).to_frame()
    # every residual sensitive to f1 also sees f2, not the other way round
    assert iso.loc["f1", "f2"] == 1
    assert iso.loc["f2", "f1"] == 0


def test_select_tests_minimal(three_tank):
    msos = enumerate_msos(three_tank)
    fsm = fault_signature(msos, three_tank)
    rows = select_tests(msos, fsm)
    assert rows == [0, 1, 2, 5]
    sub = fsm.rows(rows)
    assert isolability(sub) == isolability(fsm)
    assert sub.detectable().all()


def test_select_tests_budget(three_tank):
    msos = enumerate_msos(three_tank)
    fsm = fault_signature(msos, three_tank)
    rows = select_tests(msos, fsm, budget=3)
    assert len(rows) == 3
    sub = fsm.rows(rows)
    assert sub.detectable().all()
    assert isolability(sub).isolated_pairs() < isolability(fsm).isolated_pairs()


def test_select_tests_greedy_fallback(three_tank):
    msos = enumerate_msos(three_tank)
    fsm = fault_signature(msos, three_tank)
    rows = select_tests(msos, fsm, max_combinations=3)
    sub = fsm.rows(rows)
    assert isolability(sub) == isolability(fsm)


def test_select_tests_keeps_detectability():
    fsm = FaultSignatureMatrix(
        tuple(f"r{i}" for i in range(5)),
        ("f1", "f2", "f3", "f4"),
        np.array([[0, 0, 0, 0],
                  [0, 0, 0, 0],
                  [1, 1, 0, 0],
                  [1, 0, 1, 0],
                  [1, 1, 1, 1]], dtype=bool),
    )
    # rows 2 and 3 alone give the same isolability but never see f4
    assert isolability(fsm.rows([2, 3])) == isolability(fsm)
    assert select_tests(range(5), fsm) == [2, 3, 4]


def _random_fsm(rng):
    n_r, n_f = int(rng.integers(2, 8)), int(rng.integers(2, 7))
    return FaultSignatureMatrix(tuple(f"r{i}" for i in range(n_r)), tuple(f"f{j}" for j in range(n_f)),
                                rng.random((n_r, n_f)) < 0.45)


def brute_force_isolability(fsm):
    cols = [set(np.flatnonzero(fsm.matrix[:, j])) for j in range(len(fsm.faults))]
    return np.array([[ci <= cj for cj in cols] for ci in cols])


def brute_force_selection(fsm, budget=None):
    n = len(fsm.residuals)
    target, detectable = isolability(fsm), fsm.detectable()
    subsets = [c for k in range(1, n + 1) for c in combinations(range(n), k)]
    keeping = [c for c in subsets
               if np.all(fsm.rows(c).detectable() >= detectable) and isolability(fsm.rows(c)) == target]
    best = min(keeping, key=lambda c: (len(c), c))
    if budget is None or len(best) <= budget:
        return list(best)
    scored = [(int(fsm.rows(c).detectable().sum()), isolability(fsm.rows(c)).isolated_pairs(), c)
              for c in combinations(range(n), budget)]
    top = max(s[:2] for s in scored)
    return list(min(c for d, p, c in scored if (d, p) == top))


@pytest.mark.parametrize("seed", range(40))
def test_isolability_is_support_inclusion_preorder(seed):
    fsm = _random_fsm(np.random.default_rng(seed))
    iso = isolability(fsm).matrix
    assert np.array_equal(iso, brute_force_isolability(fsm))
    assert np.all(np.diag(iso))
    # transitive: I_ij and I_jk imply I_ik
    chained = (iso.astype(int) @ iso.astype(int)) > 0
    assert np.all(iso[chained])
    # fewer rows never isolate more
    sub = isolability(fsm.rows(range(len(fsm.residuals) - 1))).matrix
    assert np.all(sub[iso])


@pytest.mark.parametrize("seed", range(40))
def test_select_tests_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    fsm = _random_fsm(rng)
    n = len(fsm.residuals)
    assert select_tests(range(n), fsm) == brute_force_selection(fsm)
    budget = int(rng.integers(1, n + 1))
    assert select_tests(range(n), fsm, budget=budget) == brute_force_selection(fsm, budget)


# =============================================================================
# MATCHING
# =============================================================================

def _assert_computable(model, spec):
    """Every unknown used by a step is integrated or computed earlier."""
    integrated = {v for (e, v), c in zip(spec.sequence, spec.causality) if c == INTEGRAL}
    known = set(integrated)
    for (e, v), c in zip(spec.sequence, spec.causality):
        if c != INTEGRAL:
            assert model.unknowns_of(e) - {v} <= known, f"{e} needs {model.unknowns_of(e) - {v} - known}"
        known.add(v)
    assert model.unknowns_of(spec.residual_equation) <= known


def test_matching_three_tank_m1(three_tank):
    spec = compute_matching(three_tank, M1, "e7", name="r0")
    assignment = dict(spec.sequence)
    assert assignment == {"e10": "p1", "e11": "p2", "e9": "q0", "e8": "q2",
                          "e1": "q1", "e4": "dp1", "e5": "dp2"}
    causality = dict(zip([e for e, _ in spec.sequence], spec.causality))
    assert causality["e10"] == INTEGRAL and causality["e11"] == INTEGRAL
    assert causality["e1"] == ALGEBRAIC
    assert spec.target == "y1"
    assert spec.inputs == ("y2", "y3")
    assert spec.sensitive_faults() == ("fV1", "fT1", "fT2")
    _assert_computable(three_tank, spec)


def test_matching_every_mso_is_computable(three_tank, two_tank):
    for model in (three_tank, two_tank):
        msos = enumerate_msos(model)
        for spec in design_residuals(model, msos):
            assert spec.residual_equation in spec.mso
            assert len(spec.sequence) == len(spec.mso) - 1
            _assert_computable(model, spec)


def test_matching_is_deterministic(two_tank):
    msos = enumerate_msos(two_tank)
    assert design_residuals(two_tank, msos) == design_residuals(two_tank, msos)


def test_residual_equation_outside_mso(three_tank):
    with pytest.raises(MatchingError):
        compute_matching(three_tank, M1, "e12")


def test_unmatchable_residual_equation_reports_unknowns():
    model = loads_model("model m\nunknowns x z\nknowns y w\n"
                        "equation e1 x y\nequation e2 x w\nequation e3 z\n")
    mso = frozenset({"e1", "e2", "e3"})
    with pytest.raises(MatchingError) as info:
        compute_matching(model, mso, "e3")
    assert info.value.unmatched == ("z",)


def test_default_residual_equation_is_a_measurement(three_tank):
    assert default_residual_equation(three_tank, M1) == "e7"


def test_spec_round_trips_through_dict(three_tank):
    spec = compute_matching(three_tank, M2, "e7", name="r1")
    assert type(spec).from_dict(spec.to_dict()) == spec
