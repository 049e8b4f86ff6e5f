"""
Diagnosis Engine — Structural Analysis
========================================
Structural models as bipartite equation/variable graphs, and the analyses
built on them: Dulmage-Mendelsohn decomposition, MSO enumeration, fault
signature and isolability matrices, test selection, and matching-based
residual design.

Dynamic variables are modelled as a state and a derivative unknown joined by
an explicit differential-constraint equation, so the graph stays purely
algebraic. Causality is only decided when a residual is matched.

Every result is ordered by declaration order, so repeated runs agree.
"""

from dataclasses import dataclass, field
from itertools import combinations

import networkx as nx
import numpy as np
import pandas as pd

from .errors import MatchingError, ModelValidationError
from .logging_utils import setup_logger

logger = setup_logger(__name__)

ALGEBRAIC = "algebraic"
INTEGRAL = "integral"
DERIVATIVE = "derivative"


# =============================================================================
# MODEL
# =============================================================================

@dataclass(frozen=True)
class StructuralModel:
    """
    Bipartite structural model with fault and known-variable annotations.

    edges holds (equation, variable) incidences where the variable is an
    unknown, a known signal or a fault. dynamic_pairs holds
    (state, derivative, equation) triples, the equation being the
    differential constraint linking the two unknowns.
    """

    name: str
    equations: tuple
    unknowns: tuple
    knowns: tuple
    faults: tuple
    edges: frozenset
    dynamic_pairs: tuple = ()

    def __post_init__(self):
        for attr in ("equations", "unknowns", "knowns", "faults"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        object.__setattr__(self, "edges", frozenset((str(e), str(v)) for e, v in self.edges))
        object.__setattr__(self, "dynamic_pairs", tuple(tuple(p) for p in self.dynamic_pairs))
        self._validate()

        unknown_set, known_set = set(self.unknowns), set(self.knowns)
        by_eq = {e: ([], [], []) for e in self.equations}
        order = {v: i for i, v in enumerate(self.unknowns + self.knowns + self.faults)}
        for e, v in sorted(self.edges, key=lambda edge: order[edge[1]]):
            slot = 0 if v in unknown_set else 1 if v in known_set else 2
            by_eq[e][slot].append(v)
        object.__setattr__(self, "_unknowns_of", {e: frozenset(s[0]) for e, s in by_eq.items()})
        object.__setattr__(self, "_knowns_of", {e: tuple(s[1]) for e, s in by_eq.items()})
        object.__setattr__(self, "_faults_of", {e: tuple(s[2]) for e, s in by_eq.items()})
        object.__setattr__(self, "_eq_index", {e: i for i, e in enumerate(self.equations)})
        object.__setattr__(self, "_var_index", {v: i for i, v in enumerate(self.unknowns)})

    def _validate(self):
        for label, names in (("equations", self.equations), ("unknowns", self.unknowns),
                             ("knowns", self.knowns), ("faults", self.faults)):
            if len(set(names)) != len(names):
                raise ModelValidationError(f"duplicate identifiers in {label}")
        unknowns, knowns, faults = set(self.unknowns), set(self.knowns), set(self.faults)
        if unknowns & knowns:
            raise ModelValidationError(f"variables both known and unknown: {sorted(unknowns & knowns)}")
        if faults & (unknowns | knowns):
            raise ModelValidationError(f"fault ids clash with variables: {sorted(faults & (unknowns | knowns))}")

        equations = set(self.equations)
        variables = unknowns | knowns | faults
        for e, v in sorted(self.edges):
            if e not in equations:
                raise ModelValidationError(f"dangling edge ({e}, {v}): unknown equation {e}")
            if v not in variables:
                raise ModelValidationError(f"dangling edge ({e}, {v}): undeclared variable {v}")

        seen_eqs, seen_states = set(), set()
        for pair in self.dynamic_pairs:
            if len(pair) != 3:
                raise ModelValidationError(f"dynamic pair must be (state, derivative, equation): {pair}")
            state, derivative, eq = pair
            if state == derivative:
                raise ModelValidationError(f"dynamic pair {pair}: state and derivative must differ")
            if state not in unknowns or derivative not in unknowns:
                raise ModelValidationError(f"dynamic pair {pair}: state and derivative must be unknowns")
            if eq not in equations:
                raise ModelValidationError(f"dynamic pair {pair}: unknown equation {eq}")
            eq_unknowns = {v for e, v in self.edges if e == eq and v in unknowns}
            if eq_unknowns != {state, derivative}:
                raise ModelValidationError(
                    f"dynamic pair {pair}: {eq} must link exactly {state} and {derivative}")
            if eq in seen_eqs or state in seen_states:
                raise ModelValidationError(f"dynamic pair {pair}: state or equation already paired")
            seen_eqs.add(eq)
            seen_states.add(state)

    # -------------------------------------------------------------------------
    # Lookups
    # -------------------------------------------------------------------------

    def unknowns_of(self, equation):
        return self._unknowns_of[equation]

    def knowns_of(self, equation):
        """Known variables of an equation, in declaration order."""
        return self._knowns_of[equation]

    def faults_of(self, equation):
        return self._faults_of[equation]

    def equation_index(self, equation):
        return self._eq_index[equation]

    def sort_equations(self, equations):
        return tuple(sorted(equations, key=self._eq_index.__getitem__))

    def sort_unknowns(self, unknowns):
        return tuple(sorted(unknowns, key=self._var_index.__getitem__))

    def differential_constraints(self):
        """{equation: (state, derivative)} for every dynamic pair."""
        return {eq: (state, derivative) for state, derivative, eq in self.dynamic_pairs}

    def incidence_frame(self):
        """Equation x variable 0/1 incidence as a DataFrame."""
        columns = list(self.unknowns + self.knowns + self.faults)
        frame = pd.DataFrame(0, index=list(self.equations), columns=columns, dtype=int)
        for e, v in self.edges:
            frame.loc[e, v] = 1
        return frame


# =============================================================================
# DULMAGE-MENDELSOHN DECOMPOSITION
# =============================================================================

@dataclass(frozen=True)
class DmPartition:
    """Under-, exactly- and over-determined parts of a (sub)model."""

    under_equations: tuple
    under_unknowns: tuple
    exact_equations: tuple
    exact_unknowns: tuple
    over_equations: tuple
    over_unknowns: tuple
    matching_size: int

    @property
    def redundancy(self):
        return len(self.over_equations) - len(self.over_unknowns)


def _maximum_matching(eq_vars):
    """Hopcroft-Karp maximum matching as an {equation: variable} dict."""
    graph = nx.Graph()
    top = [("e", e) for e in eq_vars]
    graph.add_nodes_from(top)
    for e, variables in eq_vars.items():
        for v in variables:
            graph.add_edge(("e", e), ("x", v))
    matching = nx.bipartite.hopcroft_karp_matching(graph, top_nodes=top)
    return {node[1]: matching[node][1] for node in top if node in matching}


def _dm_sets(eq_vars, extra_unknowns=()):
    """
    Canonical DM parts of an incidence {equation: unknowns}.

    Returns (under_eqs, under_vars, over_eqs, over_vars, matching_size).
    The over-determined part is everything reachable from an unmatched
    equation by alternating paths; the under-determined part is the same
    from an unmatched variable.
    """
    eq_match = _maximum_matching(eq_vars)
    var_match = {v: e for e, v in eq_match.items()}
    var_eqs = {v: [] for v in extra_unknowns}
    for e, variables in eq_vars.items():
        for v in variables:
            var_eqs.setdefault(v, []).append(e)

    over_eqs = set()
    stack = [e for e in eq_vars if e not in eq_match]
    while stack:
        e = stack.pop()
        if e in over_eqs:
            continue
        over_eqs.add(e)
        for v in eq_vars[e]:
            nxt = var_match.get(v)
            if nxt is not None and nxt not in over_eqs:
                stack.append(nxt)
    over_vars = set().union(*(eq_vars[e] for e in over_eqs)) if over_eqs else set()

    under_vars = set()
    stack = [v for v in var_eqs if v not in var_match]
    while stack:
        v = stack.pop()
        if v in under_vars:
            continue
        under_vars.add(v)
        for e in var_eqs[v]:
            nxt = eq_match.get(e)
            if nxt is not None and nxt not in under_vars:
                stack.append(nxt)
    under_eqs = {e for v in under_vars for e in var_eqs[v]}
    return under_eqs, under_vars, over_eqs, over_vars, len(eq_match)


def dm_decompose(model, equations=None):
    """
    Dulmage-Mendelsohn decomposition of a model or of a subset of its equations.

    Args:
        model: StructuralModel
        equations: Optional subset of equation ids (default: all)

    Returns:
        DmPartition with every part in declaration order
    """
    eqs = model.equations if equations is None else model.sort_equations(set(equations))
    eq_vars = {e: model.unknowns_of(e) for e in eqs}
    extra = model.unknowns if equations is None else ()
    under_eqs, under_vars, over_eqs, over_vars, size = _dm_sets(eq_vars, extra)
    all_vars = set(extra).union(*eq_vars.values()) if eq_vars else set(extra)
    exact_eqs = set(eqs) - under_eqs - over_eqs
    exact_vars = all_vars - under_vars - over_vars
    return DmPartition(
        under_equations=model.sort_equations(under_eqs),
        under_unknowns=model.sort_unknowns(under_vars),
        exact_equations=model.sort_equations(exact_eqs),
        exact_unknowns=model.sort_unknowns(exact_vars),
        over_equations=model.sort_equations(over_eqs),
        over_unknowns=model.sort_unknowns(over_vars),
        matching_size=size,
    )


def redundancy(model, equations=None):
    """Structural redundancy |E+| - |X+| of a model or equation subset."""
    return dm_decompose(model, equations).redundancy


# =============================================================================
# MSO ENUMERATION
# =============================================================================

class _MsoSearch:
    """Top-down removal over equivalence classes of a proper structurally
    over-determined set. Each MSO is reached along exactly one branch."""

    def __init__(self, model):
        self.model = model
        self.eq_vars = {e: model.unknowns_of(e) for e in model.equations}
        self.found = set()

    def over(self, eqs):
        sub = {e: self.eq_vars[e] for e in eqs}
        return frozenset(_dm_sets(sub)[2])

    def phi(self, eqs):
        variables = set().union(*(self.eq_vars[e] for e in eqs))
        return len(eqs) - len(variables)

    def classes(self, eqs):
        remaining = self.model.sort_equations(eqs)
        assigned, classes = set(), []
        for e in remaining:
            if e in assigned:
                continue
            cls = eqs - self.over(eqs - {e})
            assigned |= cls
            classes.append(frozenset(cls))
        return classes

    def run(self, eqs, removable):
        if self.phi(eqs) == 1:
            self.found.add(eqs)
            return
        candidates = [c for c in self.classes(eqs) if c <= removable]
        still_removable = set().union(*candidates) if candidates else set()
        for cls in candidates:
            still_removable -= cls
            reduced = self.over(eqs - cls)
            if not reduced:
                continue
            # equations no longer removable must survive the reduction
            if not (eqs - still_removable - cls) <= reduced:
                continue
            self.run(reduced, frozenset(still_removable & reduced))


def mso_sort_key(model):
    return lambda eqs: (len(eqs), tuple(sorted(model.equation_index(e) for e in eqs)))


def enumerate_msos(model):
    """
    All minimally structurally over-determined equation sets of the model.

    Returns:
        list of frozensets of equation ids, sorted by size then declaration
        order. A model without redundancy yields an empty list.
    """
    search = _MsoSearch(model)
    top = search.over(frozenset(model.equations))
    if not top:
        logger.info(f"{model.name}: no structural redundancy, no MSO sets")
        return []
    search.run(top, top)
    msos = sorted(search.found, key=mso_sort_key(model))
    logger.info(f"{model.name}: {len(msos)} MSO sets (redundancy {search.phi(top)})")
    return msos


# =============================================================================
# FAULT SIGNATURE / ISOLABILITY
# =============================================================================

@dataclass(frozen=True, eq=False)
class FaultSignatureMatrix:
    """Residual x fault boolean sensitivity matrix."""

    residuals: tuple
    faults: tuple
    matrix: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, FaultSignatureMatrix) and self.residuals == other.residuals
                and self.faults == other.faults and np.array_equal(self.matrix, other.matrix))

    __hash__ = None

    def rows(self, indices):
        indices = list(indices)
        return FaultSignatureMatrix(tuple(self.residuals[i] for i in indices), self.faults,
                                    self.matrix[indices])

    def detectable(self):
        """Boolean per fault: some residual is sensitive to it."""
        return self.matrix.any(axis=0)

    def to_frame(self):
        return pd.DataFrame(self.matrix.astype(int), index=list(self.residuals), columns=list(self.faults))


@dataclass(frozen=True, eq=False)
class IsolabilityMatrix:
    """Fault x fault relation: I[i, j] means f_j stays a diagnosis when f_i is true."""

    faults: tuple
    matrix: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, IsolabilityMatrix) and self.faults == other.faults
                and np.array_equal(self.matrix, other.matrix))

    __hash__ = None

    def isolated_pairs(self):
        """Number of ordered fault pairs (i, j), i != j, that are isolable."""
        return int((~self.matrix).sum())

    def to_frame(self):
        return pd.DataFrame(self.matrix.astype(int), index=list(self.faults), columns=list(self.faults))


def fault_signature(msos, model, names=None):
    """
    Fault signature matrix of a family of MSO sets.

    T[i, j] is true iff fault j occurs in some equation of MSO i.
    """
    names = tuple(names) if names is not None else tuple(f"r{i}" for i in range(len(msos)))
    col = {f: j for j, f in enumerate(model.faults)}
    matrix = np.zeros((len(msos), len(model.faults)), dtype=bool)
    for i, mso in enumerate(msos):
        for e in mso:
            for f in model.faults_of(e):
                matrix[i, col[f]] = True
    return FaultSignatureMatrix(names, model.faults, matrix)


def isolability(fsm):
    """I[i, j] = every residual sensitive to f_i is also sensitive to f_j."""
    t = np.asarray(fsm.matrix, dtype=bool)
    # violation[i, j]: some residual sees f_i but not f_j
    violation = (t[:, :, None] & ~t[:, None, :]).any(axis=0)
    return IsolabilityMatrix(fsm.faults, ~violation)


def detectable_faults(fsm):
    return tuple(f for f, d in zip(fsm.faults, fsm.detectable()) if d)


def select_tests(msos, fsm, budget=None, max_combinations=200_000):
    """
    Smallest set of residuals keeping the family's isolability and
    detectability.

    Rows are tried by increasing subset size in lexicographic index order, so
    the first hit is the deterministic answer. A subset qualifies only when
    both hold: its isolability equals the full family's, and every fault the
    family detects is detected by some selected row. An undetected fault has
    an empty column, so isolability alone can match while a fault goes
    unseen. With a budget smaller than that minimum, the budget-sized
    subset keeping most faults detectable and isolating the most ordered
    fault pairs is returned instead.

    Args:
        msos: The MSO family (only its length is used)
        fsm: FaultSignatureMatrix of the family
        budget: Optional maximum number of tests
        max_combinations: Subset-count guard before falling back to greedy

    Returns:
        list of row indices, ascending
    """
    n = len(msos)
    if n == 0:
        raise ValueError("select_tests needs a non-empty MSO family")
    target = isolability(fsm)
    detectable = fsm.detectable()
    limit = n if budget is None else min(budget, n)

    def qualifies(rows):
        sub = fsm.rows(rows)
        return bool(np.all(sub.detectable() >= detectable)) and isolability(sub) == target

    tried = 0
    for k in range(1, limit + 1):
        for combo in combinations(range(n), k):
            tried += 1
            if tried > max_combinations:
                logger.warning(f"test selection: more than {max_combinations} subsets, using greedy search")
                return _greedy_selection(fsm, target, detectable, limit)
            if qualifies(combo):
                return list(combo)

    best, best_score = None, None
    for combo in combinations(range(n), limit):
        tried += 1
        if tried > max_combinations:
            logger.warning(f"test selection: more than {max_combinations} subsets, using greedy search")
            return _greedy_selection(fsm, target, detectable, limit)
        sub = fsm.rows(combo)
        score = (int(sub.detectable().sum()), isolability(sub).isolated_pairs())
        if best_score is None or score > best_score:
            best, best_score = combo, score
    logger.info(f"test selection: budget {limit} keeps {best_score[1]} of "
                f"{target.isolated_pairs()} isolable fault pairs")
    return list(best)


def _greedy_selection(fsm, target, detectable, limit):
    chosen = []
    remaining = list(range(len(fsm.residuals)))
    while remaining and len(chosen) < limit:
        def gain(i):
            sub = fsm.rows(sorted(chosen + [i]))
            return (int(sub.detectable().sum()), isolability(sub).isolated_pairs(), -i)
        best = max(remaining, key=gain)
        chosen.append(best)
        remaining.remove(best)
        sub = fsm.rows(sorted(chosen))
        if np.all(sub.detectable() >= detectable) and isolability(sub) == target:
            break
    # drop rows that became redundant
    for i in sorted(chosen, reverse=True):
        trial = sorted(set(chosen) - {i})
        if trial:
            sub = fsm.rows(trial)
            if np.all(sub.detectable() >= detectable) and isolability(sub) == target:
                chosen = trial
    return sorted(chosen)


# =============================================================================
# RESIDUAL DESIGN
# =============================================================================

@dataclass(frozen=True)
class ResidualSpec:
    """
    One residual generator: an MSO, its residual equation, and the order in
    which the remaining equations compute the MSO's unknowns.

    target is the known signal of the residual equation (the residual is
    target - prediction); inputs are the other known signals of the MSO.
    derivative_inputs lists knowns whose time derivative the sequence needs.
    """

    name: str
    mso: frozenset
    residual_equation: str
    sequence: tuple
    causality: tuple
    faults: tuple
    sensitivity: tuple
    target: str = None
    inputs: tuple = ()
    derivative_inputs: tuple = field(default=())

    @property
    def channels(self):
        """Exogenous input channel names fed to the network."""
        return tuple(self.inputs) + tuple(f"d_{k}" for k in self.derivative_inputs)

    def sensitive_faults(self):
        return tuple(f for f, s in zip(self.faults, self.sensitivity) if s)

    def to_dict(self):
        return {
            "name": self.name,
            "mso": sorted(self.mso),
            "residual_equation": self.residual_equation,
            "sequence": [list(step) for step in self.sequence],
            "causality": list(self.causality),
            "faults": list(self.faults),
            "sensitivity": [bool(s) for s in self.sensitivity],
            "target": self.target,
            "inputs": list(self.inputs),
            "derivative_inputs": list(self.derivative_inputs),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            name=data["name"],
            mso=frozenset(data["mso"]),
            residual_equation=data["residual_equation"],
            sequence=tuple(tuple(step) for step in data["sequence"]),
            causality=tuple(data["causality"]),
            faults=tuple(data["faults"]),
            sensitivity=tuple(bool(s) for s in data["sensitivity"]),
            target=data.get("target"),
            inputs=tuple(data.get("inputs", ())),
            derivative_inputs=tuple(data.get("derivative_inputs", ())),
        )


def compute_matching(model, mso, residual_equation, name="r"):
    """
    Build a residual generator from an MSO and a chosen residual equation.

    The remaining equations are matched to the MSO's unknowns. Differential
    constraints prefer integral causality (state integrated from its
    derivative); derivative causality is used only when no such complete
    matching exists. The evaluation order is a topological order of the
    matched assignments, ties broken by declaration order.

    Raises:
        MatchingError: residual equation outside the MSO, or no complete
            matching; `unmatched` names the unknowns left without an equation
    """
    mso = frozenset(mso)
    if residual_equation not in mso:
        raise MatchingError(f"residual equation {residual_equation} is not in the MSO", ())
    rest = model.sort_equations(mso - {residual_equation})
    unknowns = model.sort_unknowns(set().union(*(model.unknowns_of(e) for e in mso)))
    constraints = model.differential_constraints()

    graph = nx.Graph()
    n_vars = len(unknowns)
    for ei, e in enumerate(rest):
        for v in model.sort_unknowns(model.unknowns_of(e)):
            preferred = e in constraints and constraints[e][0] == v
            # integral edges dominate; the rank term makes the optimum unique in practice
            rank = (len(rest) - ei) * (n_vars + 1) + (n_vars - unknowns.index(v))
            weight = (2 if preferred else 1) * 10**9 + rank
            graph.add_edge(("e", e), ("x", v), weight=weight)
    graph.add_nodes_from(("e", e) for e in rest)
    matching = nx.max_weight_matching(graph, maxcardinality=True)

    assignment = {}
    for a, b in matching:
        eq_node, var_node = (a, b) if a[0] == "e" else (b, a)
        assignment[eq_node[1]] = var_node[1]
    unmatched = [v for v in unknowns if v not in assignment.values()]
    if unmatched or len(rest) != len(unknowns):
        idle = [e for e in rest if e not in assignment]
        raise MatchingError(
            f"removing {residual_equation} leaves no complete matching: unmatched unknowns {unmatched}"
            + (f", unmatched equations {idle}" if idle else ""),
            unmatched,
        )

    causality = {}
    for e, v in assignment.items():
        if e in constraints:
            causality[e] = INTEGRAL if constraints[e][0] == v else DERIVATIVE
        else:
            causality[e] = ALGEBRAIC

    solver = {v: e for e, v in assignment.items()}
    deps = nx.DiGraph()
    deps.add_nodes_from(rest)
    for e, v in assignment.items():
        if causality[e] == INTEGRAL:
            continue  # state comes from the previous step's integration
        for other in model.unknowns_of(e) - {v}:
            deps.add_edge(solver[other], e)
    condensed = nx.condensation(deps)
    members = condensed.graph["mapping"]
    blocks = {}
    for e, block in members.items():
        blocks.setdefault(block, []).append(e)
    order = []
    for block in nx.lexicographical_topological_sort(
            condensed, key=lambda b: min(model.equation_index(e) for e in blocks[b])):
        group = model.sort_equations(blocks[block])
        if len(group) > 1:
            logger.warning(f"{name}: algebraic loop over {list(group)}")
        order.extend(group)

    sequence = tuple((e, assignment[e]) for e in order)
    derivative_inputs = []
    for e, v in sequence:
        if causality[e] != DERIVATIVE:
            continue
        state = constraints[e][0]
        source = solver[state]
        knowns = model.knowns_of(source)
        if model.unknowns_of(source) == {state} and len(knowns) == 1 and knowns[0] not in derivative_inputs:
            derivative_inputs.append(knowns[0])

    faults_in = {f for e in mso for f in model.faults_of(e)}
    targets = model.knowns_of(residual_equation)
    target = targets[0] if targets else None
    mso_knowns = [k for k in model.knowns if any(k in model.knowns_of(e) for e in mso)]
    inputs = tuple(k for k in mso_knowns if k != target)
    return ResidualSpec(
        name=name,
        mso=mso,
        residual_equation=residual_equation,
        sequence=sequence,
        causality=tuple(causality[e] for e, _ in sequence),
        faults=model.faults,
        sensitivity=tuple(f in faults_in for f in model.faults),
        target=target,
        inputs=inputs,
        derivative_inputs=tuple(derivative_inputs),
    )


def default_residual_equation(model, mso):
    """
    First measurement equation of the MSO (one with a known variable) whose
    removal leaves a complete matching; falls back to any matchable equation.
    """
    ordered = model.sort_equations(mso)
    measured = [e for e in ordered if model.knowns_of(e)]
    for candidates in (measured, ordered):
        for e in candidates:
            try:
                compute_matching(model, mso, e)
            except MatchingError:
                continue
            return e
    raise MatchingError(f"no equation of {sorted(mso)} can serve as residual equation", ())


def design_residuals(model, msos, residual_equations=None, names=None):
    """ResidualSpecs for a family of MSOs, using default residual equations
    where none is given."""
    specs = []
    for i, mso in enumerate(msos):
        name = names[i] if names is not None else f"r{i}"
        chosen = residual_equations[i] if residual_equations and residual_equations[i] else None
        eq = chosen or default_residual_equation(model, mso)
        specs.append(compute_matching(model, mso, eq, name=name))
    return specs
