"""
Diagnosis Engine — Model Files
================================
Line-oriented text format for structural models:

    # comment
    model three_tank
    unknowns q0 q1 p1 dp1
    knowns y1 y2
    faults fV1 fT1
    equation e1 q1 p1 fV1
    dynamic p1 dp1 e10

Declarations may appear in any order; equations keep file order. A model
written with dumps_model() reads back identical.
"""

from pathlib import Path

from .errors import ModelValidationError
from .structural import StructuralModel

_KEYWORDS = ("model", "unknowns", "knowns", "faults", "equation", "dynamic")


def loads_model(text):
    """Parse model text into a StructuralModel."""
    name = None
    unknowns, knowns, faults = [], [], []
    equations, dynamics = [], []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, *tokens = line.split()
        if keyword not in _KEYWORDS:
            raise ModelValidationError(f"line {lineno}: unknown keyword '{keyword}'")
        if keyword == "model":
            if len(tokens) != 1:
                raise ModelValidationError(f"line {lineno}: expected 'model <name>'")
            name = tokens[0]
        elif keyword == "unknowns":
            unknowns.extend(tokens)
        elif keyword == "knowns":
            knowns.extend(tokens)
        elif keyword == "faults":
            faults.extend(tokens)
        elif keyword == "equation":
            if not tokens:
                raise ModelValidationError(f"line {lineno}: equation needs an id")
            equations.append((lineno, tokens[0], tokens[1:]))
        else:
            if len(tokens) != 3:
                raise ModelValidationError(f"line {lineno}: expected 'dynamic <state> <derivative> <equation>'")
            dynamics.append(tuple(tokens))

    if name is None:
        raise ModelValidationError("missing 'model <name>' line")
    declared = set(unknowns) | set(knowns) | set(faults)
    edges = set()
    for lineno, eq, variables in equations:
        for v in variables:
            if v not in declared:
                raise ModelValidationError(f"line {lineno}: equation {eq} uses undeclared variable '{v}'")
            edges.add((eq, v))

    return StructuralModel(
        name=name,
        equations=[eq for _, eq, _ in equations],
        unknowns=unknowns,
        knowns=knowns,
        faults=faults,
        edges=edges,
        dynamic_pairs=dynamics,
    )


def dumps_model(model):
    """Serialize a StructuralModel to model text."""
    lines = [f"model {model.name}"]
    for keyword, names in (("unknowns", model.unknowns), ("knowns", model.knowns), ("faults", model.faults)):
        if names:
            lines.append(f"{keyword} {' '.join(names)}")
    for e in model.equations:
        variables = list(model.sort_unknowns(model.unknowns_of(e))) + list(model.knowns_of(e)) \
            + list(model.faults_of(e))
        lines.append(" ".join(["equation", e] + variables))
    for state, derivative, eq in model.dynamic_pairs:
        lines.append(f"dynamic {state} {derivative} {eq}")
    return "\n".join(lines) + "\n"


def load_model(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ModelValidationError(f"cannot read model file {path}: {exc}") from exc
    return loads_model(text)


def dump_model(model, path):
    Path(path).write_text(dumps_model(model))
