"""Model-formula mini-language and design-matrix construction.

The grammar is a small subset of the familiar mixed-model syntax::

    model     := ident "~" fixedpart ("+" rterm)*
    fixedpart := atom ("+" atom)* ["-" "1"]      atom := "0" | "1" | ident
    rterm     := "(" relhs "|" ident ")"
               | struct "(" relhs "|" ident ["," ident] ")"
    relhs     := "1" | "0" "+" ident | ident
    struct    := "equalto" | "propto" | "diag" | "us"

A bare ``(0 + f|g)`` random term is unstructured; ``equalto`` and ``propto``
take the name of a bound covariance matrix as their second argument.  The
fixed part has an implicit intercept unless ``0`` or ``- 1`` removes it.
Interactions and nesting are not supported; precompute such columns.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .covstruct import CovarianceStructure
from .data import EffectSizeTable, SamplingCovariance
from .errors import DataError, FormulaError

_STRUCT_KEYWORDS = {
    "equalto": "equalto",
    "propto": "propto",
    "diag": "diag",
    "us": "unstructured",
}

_TOKEN_RE = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_.]*|[0-9]+|[~+\-|(),])")


@dataclass(frozen=True)
class RandomTerm:
    """One random-effect term.

    ``lhs`` is None for a random intercept and the name of a categorical
    column for a factor expansion.  ``matrix`` names the bound fixed matrix
    and is present exactly for the equalto/propto structures.
    """

    structure: str
    lhs: str | None
    group: str
    matrix: str | None = None


@dataclass(frozen=True)
class ModelSpec:
    """Parsed model intermediate representation."""

    response: str
    fixed_terms: tuple
    random_terms: tuple
    disp_terms: tuple = ("1",)
    family: str = "gaussian"
    reml: bool = True

    @property
    def has_intercept(self) -> bool:
        return self.fixed_terms[0] == "1"

    @property
    def covariates(self) -> tuple:
        return self.fixed_terms[1:]


class _Tokens:
    def __init__(self, text):
        self.text = text
        self.toks = []  # (value, 0-based offset)
        pos = 0
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if m is None:
                rest = text[pos:].lstrip()
                off = len(text) - len(rest)
                raise FormulaError(f"unexpected character {rest[0]!r}", off + 1)
            self.toks.append((m.group(1), m.start(1)))
            pos = m.end()
        self.i = 0

    def peek(self, ahead=0):
        j = self.i + ahead
        return self.toks[j][0] if j < len(self.toks) else None

    def next_offset(self):
        if self.i < len(self.toks):
            return self.toks[self.i][1] + 1
        return len(self.text) + 1

    def take(self):
        if self.i >= len(self.toks):
            raise FormulaError("unexpected end of formula", self.next_offset())
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        tok, off = self.take()
        if tok != value:
            raise FormulaError(f"expected {value!r}, found {tok!r}", off + 1)
        return tok

    def at_end(self):
        return self.i >= len(self.toks)


def _is_ident(tok):
    return tok is not None and re.fullmatch(r"[A-Za-z_][A-Za-z0-9_.]*", tok)


def _take_ident(toks, what):
    tok, off = toks.take()
    if not _is_ident(tok):
        raise FormulaError(f"expected {what}, found {tok!r}", off + 1)
    return tok


def _starts_random_term(toks):
    tok = toks.peek()
    if tok == "(":
        return True
    return tok in _STRUCT_KEYWORDS and toks.peek(1) == "("


def _parse_relhs(toks):
    tok, off = toks.take()
    if tok == "1":
        return None
    if tok == "0":
        toks.expect("+")
        return _take_ident(toks, "factor name")
    if _is_ident(tok):
        return tok
    raise FormulaError(f"invalid random-term left-hand side {tok!r}", off + 1)


def _parse_random_term(toks):
    tok, off = toks.take()
    if tok in _STRUCT_KEYWORDS:
        structure = _STRUCT_KEYWORDS[tok]
        toks.expect("(")
        lhs = _parse_relhs(toks)
        toks.expect("|")
        group = _take_ident(toks, "grouping factor")
        matrix = None
        if toks.peek() == ",":
            toks.take()
            matrix = _take_ident(toks, "matrix name")
        toks.expect(")")
        if structure in ("equalto", "propto"):
            if matrix is None:
                raise FormulaError(f"{tok} requires a matrix reference", off + 1)
            if lhs is None:
                raise FormulaError(f"{tok} requires a factor left-hand side", off + 1)
        elif matrix is not None:
            raise FormulaError(f"{tok} does not take a matrix reference", off + 1)
        return RandomTerm(structure, lhs, group, matrix)
    if tok == "(":
        lhs = _parse_relhs(toks)
        toks.expect("|")
        group = _take_ident(toks, "grouping factor")
        toks.expect(")")
        return RandomTerm("iid" if lhs is None else "unstructured", lhs, group)
    raise FormulaError(f"expected a model term, found {tok!r}", off + 1)


def parse_formula(text: str) -> ModelSpec:
    """Parse a conditional-model formula into a :class:`ModelSpec`.

    Family, REML flag and dispersion terms are left at their defaults; they
    are supplied separately.

    Raises
    ------
    FormulaError
        On any syntax error, with the 1-based byte offset; on an unknown
        structure keyword; or on a duplicate equalto term.
    """
    toks = _Tokens(text)
    response = _take_ident(toks, "response name")
    toks.expect("~")
    atoms = []
    random_terms = []
    minus_one = False
    while True:
        if toks.at_end():
            if not atoms and not random_terms:
                raise FormulaError("expected a model term", toks.next_offset())
            break
        if _starts_random_term(toks):
            random_terms.append(_parse_random_term(toks))
        else:
            tok, off = toks.take()
            if random_terms:
                raise FormulaError(
                    "fixed-effect terms must precede random terms", off + 1
                )
            if _is_ident(tok) and toks.peek() == "(":
                raise FormulaError(f"unknown structure keyword {tok!r}", off + 1)
            if tok in ("0", "1") or _is_ident(tok):
                atoms.append(tok)
            else:
                raise FormulaError(f"expected a model term, found {tok!r}", off + 1)
        if toks.at_end():
            break
        tok, off = toks.take()
        if tok == "+":
            continue
        if tok == "-":
            toks.expect("1")
            if random_terms:
                raise FormulaError("'- 1' must appear in the fixed part", off + 1)
            minus_one = True
            if not toks.at_end():
                toks.expect("+")
            continue
        raise FormulaError(f"expected '+', found {tok!r}", off + 1)

    if "0" in atoms and "1" in atoms:
        raise FormulaError("formula cannot contain both '0' and '1'")
    intercept = not (minus_one or "0" in atoms)
    covs = tuple(a for a in atoms if a not in ("0", "1"))
    fixed = ("1",) + covs if intercept else ("0",) + covs

    n_equalto = sum(1 for t in random_terms if t.structure == "equalto")
    if n_equalto > 1:
        raise FormulaError("duplicate equalto term")
    return ModelSpec(response, fixed, tuple(random_terms))


def parse_dispformula(text: str) -> tuple:
    """Parse a one-sided dispersion formula.

    Returns ``("0",)`` for the zero formula (residual variance fixed at
    zero), ``("1",)`` for intercept-only, or ``("1", cov, ...)``.

    Raises
    ------
    FormulaError
        When the text does not start with ``~``, contains random-effect
        syntax (not supported in the dispersion model), or removes the
        intercept while keeping covariates.
    """
    stripped = text.lstrip()
    if not stripped.startswith("~"):
        raise FormulaError("dispersion formula must start with '~'")
    toks = _Tokens(stripped[1:])
    atoms = []
    while not toks.at_end():
        tok, off = toks.take()
        if tok in ("(", "|"):
            raise FormulaError(
                "random effects are not supported in the dispersion model", off + 1
            )
        if tok in ("0", "1") or _is_ident(tok):
            atoms.append(tok)
        else:
            raise FormulaError(f"expected a term, found {tok!r}", off + 1)
        if toks.at_end():
            break
        toks.expect("+")
    if not atoms:
        raise FormulaError("empty dispersion formula", 2)
    if atoms == ["0"]:
        return ("0",)
    if "0" in atoms:
        raise FormulaError("dispersion model needs an intercept unless it is '~0'")
    return ("1",) + tuple(a for a in atoms if a != "1")


def pretty(spec: ModelSpec) -> str:
    """Canonical text for a parsed formula; reparses to the identical AST."""
    parts = ["1"] if spec.has_intercept else ["0"]
    parts += list(spec.covariates)
    for t in spec.random_terms:
        inner = "1" if t.lhs is None else f"0 + {t.lhs}"
        if t.structure == "iid":
            parts.append(f"({inner}|{t.group})")
        elif t.structure == "unstructured" and t.matrix is None:
            parts.append(f"us({inner}|{t.group})")
        elif t.structure == "diag":
            parts.append(f"diag({inner}|{t.group})")
        else:
            parts.append(f"{t.structure}({inner}|{t.group},{t.matrix})")
    return f"{spec.response} ~ " + " + ".join(parts)


def pretty_disp(disp_terms: tuple) -> str:
    if disp_terms == ("0",):
        return "~0"
    return "~" + " + ".join(disp_terms)


# ----------------------------------------------------------------------
# design matrices
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class TermDesign:
    """A random term materialized against a dataset."""

    term: RandomTerm
    name: str
    Z: np.ndarray
    structure: CovarianceStructure
    level_names: tuple
    group_levels: tuple


@dataclass(frozen=True)
class DesignBundle:
    """Everything the Gaussian engine needs: fixed design X, one Z per
    random term, the fixed sampling covariance contribution, and the
    dispersion design (None encodes the zero formula)."""

    X: np.ndarray
    coef_names: tuple
    terms: tuple
    V_fixed: np.ndarray | None
    X_disp: np.ndarray | None
    disp_names: tuple
    n: int


def _value_label(val, name, row):
    if val is None or (isinstance(val, float) and np.isnan(val)):
        raise DataError(f"column {name!r} has a missing value (row {row + 1})")
    if isinstance(val, float) and float(val).is_integer():
        return str(int(val))
    return str(val)


def _factor(table, name):
    """Row labels and sorted levels for a column used as a factor."""
    col = table.column(name)
    labels = [_value_label(v, name, i) for i, v in enumerate(col)]
    return labels, tuple(sorted(set(labels)))


def _numeric_column(table, name):
    col = table.column(name)
    if col.dtype.kind != "f":
        return None
    if np.any(np.isnan(col)):
        row = int(np.argmax(np.isnan(col))) + 1
        raise DataError(f"column {name!r} has a missing value (row {row})")
    return col


def _expand_fixed(table, atoms, has_intercept):
    n = table.n
    cols, names = [], []
    if has_intercept:
        cols.append(np.ones(n))
        names.append("(Intercept)")
    spans_constant = has_intercept
    for name in atoms:
        num = _numeric_column(table, name)
        if num is not None:
            cols.append(num.astype(float))
            names.append(name)
            continue
        labels, levels = _factor(table, name)
        keep = levels if not spans_constant else levels[1:]
        spans_constant = True
        arr = np.asarray(labels, dtype=object)
        for lev in keep:
            cols.append((arr == lev).astype(float))
            names.append(f"{name}{lev}")
    X = np.column_stack(cols) if cols else np.zeros((n, 0))
    return X, tuple(names)


def _indicator_z(group_idx, factor_idx, K, q, n):
    Z = np.zeros((n, K * q))
    Z[np.arange(n), np.asarray(group_idx) * q + np.asarray(factor_idx)] = 1.0
    return Z


def build_design(
    spec: ModelSpec,
    table: EffectSizeTable,
    matrices: dict | None = None,
) -> DesignBundle:
    """Materialize a parsed model against a dataset.

    Categorical fixed effects use treatment coding with the alphabetically
    first level as reference, or one column per level when the intercept is
    removed.  For an ``equalto`` term the referenced matrix is re-ordered to
    the factor's level order, so ``Z (I_K (x) V) Z'`` reproduces the matrix
    in data row order; with a single-level grouping factor this collapses to
    ``Var(b) = V`` itself.

    Raises
    ------
    DataError
        Unknown columns, missing values in referenced columns, a
        rank-deficient fixed-effect design, unbound matrix references, or a
        matrix whose dimension does not match the factor's level count.
    """
    matrices = matrices or {}
    n = table.n
    X, coef_names = _expand_fixed(table, spec.covariates, spec.has_intercept)
    if X.shape[1] and np.linalg.matrix_rank(X) < X.shape[1]:
        raise DataError("fixed-effect design matrix is rank-deficient")

    terms = []
    V_fixed = None
    for t in spec.random_terms:
        g_labels, g_levels = _factor(table, t.group)
        g_pos = {lev: i for i, lev in enumerate(g_levels)}
        g_idx = [g_pos[lab] for lab in g_labels]
        K = len(g_levels)
        if t.lhs is None:
            q = 1
            level_names = ("(Intercept)",)
            f_idx = [0] * n
        else:
            f_labels, f_levels = _factor(table, t.lhs)
            q = len(f_levels)
            level_names = f_levels
            f_pos = {lev: i for i, lev in enumerate(f_levels)}
            f_idx = [f_pos[lab] for lab in f_labels]
        Z = _indicator_z(g_idx, f_idx, K, q, n)

        if t.structure in ("equalto", "propto"):
            if t.matrix not in matrices:
                raise DataError(f"matrix {t.matrix} unbound")
            mat = matrices[t.matrix]
            if not isinstance(mat, SamplingCovariance):
                raise DataError(f"matrix {t.matrix} is not a covariance matrix")
            if mat.n != q:
                raise DataError(
                    f"matrix {t.matrix} dimension {mat.n} does not match the "
                    f"{q} levels of factor {t.lhs!r}"
                )
            aligned = mat.aligned(level_names).matrix
            pairs = set(zip(g_idx, f_idx))
            if len(pairs) != n:
                raise DataError(
                    f"factor {t.lhs!r} must index each observation within its "
                    f"group at most once"
                )
            if t.structure == "equalto":
                if K == 1 and q != n:
                    raise DataError(
                        "equalto factor must enumerate all observations exactly once"
                    )
                structure = CovarianceStructure("equalto", q, aligned)
                contrib = Z @ np.kron(np.eye(K), aligned) @ Z.T
                V_fixed = contrib if V_fixed is None else V_fixed + contrib
            else:
                structure = CovarianceStructure("propto", q, aligned)
        else:
            structure = CovarianceStructure(t.structure, q)

        name = t.group if t.lhs is None else f"{t.group}.{t.lhs}"
        if t.structure == "propto":
            name += ".propto"
        existing = {td.name for td in terms}
        if name in existing:
            name += "#2"
        terms.append(TermDesign(t, name, Z, structure, level_names, g_levels))

    if spec.disp_terms == ("0",):
        X_disp, disp_names = None, ()
    else:
        X_disp, disp_names = _expand_fixed(table, spec.disp_terms[1:], True)
        if X_disp.shape[1] and np.linalg.matrix_rank(X_disp) < X_disp.shape[1]:
            raise DataError("dispersion design matrix is rank-deficient")

    return DesignBundle(X, coef_names, tuple(terms), V_fixed, X_disp, disp_names, n)
