"""Effect-size tables, raw arm data, and known sampling-error covariance matrices.

The central objects are :class:`EffectSizeTable` (one row per observed effect
size, with its known sampling variance and any moderators), the fixed
:class:`SamplingCovariance` matrix passed to the fitting engines, and
:class:`ArmTable` for raw two-arm count data used by the one-stage models.
All three are immutable after construction and safe to share across
concurrent fits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError

_MISSING_TOKENS = {"", "NA", "NaN", "nan", "N/A"}

SYMMETRY_TOL = 1e-12
PSD_RTOL = 1e-8


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class EffectSizeTable:
    """Ordered effect-size records.

    Row order is the single source of truth: every matrix and design built
    downstream indexes rows in this order.

    Attributes
    ----------
    obs_id : tuple of str
        Unique per-row identifiers.
    cluster_id : tuple of str
        Study/cluster membership, one per row.
    y : ndarray
        Observed effect sizes.
    v : ndarray
        Known sampling variances, >= 0.  A zero is permitted only for rows
        whose variance is supplied through a full covariance matrix instead.
    moderators : dict
        Extra covariate columns; float arrays for numeric columns, object
        arrays for categorical ones.  Missing values are NaN / None and are
        rejected at design-build time, never imputed.
    """

    obs_id: tuple
    cluster_id: tuple
    y: np.ndarray
    v: np.ndarray
    moderators: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.obs_id)
        if n == 0:
            raise DataError("no rows")
        object.__setattr__(self, "obs_id", tuple(str(o) for o in self.obs_id))
        object.__setattr__(self, "cluster_id", tuple(str(c) for c in self.cluster_id))
        if len(set(self.obs_id)) != n:
            raise DataError("duplicate obs_id values")
        y = _frozen(np.asarray(self.y, dtype=float))
        v = _frozen(np.asarray(self.v, dtype=float))
        if len(self.cluster_id) != n or y.shape != (n,) or v.shape != (n,):
            raise DataError("column lengths differ")
        if not np.all(np.isfinite(y)):
            raise DataError("non-finite effect size y")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DataError("sampling variance v must be finite and >= 0")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "v", v)
        mods = {}
        for name, col in self.moderators.items():
            arr = np.asarray(col)
            if arr.shape != (n,):
                raise DataError(f"moderator {name!r} has wrong length")
            if arr.dtype.kind not in "fiu":
                arr = arr.astype(object)
            else:
                arr = arr.astype(float)
            mods[name] = _frozen(arr)
        object.__setattr__(self, "moderators", mods)

    @property
    def n(self) -> int:
        return len(self.obs_id)

    @property
    def clusters(self) -> tuple:
        """Distinct cluster ids in first-appearance order."""
        seen = dict.fromkeys(self.cluster_id)
        return tuple(seen)

    def column(self, name: str) -> np.ndarray:
        """Look up a column by name: a moderator, or the obs/cluster ids."""
        if name in self.moderators:
            return self.moderators[name]
        if name == "_obs":
            return np.asarray(self.obs_id, dtype=object)
        if name == "_cluster":
            return np.asarray(self.cluster_id, dtype=object)
        raise DataError(f"column {name!r} not found in data")


@dataclass(frozen=True)
class SamplingCovariance:
    """A fixed, known sampling-error variance-covariance matrix.

    Attributes
    ----------
    matrix : ndarray
        Symmetric n x n matrix, strictly positive diagonal, PSD to within
        ``PSD_RTOL`` times the largest eigenvalue.
    row_labels : tuple of str
        obs_id labels, one per row, fixing the row order.
    block_index : dict
        cluster_id -> tuple of row positions covered by that block.
    """

    matrix: np.ndarray
    row_labels: tuple
    block_index: dict

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        labels = tuple(str(x) for x in self.row_labels)
        n = len(labels)
        if m.shape != (n, n):
            raise DataError("matrix shape does not match row labels")
        if len(set(labels)) != n:
            raise DataError("duplicate row labels in covariance matrix")
        if not np.all(np.isfinite(m)):
            raise DataError("non-finite covariance entries")
        if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOL:
            raise DataError("covariance matrix is not symmetric")
        if np.any(np.diag(m) <= 0):
            raise DataError("covariance diagonal must be strictly positive")
        eig = np.linalg.eigvalsh(m)
        if eig[0] < -PSD_RTOL * max(eig[-1], 1.0):
            raise DataError("covariance matrix is not positive semidefinite")
        object.__setattr__(self, "matrix", _frozen(m))
        object.__setattr__(self, "row_labels", labels)
        object.__setattr__(
            self, "block_index", {k: tuple(idx) for k, idx in self.block_index.items()}
        )

    @property
    def n(self) -> int:
        return len(self.row_labels)

    def aligned(self, labels) -> "SamplingCovariance":
        """Return a copy re-ordered to match ``labels``.

        Raises
        ------
        DataError
            If the label sets differ.
        """
        labels = tuple(str(x) for x in labels)
        if set(labels) != set(self.row_labels):
            raise DataError("covariance row labels do not match requested labels")
        if labels == self.row_labels:
            return self
        pos = {lab: i for i, lab in enumerate(self.row_labels)}
        perm = np.array([pos[lab] for lab in labels])
        back = {old: new for new, old in enumerate(perm)}
        blocks = {
            k: tuple(sorted(back[i] for i in idx)) for k, idx in self.block_index.items()
        }
        return SamplingCovariance(self.matrix[np.ix_(perm, perm)], labels, blocks)


@dataclass(frozen=True)
class ArmTable:
    """Raw two-arm count data for one-stage models, one row per arm.

    ``size_or_time`` is the binomial denominator n for binary outcomes and
    the person-time t for count outcomes.  Every study must contribute
    exactly one treatment and one control row.
    """

    study_id: tuple
    arm: tuple
    events: np.ndarray
    size_or_time: np.ndarray

    def __post_init__(self):
        study = tuple(str(s) for s in self.study_id)
        arm = tuple(str(a) for a in self.arm)
        ev = np.asarray(self.events, dtype=float)
        sz = _frozen(np.asarray(self.size_or_time, dtype=float))
        n = len(study)
        if not (len(arm) == n and ev.shape == (n,) and sz.shape == (n,)):
            raise DataError("arm table column lengths differ")
        if np.any(ev < 0) or np.any(ev != np.round(ev)):
            raise DataError("event counts must be non-negative integers")
        if np.any(sz <= 0):
            raise DataError("arm size / person-time must be > 0")
        bad = set(arm) - {"treatment", "control"}
        if bad:
            raise DataError(f"unknown arm labels: {sorted(bad)}")
        seen = {}
        for s, a in zip(study, arm):
            seen.setdefault(s, []).append(a)
        for s, arms in seen.items():
            if sorted(arms) != ["control", "treatment"]:
                raise DataError(
                    f"study {s!r} must have exactly one treatment and one control row"
                )
        object.__setattr__(self, "study_id", study)
        object.__setattr__(self, "arm", arm)
        object.__setattr__(self, "events", _frozen(ev))
        object.__setattr__(self, "size_or_time", sz)

    @property
    def k(self) -> int:
        return len(set(self.study_id))

    def paired(self):
        """Per-study arrays (studies, events_t, size_t, events_c, size_c).

        Studies are returned in first-appearance order.
        """
        order = list(dict.fromkeys(self.study_id))
        idx = {(s, a): i for i, (s, a) in enumerate(zip(self.study_id, self.arm))}
        et = np.array([self.events[idx[(s, "treatment")]] for s in order])
        st = np.array([self.size_or_time[idx[(s, "treatment")]] for s in order])
        ec = np.array([self.events[idx[(s, "control")]] for s in order])
        sc = np.array([self.size_or_time[idx[(s, "control")]] for s in order])
        return tuple(order), et, st, ec, sc


# ----------------------------------------------------------------------
# loading
# ----------------------------------------------------------------------


def _parse_float_column(raw, colname):
    """Convert a string column to float, naming the first bad row (1-based)."""
    out = np.empty(len(raw), dtype=float)
    for i, val in enumerate(raw):
        s = str(val).strip()
        if s in _MISSING_TOKENS:
            raise DataError(f"column {colname!r}: missing value in row {i + 1}")
        try:
            out[i] = float(s)
        except ValueError:
            raise DataError(
                f"column {colname!r}: non-numeric value {s!r} in row {i + 1}"
            ) from None
    return out


def _moderator_column(raw):
    """Numeric columns become float arrays (NaN for missing), others object."""
    vals = [str(v).strip() for v in raw]
    floats = np.empty(len(vals))
    numeric = True
    for i, s in enumerate(vals):
        if s in _MISSING_TOKENS:
            floats[i] = np.nan
            continue
        try:
            floats[i] = float(s)
        except ValueError:
            numeric = False
            break
    if numeric:
        return floats
    return np.array([None if s in _MISSING_TOKENS else s for s in vals], dtype=object)


def load_table(path, column_map) -> EffectSizeTable:
    """Load an :class:`EffectSizeTable` from a delimited text file.

    Parameters
    ----------
    path : str or Path
        CSV file with a header row.
    column_map : dict
        Maps the logical names ``y``, ``v``, ``cluster`` and ``obs`` to file
        column names.  ``y`` is required.  When ``obs`` is unmapped, ids are
        synthesized as 1..n; when ``cluster`` is unmapped each row is its own
        cluster; when ``v`` is unmapped it is filled with zeros (valid only
        for fits that take a full covariance matrix).  All remaining columns
        are kept as moderators.

    Raises
    ------
    DataError
        Missing column, non-numeric y/v (with the offending row named),
        duplicate obs_id, negative v, or an empty data section.
    """
    df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    if df.shape[0] == 0:
        raise DataError("no rows")
    if "y" not in column_map:
        raise DataError("column_map must map 'y'")
    for logical, col in column_map.items():
        if col not in df.columns:
            raise DataError(f"mapped column {col!r} (for {logical!r}) not in file")
    n = df.shape[0]
    y = _parse_float_column(df[column_map["y"]], column_map["y"])
    if "v" in column_map:
        v = _parse_float_column(df[column_map["v"]], column_map["v"])
        if np.any(v < 0):
            bad = int(np.argmax(v < 0)) + 1
            raise DataError(f"negative sampling variance in row {bad}")
    else:
        v = np.zeros(n)
    obs = (
        [s.strip() for s in df[column_map["obs"]]]
        if "obs" in column_map
        else [str(i + 1) for i in range(n)]
    )
    if len(set(obs)) != n:
        raise DataError("duplicate obs_id")
    cluster = (
        [s.strip() for s in df[column_map["cluster"]]]
        if "cluster" in column_map
        else list(obs)
    )
    mapped = set(column_map.values())
    mods = {
        c: _moderator_column(df[c]) for c in df.columns if c not in mapped
    }
    # keep mapped id columns addressable by their file names too, so model
    # formulas can reference e.g. "study" or "id" directly
    for logical in ("obs", "cluster"):
        if logical in column_map:
            col = column_map[logical]
            mods.setdefault(col, np.array([str(s).strip() for s in df[col]], dtype=object))
    return EffectSizeTable(obs, cluster, y, v, mods)


def load_arm_table(path, column_map) -> ArmTable:
    """Load an :class:`ArmTable` from CSV.

    ``column_map`` maps ``study``, ``arm``, ``events`` and ``size`` to file
    columns.  Arm labels are matched case-insensitively against
    {treatment, control} with t/c shorthand accepted.
    """
    df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    if df.shape[0] == 0:
        raise DataError("no rows")
    for logical in ("study", "arm", "events", "size"):
        if logical not in column_map:
            raise DataError(f"column_map must map {logical!r}")
        if column_map[logical] not in df.columns:
            raise DataError(f"mapped column {column_map[logical]!r} not in file")
    events = _parse_float_column(df[column_map["events"]], column_map["events"])
    size = _parse_float_column(df[column_map["size"]], column_map["size"])
    alias = {"t": "treatment", "treatment": "treatment", "treated": "treatment",
             "c": "control", "control": "control"}
    arms = []
    for i, a in enumerate(df[column_map["arm"]]):
        key = str(a).strip().lower()
        if key not in alias:
            raise DataError(f"unknown arm label {a!r} in row {i + 1}")
        arms.append(alias[key])
    return ArmTable(list(df[column_map["study"]]), arms, events, size)


# ----------------------------------------------------------------------
# covariance construction
# ----------------------------------------------------------------------


def diag_vcv(table: EffectSizeTable) -> SamplingCovariance:
    """Diagonal sampling covariance: independent sampling errors.

    Every row becomes its own block.  Requires all v > 0.
    """
    if np.any(table.v <= 0):
        bad = int(np.argmax(table.v <= 0)) + 1
        raise DataError(f"diag_vcv requires v > 0 (row {bad})")
    blocks = {obs: (i,) for i, obs in enumerate(table.obs_id)}
    return SamplingCovariance(np.diag(table.v), table.obs_id, blocks)


def vcalc_constant_rho(table: EffectSizeTable, rho: float) -> SamplingCovariance:
    """Block-diagonal sampling covariance under a constant within-cluster
    correlation.

    Within each cluster the (i, j) entry is ``rho * sqrt(v_i * v_j)`` for
    i != j and ``v_i`` on the diagonal; entries across clusters are zero.

    Parameters
    ----------
    table : EffectSizeTable
    rho : float
        Assumed within-cluster correlation, -1 < rho < 1.  A constant
        negative correlation is only a valid covariance when
        rho > -1/(m - 1) for the largest cluster size m; values outside
        that range are rejected.
    """
    if not -1.0 < rho < 1.0:
        raise DataError("rho must satisfy -1 < rho < 1")
    if np.any(table.v <= 0):
        bad = int(np.argmax(table.v <= 0)) + 1
        raise DataError(f"vcalc requires v > 0 (row {bad})")
    counts = {}
    for c in table.cluster_id:
        counts[c] = counts.get(c, 0) + 1
    m_max = max(counts.values())
    if m_max > 1 and rho <= -1.0 / (m_max - 1):
        raise DataError(
            f"rho = {rho} is not a valid constant correlation for clusters of "
            f"size {m_max}; need rho > {-1.0 / (m_max - 1):.4g}"
        )
    n = table.n
    m = np.zeros((n, n))
    blocks = {}
    cluster = np.asarray(table.cluster_id, dtype=object)
    s = np.sqrt(table.v)
    for c in table.clusters:
        idx = np.flatnonzero(cluster == c)
        blocks[c] = tuple(int(i) for i in idx)
        sub = rho * np.outer(s[idx], s[idx])
        sub[np.diag_indices(len(idx))] = table.v[idx]
        m[np.ix_(idx, idx)] = sub
    return SamplingCovariance(m, table.obs_id, blocks)


def read_vcv(path) -> SamplingCovariance:
    """Read a labeled covariance matrix CSV (first row/column are obs ids)."""
    df = pd.read_csv(path, index_col=0, float_precision="round_trip")
    labels = [str(x) for x in df.columns]
    row_labels = [str(x) for x in df.index]
    if labels != row_labels:
        raise DataError("matrix file row labels differ from column labels")
    m = df.to_numpy(dtype=float)
    # symmetrize away formatting round-off before validation
    m = 0.5 * (m + m.T)
    return SamplingCovariance(m, labels, {lab: (i,) for i, lab in enumerate(labels)})


def write_vcv(cov: SamplingCovariance, path) -> None:
    """Write a labeled covariance matrix CSV, bit-stable across runs."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("," + ",".join(cov.row_labels) + "\n")
        for lab, row in zip(cov.row_labels, cov.matrix):
            fh.write(lab + "," + ",".join(repr(float(x)) for x in row) + "\n")


# ----------------------------------------------------------------------
# effect-size computation
# ----------------------------------------------------------------------

MEASURES = ("SMD", "lnRR", "lnOR", "lnIRR")

_COLUMNS = {
    "SMD": ("m1", "sd1", "n1", "m2", "sd2", "n2"),
    "lnRR": ("m1", "sd1", "n1", "m2", "sd2", "n2"),
    "lnOR": ("a", "b", "c", "d"),
    "lnIRR": ("x1", "t1", "x2", "t2"),
}


def escalc(measure, arm_stats, continuity=False, smd_variance="g") -> EffectSizeTable:
    """Compute per-study effect sizes and sampling variances.

    Parameters
    ----------
    measure : {"SMD", "lnRR", "lnOR", "lnIRR"}
        SMD is Hedges' g; lnRR the log response ratio; lnOR the log odds
        ratio from a 2x2 table (a, b, c, d) = (group-1 events, group-1
        non-events, group-2 events, group-2 non-events); lnIRR the log
        incidence rate ratio from (events, person-time) per arm.
    arm_stats : mapping or DataFrame
        Per-study summary statistics with the measure's required columns
        (see above; SMD/lnRR use m/sd/n with suffix 1 = treatment,
        2 = control).  An optional ``study`` column provides cluster ids.
    continuity : bool
        When True, studies with a zero cell (lnOR) or zero event count
        (lnIRR) get 0.5 added to all four cells / both counts.  Off by
        default; zero cells then raise.
    smd_variance : {"g", "d"}
        Which standardized difference enters the second variance term.

    Returns
    -------
    EffectSizeTable
        One row per study, obs ids 1..k.  When ``continuity`` is True a
        0/1 moderator column ``continuity`` marks the adjusted studies.
    """
    if measure not in MEASURES:
        raise DataError(f"unknown measure {measure!r}")
    if smd_variance not in ("g", "d"):
        raise DataError("smd_variance must be 'g' or 'd'")
    df = pd.DataFrame(arm_stats)
    if df.shape[0] == 0:
        raise DataError("no rows")
    for col in _COLUMNS[measure]:
        if col not in df.columns:
            raise DataError(f"measure {measure} requires column {col!r}")
    study = (
        [str(s) for s in df["study"]]
        if "study" in df.columns
        else [str(i + 1) for i in range(df.shape[0])]
    )
    cols = {c: df[c].to_numpy(dtype=float) for c in _COLUMNS[measure]}
    cc_flag = np.zeros(df.shape[0])

    if measure in ("SMD", "lnRR"):
        m1, sd1, n1 = cols["m1"], cols["sd1"], cols["n1"]
        m2, sd2, n2 = cols["m2"], cols["sd2"], cols["n2"]
        if np.any(sd1 <= 0) or np.any(sd2 <= 0):
            raise DataError("arm standard deviations must be > 0")
        if np.any(n1 < 2) or np.any(n2 < 2):
            raise DataError("arm sample sizes must be >= 2")
        if measure == "SMD":
            dfree = n1 + n2 - 2
            sp = np.sqrt(((n1 - 1) * sd1**2 + (n2 - 1) * sd2**2) / dfree)
            d = (m1 - m2) / sp
            j = 1.0 - 3.0 / (4.0 * dfree - 1.0)
            g = j * d
            num = g if smd_variance == "g" else d
            y = g
            v = (n1 + n2) / (n1 * n2) + num**2 / (2.0 * (n1 + n2))
        else:
            if np.any(m1 <= 0) or np.any(m2 <= 0):
                raise DataError("lnRR requires positive arm means")
            y = np.log(m1 / m2)
            v = sd1**2 / (n1 * m1**2) + sd2**2 / (n2 * m2**2)
    elif measure == "lnOR":
        a, b, c, d_ = cols["a"], cols["b"], cols["c"], cols["d"]
        zero = (a == 0) | (b == 0) | (c == 0) | (d_ == 0)
        if np.any(zero):
            if not continuity:
                bad = int(np.argmax(zero)) + 1
                raise DataError(
                    f"zero cell in study {bad}; enable the continuity correction"
                )
            cc_flag = zero.astype(float)
            a, b, c, d_ = (x + 0.5 * zero for x in (a, b, c, d_))
        y = np.log(a * d_ / (b * c))
        v = 1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d_
    else:  # lnIRR
        x1, t1, x2, t2 = cols["x1"], cols["t1"], cols["x2"], cols["t2"]
        if np.any(t1 <= 0) or np.any(t2 <= 0):
            raise DataError("person-time must be > 0")
        zero = (x1 == 0) | (x2 == 0)
        if np.any(zero):
            if not continuity:
                bad = int(np.argmax(zero)) + 1
                raise DataError(
                    f"zero event count in study {bad}; enable the continuity correction"
                )
            cc_flag = zero.astype(float)
            x1 = x1 + 0.5 * zero
            x2 = x2 + 0.5 * zero
        y = np.log((x1 / t1) / (x2 / t2))
        v = 1.0 / x1 + 1.0 / x2

    mods = {"continuity": cc_flag} if continuity else {}
    obs = [str(i + 1) for i in range(df.shape[0])]
    return EffectSizeTable(obs, study, y, v, mods)
