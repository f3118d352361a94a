"""Trend series data model, ingestion, normalization and sample windowing."""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataIntegrityError, UnusableSeriesError

log = logging.getLogger(__name__)

ELEMENT_KINDS = ("category", "attribute", "attribute_value", "style")
GENDERS = ("female", "male")
AGE_BANDS = ("under18", "a18_25", "a25_40", "over40")
STEPS_PER_YEAR = {"half_month": 24, "week": 52}

# allowed parent kind for each element kind
_PARENT_KIND = {"category": None, "attribute": "category",
                "attribute_value": "attribute", "style": None}


@dataclass(frozen=True)
class FashionElement:
    id: str
    kind: str
    parent_id: Optional[str] = None


@dataclass(frozen=True)
class UserGroup:
    id: str
    city: str
    gender: str
    age_band: Optional[str] = None

    @property
    def is_coarse(self):
        return self.age_band is None


@dataclass
class TrendSeries:
    group_id: str
    element_id: str
    values: np.ndarray
    valid: np.ndarray
    step_period: str = "half_month"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise DataIntegrityError(
                f"series {self.key}: {self.values.shape[0]} values vs {self.valid.shape[0]} mask entries")

    @property
    def key(self):
        return (self.group_id, self.element_id)

    @property
    def valid_fraction(self):
        return float(self.valid.mean()) if self.valid.size else 0.0

    def __len__(self):
        return self.values.shape[0]


@dataclass
class Sample:
    key: tuple
    start: int
    history: np.ndarray
    future: np.ndarray
    history_positions: np.ndarray
    future_positions: np.ndarray

    @property
    def target_range(self):
        """Half-open step range covered by ``future``."""
        n = len(self.history)
        return self.start + n, self.start + n + len(self.future)


@dataclass(frozen=True)
class NormStats:
    min: float
    max: float
    scope: str = "global"

    @property
    def scale(self):
        # constant data: divisor falls back to 1
        span = self.max - self.min
        return span if span > 0 else 1.0

    def to_dict(self):
        return {"min": self.min, "max": self.max, "scope": self.scope}


@dataclass
class Dataset:
    series: list
    elements: list
    groups: list
    step_period: str = "half_month"
    steps_per_year: int = 24

    def __post_init__(self):
        validate_taxonomy(self.elements)
        ids = [g.id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate user group id")

    def series_by_key(self):
        return {s.key: s for s in self.series}

    def element(self, eid):
        for e in self.elements:
            if e.id == eid:
                return e
        raise KeyError(eid)


def validate_taxonomy(elements):
    by_id = {}
    for e in elements:
        if e.kind not in ELEMENT_KINDS:
            raise ConfigError(f"element {e.id!r}: unknown kind {e.kind!r}")
        if e.id in by_id:
            raise ConfigError(f"duplicate element id {e.id!r}")
        by_id[e.id] = e
    for e in elements:
        want = _PARENT_KIND[e.kind]
        if want is None:
            if e.parent_id is not None:
                raise ConfigError(f"{e.kind} {e.id!r} cannot have a parent")
            continue
        parent = by_id.get(e.parent_id)
        if parent is None or parent.kind != want:
            raise ConfigError(f"{e.kind} {e.id!r} needs a {want} parent, got {e.parent_id!r}")


# ------------------------------------------------------------------ ingestion

def compute_popularity(element_counts, total_counts):
    """Popularity ``element / total`` per step; steps with zero total are invalid."""
    n = np.asarray(element_counts, dtype=np.float64)
    N = np.asarray(total_counts, dtype=np.float64)
    if n.shape != N.shape:
        raise DataIntegrityError(f"counts {n.shape} vs totals {N.shape}")
    if np.any(n < 0) or np.any(n > N):
        bad = int(np.flatnonzero((n < 0) | (n > N))[0])
        raise DataIntegrityError(f"step {bad}: element count {n[bad]:g} exceeds total {N[bad]:g}")
    valid = N > 0
    values = np.zeros_like(n)
    np.divide(n, N, out=values, where=valid)
    return values, valid


def interpolate_missing(series):
    """Fill invalid steps: linear inside, nearest valid value at the edges."""
    idx = np.flatnonzero(series.valid)
    if idx.size < 2:
        raise UnusableSeriesError(f"series {series.key} has {idx.size} valid points, need 2")
    t = np.arange(len(series))
    # np.interp clamps to the end values outside the valid range
    values = np.interp(t, idx, series.values[idx])
    if idx.size < len(series):
        log.info("series %s: filled %d missing points", series.key, len(series) - idx.size)
    return TrendSeries(series.group_id, series.element_id, values,
                       np.ones(len(series), dtype=bool), series.step_period)


def filter_sparse(series_list, min_valid=0.5):
    kept = [s for s in series_list if s.valid_fraction >= min_valid]
    if len(kept) < len(series_list):
        log.warning("dropped %d series with < %.0f%% valid points",
                    len(series_list) - len(kept), 100 * min_valid)
    return kept


# -------------------------------------------------------------- normalization

def fit_minmax(values):
    if isinstance(values, (list, tuple)):
        v = np.concatenate([np.ravel(np.asarray(x, dtype=np.float64)) for x in values] or [[]])
    else:
        v = np.ravel(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise DataIntegrityError("no values to fit normalization on")
    return NormStats(float(v.min()), float(v.max()))


def normalize(x, stats):
    return (np.asarray(x, dtype=np.float64) - stats.min) / stats.scale


def denormalize(x, stats):
    return np.asarray(x, dtype=np.float64) * stats.scale + stats.min


# ------------------------------------------------------------------ windowing

def make_windows(series, T, T_prime, stride=1, steps_per_year=None, values=None):
    """Slide a (T history, T_prime future) window over ``series``.

    ``values`` overrides ``series.values`` (e.g. normalized copies). Returns
    an empty list when the series is shorter than ``T + T_prime``.
    """
    if T < 1 or T_prime < 1 or stride < 1:
        raise ConfigError(f"invalid window config T={T}, T'={T_prime}, stride={stride}")
    spy = steps_per_year or STEPS_PER_YEAR[series.step_period]
    v = series.values if values is None else np.asarray(values, dtype=np.float64)
    pos = np.arange(len(v)) % spy
    out = []
    for s in range(0, len(v) - T - T_prime + 1, stride):
        out.append(Sample(series.key, s, v[s:s + T].copy(), v[s + T:s + T + T_prime].copy(),
                          pos[s:s + T].copy(), pos[s + T:s + T + T_prime].copy()))
    return out


@dataclass
class Split:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)


def split_train_eval(samples, k=6, drop_overlap=True):
    """Hold out the last ``k`` samples of one series.

    Held-out samples at even positions go to validation, odd positions to
    test; with ``k == 1`` the single held-out sample is the test set.
    Training samples whose future reaches the first held-out target step are
    dropped.
    """
    if len(samples) < k + 1:
        raise DataIntegrityError(f"{len(samples)} samples, need at least {k + 1} to hold out {k}")
    held = samples[-k:]
    if k == 1:
        validation, test = [], list(held)
    else:
        validation, test = held[0::2], held[1::2]
    train = samples[:-k]
    if drop_overlap:
        first_target = min(s.target_range[0] for s in held)
        train = [s for s in train if s.target_range[1] <= first_target]
    return Split(train, validation, test)


def check_no_leakage(split):
    """Raise if a training window touches a test or validation target range."""
    first = {}
    for s in split.test + split.validation:
        a = s.target_range[0]
        first[s.key] = min(first.get(s.key, a), a)
    for s in split.train:
        lim = first.get(s.key)
        if lim is not None and s.target_range[1] > lim:
            raise DataIntegrityError(
                f"training window {s.key}@{s.start} overlaps held-out targets from step {lim}")


@dataclass
class Prepared:
    """Normalized series plus the windowed split for one experiment setting."""
    dataset: Dataset
    stats: NormStats
    values: dict
    split: Split
    T: int
    T_prime: int
    holdout: int
    train_end: dict


def prepare(dataset, T, T_prime, holdout=6, train_stride=1, holdout_stride=1, stats=None):
    """Repair, normalize and window every series of ``dataset``.

    Normalization stats are fitted on the steps preceding each series' first
    held-out target unless ``stats`` is given. Series too short for the split
    are skipped with a warning.
    """
    spy = dataset.steps_per_year
    repaired, ends = {}, {}
    for s in dataset.series:
        # at least one training window must end before the first held-out target
        need = T + 2 * T_prime + (holdout - 1) * holdout_stride
        if len(s) < need:
            log.warning("series %s: length %d < %d, excluded", s.key, len(s), need)
            continue
        if not s.valid.all():
            s = interpolate_missing(s)
        repaired[s.key] = s
        last_start = len(s) - T - T_prime
        first_held = last_start - (holdout - 1) * holdout_stride
        ends[s.key] = first_held + T
    if not repaired:
        raise DataIntegrityError("no series long enough for the requested split")
    if stats is None:
        stats = fit_minmax([repaired[k].values[:ends[k]] for k in repaired])
    values = {k: normalize(s.values, stats) for k, s in repaired.items()}
    split = Split()
    for key, s in repaired.items():
        windows = make_windows(s, T, T_prime, 1, spy, values[key])
        held = windows[len(windows) - 1 - (holdout - 1) * holdout_stride::holdout_stride]
        train = [w for w in windows if w.target_range[1] <= ends[key]][::train_stride]
        part = split_train_eval(train + held, k=holdout)
        split.train += part.train
        split.validation += part.validation
        split.test += part.test
    check_no_leakage(split)
    return Prepared(dataset, stats, values, split, T, T_prime, holdout, ends)


# ------------------------------------------------------------------------ IO

def read_series_csv(path, step_period="half_month"):
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            key = (r["group_id"], r["element_id"])
            valid = r.get("valid", "1").strip() not in ("0", "false", "False", "")
            val = float(r["value"]) if valid and r["value"].strip() else np.nan
            rows.setdefault(key, {})[int(r["t"])] = (val, valid and not np.isnan(val))
    out = []
    for (g, e), steps in rows.items():
        n = max(steps) + 1
        values, valid = np.zeros(n), np.zeros(n, dtype=bool)
        for t, (v, ok) in steps.items():
            if ok:
                values[t], valid[t] = v, True
        out.append(TrendSeries(g, e, values, valid, step_period))
    return out


def read_counts_csv(path, step_period="half_month"):
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            key = (r["group_id"], r["element_id"])
            rows.setdefault(key, {})[int(r["t"])] = (int(r["element_count"]), int(r["total_count"]))
    out = []
    for (g, e), steps in rows.items():
        n = max(steps) + 1
        cnt, tot = np.zeros(n), np.zeros(n)
        for t, (a, b) in steps.items():
            cnt[t], tot[t] = a, b
        try:
            values, valid = compute_popularity(cnt, tot)
        except DataIntegrityError as err:
            raise DataIntegrityError(f"series {(g, e)}: {err}") from None
        out.append(TrendSeries(g, e, values, valid, step_period))
    return out


def write_series_csv(series_list, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", "element_id", "t", "value", "valid"])
        for s in series_list:
            for t in range(len(s)):
                ok = bool(s.valid[t])
                w.writerow([s.group_id, s.element_id, t, repr(float(s.values[t])) if ok else "", int(ok)])


def load_dataset(directory, min_valid=0.5):
    """Read a dataset directory described by ``manifest.json``."""
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"no manifest.json in {d}") from None
    period = manifest.get("step_period", "half_month")
    spy = int(manifest.get("steps_per_year", STEPS_PER_YEAR.get(period, 24)))
    files = manifest.get("files", manifest)
    if "series" in files:
        series = read_series_csv(d / files["series"], period)
    elif "counts" in files:
        series = read_counts_csv(d / files["counts"], period)
    else:
        raise ConfigError("manifest names neither a series nor a counts file")
    elements = [FashionElement(x["id"], x["kind"], x.get("parent_id"))
                for x in json.loads((d / files["taxonomy"]).read_text(encoding="utf-8"))]
    groups = [UserGroup(x["id"], x["city"], x["gender"], x.get("age_band"))
              for x in json.loads((d / files["groups"]).read_text(encoding="utf-8"))]
    known_e = {e.id for e in elements}
    known_g = {g.id for g in groups}
    for s in series:
        if s.element_id not in known_e or s.group_id not in known_g:
            raise DataIntegrityError(f"series {s.key} references an unknown group or element")
    series = filter_sparse(series, min_valid)
    return Dataset(series, elements, groups, period, spy)


def save_dataset(dataset, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_series_csv(dataset.series, d / "series.csv")
    (d / "taxonomy.json").write_text(json.dumps(
        [{"id": e.id, "kind": e.kind, "parent_id": e.parent_id} for e in dataset.elements],
        indent=1) + "\n", encoding="utf-8")
    (d / "groups.json").write_text(json.dumps(
        [{"id": g.id, "city": g.city, "gender": g.gender, "age_band": g.age_band}
         for g in dataset.groups], indent=1) + "\n", encoding="utf-8")
    manifest = {"step_period": dataset.step_period, "steps_per_year": dataset.steps_per_year,
                "files": {"series": "series.csv", "taxonomy": "taxonomy.json",
                          "groups": "groups.json"}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return d
