"""Dataset construction: synthetic generators, IDX/CSV loaders, preprocessing.

Everything lands in one immutable :class:`Dataset` value (float64 features,
integer labels, optional protected-group labels). Generators take an explicit
Rng; loaders are deterministic. Tabular preprocessing is schema-driven so the
same code path handles differently laid out census files.
"""

from __future__ import annotations

import csv
import gzip
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataFormatError, ParameterError
from .numkit import Rng


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus labels, with optional protected-group labels."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    groups: np.ndarray | None = None
    feature_names: tuple[str, ...] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.features.ndim != 2:
            raise ParameterError(f"features must be 2-d, got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise ParameterError(f"labels shape {self.labels.shape} != ({n},)")
        if not np.all(np.isfinite(self.features)):
            raise ParameterError("features contain non-finite values")
        if self.num_classes < 1:
            raise ParameterError(f"num_classes must be >= 1, got {self.num_classes}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ParameterError("labels out of range [0, num_classes)")
        if self.groups is not None:
            object.__setattr__(self, "groups", np.asarray(self.groups, dtype=np.int64))
            if self.groups.shape != (n,):
                raise ParameterError(f"groups shape {self.groups.shape} != ({n},)")
            if n and self.groups.min() < 0:
                raise ParameterError("group ids must be >= 0")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_groups(self) -> int:
        if self.groups is None or self.groups.size == 0:
            return 0
        return int(self.groups.max()) + 1

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[idx],
            self.labels[idx],
            self.num_classes,
            None if self.groups is None else self.groups[idx],
            self.feature_names,
        )


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------


def gen_bimodal(
    n: int,
    p_major: float,
    mode_lo: float,
    mode_hi: float,
    jitter_std: float,
    rng: Rng,
) -> Dataset:
    """1-d two-mode sample: floor(p_major * n) points at the low mode, rest high.

    With jitter_std = 0 the values are exact point masses; otherwise each point
    gets independent N(0, jitter_std^2) noise. Labels mark the mode (0 = low).
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if not 0.0 < p_major < 1.0:
        raise ParameterError(f"p_major must be in (0, 1), got {p_major}")
    if jitter_std < 0:
        raise ParameterError(f"jitter_std must be >= 0, got {jitter_std}")
    n_lo = int(np.floor(p_major * n))
    values = np.concatenate([np.full(n_lo, mode_lo), np.full(n - n_lo, mode_hi)])
    labels = np.concatenate([np.zeros(n_lo, dtype=np.int64), np.ones(n - n_lo, dtype=np.int64)])
    if jitter_std > 0:
        values = values + rng.normal(0.0, jitter_std, n)
    order = rng.permutation(n)
    return Dataset(values[order][:, None], labels[order], 2)


def _blob_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Deterministic class centers with pairwise distance >= separation.

    Classes cycle through the coordinate axes; once the axes are exhausted the
    magnitude steps up enough that same-axis centers also stay `separation`
    apart. For num_classes <= dim every pairwise distance is exactly
    `separation`.
    """
    means = np.zeros((num_classes, dim))
    base = separation / np.sqrt(2.0)
    for k in range(num_classes):
        axis = k % dim
        ring = k // dim
        means[k, axis] = base * (1.0 + ring * np.sqrt(2.0))
    return means


def gen_skewed_classification(
    n_per_class: int,
    num_classes: int,
    minority_class: int,
    keep_fraction: float,
    cluster_separation: float,
    dim: int,
    rng: Rng,
) -> Dataset:
    """Gaussian class blobs (unit noise) with one class subsampled.

    keep_fraction = 1 yields balanced blobs; cluster_separation = 0 collapses
    all classes onto one blob.
    """
    if num_classes < 2:
        raise ParameterError(f"num_classes must be >= 2, got {num_classes}")
    if dim < 1:
        raise ParameterError(f"dim must be >= 1, got {dim}")
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    if not 0 <= minority_class < num_classes:
        raise ParameterError(f"minority_class {minority_class} out of range")
    if not 0.0 < keep_fraction <= 1.0:
        raise ParameterError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if cluster_separation < 0:
        raise ParameterError(f"cluster_separation must be >= 0, got {cluster_separation}")
    means = _blob_means(num_classes, dim, cluster_separation)
    feats = []
    labels = []
    for k in range(num_classes):
        feats.append(means[k] + rng.normal(0.0, 1.0, (n_per_class, dim)))
        labels.append(np.full(n_per_class, k, dtype=np.int64))
    order = rng.permutation(num_classes * n_per_class)
    ds = Dataset(np.concatenate(feats)[order], np.concatenate(labels)[order], num_classes)
    if keep_fraction < 1.0:
        ds = skew_class(ds, minority_class, keep_fraction, rng)
    return ds


def skew_class(ds: Dataset, class_id: int, keep_fraction: float, rng: Rng) -> Dataset:
    """Subsample one class to floor(keep_fraction * count), preserving row order."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ParameterError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if not 0 <= class_id < ds.num_classes:
        raise ParameterError(f"class_id {class_id} out of range [0, {ds.num_classes})")
    if keep_fraction == 1.0:
        return ds
    member = np.flatnonzero(ds.labels == class_id)
    if member.size == 0:
        warnings.warn(f"skew_class: class {class_id} has no samples; nothing to do")
        return ds
    target = int(np.floor(keep_fraction * member.size))
    kept = member[np.sort(rng.choice(member.size, size=target, replace=False))]
    mask = np.ones(ds.n, dtype=bool)
    mask[member] = False
    mask[kept] = True
    return ds.subset(np.flatnonzero(mask))


def balance_by_attribute(ds: Dataset, rng: Rng) -> Dataset:
    """Subsample each protected group without replacement to the smallest one."""
    if ds.groups is None:
        raise ParameterError("balance_by_attribute requires group labels")
    values = np.unique(ds.groups)
    if values.size < 2:
        raise ParameterError(f"need >= 2 groups to balance, got {values.size}")
    floor = min(int(np.sum(ds.groups == g)) for g in values)
    keep = []
    for g in values:
        member = np.flatnonzero(ds.groups == g)
        keep.append(member[np.sort(rng.choice(member.size, size=floor, replace=False))])
    return ds.subset(np.sort(np.concatenate(keep)))


# ---------------------------------------------------------------------------
# IDX image files
# ---------------------------------------------------------------------------

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path) -> np.ndarray:
    """Parse one big-endian IDX file (.gz transparent) into an ndarray."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: too short for an IDX header")
    zero, ndim = raw[0] << 8 | raw[1], raw[3]
    code = raw[2]
    if zero != 0 or code not in _IDX_DTYPES or ndim < 1:
        raise DataFormatError(f"{path}: bad IDX magic {raw[:4].hex()}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_DTYPES[code]
    expect = int(np.prod(dims)) * dtype.itemsize
    payload = raw[header_end:]
    if len(payload) != expect:
        raise DataFormatError(f"{path}: payload {len(payload)} bytes, expected {expect}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """(n x pixels features scaled to [0,1], n labels) from a paired IDX set."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DataFormatError(f"{images_path}: expected 3-d image file, got {images.ndim}-d")
    if labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: expected 1-d label file, got {labels.ndim}-d")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}"
        )
    n = images.shape[0]
    features = images.reshape(n, -1).astype(np.float64) / 255.0
    return features, labels.astype(np.int64)


def load_idx_dataset(images_path, labels_path, num_classes: int = 10) -> Dataset:
    features, labels = load_idx(images_path, labels_path)
    return Dataset(features, labels, num_classes)


# ---------------------------------------------------------------------------
# Tabular preprocessing
# ---------------------------------------------------------------------------

COLUMN_KINDS = ("numeric", "categorical", "binary", "drop", "target", "protected")


@dataclass(frozen=True)
class TabularSchema:
    """Column roles plus value-mapping rules for one tabular layout.

    kinds maps every column name to one of numeric | categorical | binary |
    drop | target | protected. `binary` columns are categoricals with exactly
    two levels, encoded as a single 0/1 feature (alphabetically later level is
    1); plain categoricals become one-hot blocks in alphabetical level order.
    `collapse` rewrites raw cell values before any encoding; raws missing from
    a column's map fall back to `collapse_default[col]` when present. Target
    cells are mapped through `target_map` after collapsing; rows whose target
    is unmapped are dropped.
    """

    kinds: Mapping[str, str]
    target_map: Mapping[str, int]
    collapse: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    collapse_default: Mapping[str, str] = field(default_factory=dict)
    missing_tokens: tuple[str, ...] = ("?", "")

    def __post_init__(self):
        for col, kind in self.kinds.items():
            if kind not in COLUMN_KINDS:
                raise ParameterError(f"column {col!r}: unknown kind {kind!r}")
        targets = [c for c, k in self.kinds.items() if k == "target"]
        if len(targets) != 1:
            raise ParameterError(f"schema needs exactly one target column, got {targets}")
        protected = [c for c, k in self.kinds.items() if k == "protected"]
        if len(protected) > 1:
            raise ParameterError(f"schema allows at most one protected column, got {protected}")
        if not self.target_map:
            raise ParameterError("target_map must be non-empty")

    @property
    def target(self) -> str:
        return next(c for c, k in self.kinds.items() if k == "target")

    @property
    def protected(self) -> str | None:
        return next((c for c, k in self.kinds.items() if k == "protected"), None)

    def columns_of(self, kind: str) -> list[str]:
        return [c for c, k in self.kinds.items() if k == kind]


def read_csv_rows(path) -> list[dict]:
    """Rows of a header-first CSV as column-name keyed dicts, cells stripped."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, skipinitialspace=True)
        if reader.fieldnames is None:
            raise DataFormatError(f"{path}: empty CSV")
        rows = []
        for row in reader:
            if None in row or any(v is None for v in row.values()):
                raise DataFormatError(f"{path}: ragged row near line {reader.line_num}")
            rows.append({k.strip(): v.strip() for k, v in row.items()})
    return rows


def split_rows(rows: Sequence[dict], test_fraction: float, rng: Rng) -> tuple[list, list]:
    """Shuffle rows and cut off the trailing fraction as a test split."""
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(f"test_fraction must be in (0, 1), got {test_fraction}")
    order = rng.permutation(len(rows))
    n_test = int(round(test_fraction * len(rows)))
    train_idx, test_idx = order[: len(rows) - n_test], order[len(rows) - n_test :]
    return [rows[i] for i in train_idx], [rows[i] for i in test_idx]


def _collapse_cell(schema: TabularSchema, col: str, raw: str) -> str:
    mapped = schema.collapse.get(col, {}).get(raw)
    if mapped is not None:
        return mapped
    return schema.collapse_default.get(col, raw)


def _clean_rows(rows: Sequence[dict], schema: TabularSchema) -> tuple[list[dict], int, int]:
    """Drop rows with missing cells or unmapped targets; collapse the rest."""
    live_cols = [c for c, k in schema.kinds.items() if k != "drop"]
    kept, dropped_missing, dropped_target = [], 0, 0
    for row in rows:
        extra = set(row) - set(schema.kinds)
        missing = set(schema.kinds) - set(row)
        if extra or missing:
            raise DataFormatError(
                f"row columns do not match schema (extra: {sorted(extra)}, missing: {sorted(missing)})"
            )
        if any(row[c] in schema.missing_tokens for c in live_cols):
            dropped_missing += 1
            continue
        clean = {c: _collapse_cell(schema, c, row[c]) for c in live_cols}
        if clean[schema.target] not in schema.target_map:
            dropped_target += 1
            continue
        kept.append(clean)
    return kept, dropped_missing, dropped_target


def _fit_levels(rows: Sequence[dict], col: str) -> tuple[str, ...]:
    return tuple(sorted({row[col] for row in rows}))


def _encode_level(col: str, levels: tuple[str, ...], value: str) -> int:
    try:
        return levels.index(value)
    except ValueError:
        raise DataFormatError(
            f"column {col!r}: unseen categorical level {value!r} (known: {list(levels)})"
        ) from None


def preprocess_tabular(
    rows: Sequence[dict], schema: TabularSchema, fit_rows: Sequence[dict] | None = None
) -> Dataset:
    """Encode header-keyed rows into a Dataset under the schema's rules.

    Numeric columns are standardized with mean/std taken from `fit_rows`
    (defaulting to `rows` itself); pass the training rows as `fit_rows` when
    encoding a test split so both splits share statistics and category levels.
    A level absent from the fit split raises a format error naming the column.
    Rows with missing cells or unmapped target values are dropped; the counts
    land in Dataset.meta.
    """
    clean, dropped_missing, dropped_target = _clean_rows(rows, schema)
    if fit_rows is None:
        fit_clean = clean
    else:
        fit_clean, _, _ = _clean_rows(fit_rows, schema)
    if not fit_clean:
        raise DataFormatError("no usable rows to fit preprocessing statistics")

    numeric = schema.columns_of("numeric")
    categorical = schema.columns_of("categorical")
    binary = schema.columns_of("binary")

    stats = {}
    for col in numeric:
        vals = []
        for row in fit_clean:
            try:
                vals.append(float(row[col]))
            except ValueError:
                raise DataFormatError(f"column {col!r}: non-numeric cell {row[col]!r}") from None
        mean = float(np.mean(vals))
        std = float(np.std(vals))
        stats[col] = (mean, std if std > 0 else 1.0)
    levels = {col: _fit_levels(fit_clean, col) for col in categorical + binary}
    for col in binary:
        if len(levels[col]) != 2:
            raise DataFormatError(
                f"column {col!r}: binary encoding needs exactly 2 levels, got {list(levels[col])}"
            )

    names: list[str] = []
    for col in numeric:
        names.append(col)
    for col in categorical:
        names.extend(f"{col}={lvl}" for lvl in levels[col])
    for col in binary:
        names.append(f"{col}={levels[col][1]}")

    features = np.zeros((len(clean), len(names)))
    labels = np.zeros(len(clean), dtype=np.int64)
    protected = schema.protected
    group_levels = _fit_levels(fit_clean, protected) if protected else None
    groups = np.zeros(len(clean), dtype=np.int64) if protected else None
    for i, row in enumerate(clean):
        j = 0
        for col in numeric:
            try:
                value = float(row[col])
            except ValueError:
                raise DataFormatError(f"column {col!r}: non-numeric cell {row[col]!r}") from None
            mean, std = stats[col]
            features[i, j] = (value - mean) / std
            j += 1
        for col in categorical:
            features[i, j + _encode_level(col, levels[col], row[col])] = 1.0
            j += len(levels[col])
        for col in binary:
            features[i, j] = float(_encode_level(col, levels[col], row[col]))
            j += 1
        labels[i] = schema.target_map[row[schema.target]]
        if protected:
            groups[i] = _encode_level(protected, group_levels, row[protected])
    num_classes = max(schema.target_map.values()) + 1
    return Dataset(
        features,
        labels,
        num_classes,
        groups,
        tuple(names),
        meta={"dropped_missing": dropped_missing, "dropped_target": dropped_target},
    )


def adult_schema() -> TabularSchema:
    """Adult census income layout: predict income bracket, sex as the group.

    The final-weight survey column is dropped; race is collapsed to a single
    white/non-white binary feature (non-white = 0, white = 1 by the
    alphabetical rule).
    """
    kinds = {
        "age": "numeric",
        "workclass": "categorical",
        "fnlwgt": "drop",
        "education": "categorical",
        "education-num": "numeric",
        "marital-status": "categorical",
        "occupation": "categorical",
        "relationship": "categorical",
        "race": "binary",
        "sex": "protected",
        "capital-gain": "numeric",
        "capital-loss": "numeric",
        "hours-per-week": "numeric",
        "native-country": "categorical",
        "income": "target",
    }
    return TabularSchema(
        kinds=kinds,
        target_map={"<=50K": 0, ">50K": 1},
        collapse={
            "race": {"White": "white"},
            "income": {"<=50K.": "<=50K", ">50K.": ">50K"},
        },
        collapse_default={"race": "non-white"},
    )


def dutch_schema() -> TabularSchema:
    """Dutch census layout: occupation prestige as the label, sex as the group.

    Occupation codes 1 and 2 count as high-level (label 1), codes 4, 5 and 9
    as low-level (label 0); rows with any other code are dropped. All
    non-target columns in this source are coded categoricals.
    """
    kinds = {
        "sex": "protected",
        "age": "categorical",
        "household_position": "categorical",
        "household_size": "categorical",
        "prev_residence_place": "categorical",
        "citizenship": "categorical",
        "country_birth": "categorical",
        "edu_level": "categorical",
        "economic_status": "categorical",
        "cur_eco_activity": "categorical",
        "marital_status": "categorical",
        "occupation": "target",
    }
    return TabularSchema(
        kinds=kinds,
        target_map={"high-level": 1, "low-level": 0},
        collapse={
            "occupation": {
                "1": "high-level",
                "2": "high-level",
                "4": "low-level",
                "5": "low-level",
                "9": "low-level",
            }
        },
    )
