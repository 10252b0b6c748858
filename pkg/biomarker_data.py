"""Glaucoma biomarker schema, patient records, synthetic cohorts and CSV I/O.

Seventeen biomarkers: the sixteen OCT-derived values of the RNFL, ONH and
GCC analyses plus intraocular pressure. Each record carries right-eye (OD),
left-eye (OS) and intra-eye difference (IE = OD - OS) values.
"""

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from errors import ConfigError, ParseError, ValidationError
from linalg_core import RngStream

logger = logging.getLogger(__name__)

CATEGORIES = ("RNFL", "ONH", "GCC")
IE_TOLERANCE = 1e-6
STD_FLOOR = 1e-8
EYES = ("od", "os", "ie")


@dataclass(frozen=True)
class Biomarker:
    code: str
    name: str
    category: str
    unit: str


@dataclass(frozen=True)
class BiomarkerSchema:
    biomarkers: tuple

    def __post_init__(self):
        codes = [b.code for b in self.biomarkers]
        if len(set(codes)) != len(codes):
            raise ConfigError(f"biomarker codes are not unique: {codes}")

    def __len__(self):
        return len(self.biomarkers)

    @property
    def codes(self) -> tuple:
        return tuple(b.code for b in self.biomarkers)

    @property
    def n_classes(self) -> int:
        """Parent classes: every biomarker, the three categories, and the decision root."""
        return len(self.biomarkers) + len(CATEGORIES) + 1

    @property
    def root_class(self) -> int:
        return self.n_classes - 1

    def index(self, code: str) -> int:
        return self.codes.index(code)

    def category_class(self, category: str) -> int:
        return len(self.biomarkers) + CATEGORIES.index(category)

    def parent_class(self, i: int) -> int:
        """Ground-truth subordination target of biomarker ``i``."""
        category = self.biomarkers[i].category
        if category == "IOP":
            return self.root_class
        return self.category_class(category)

    def ground_truth_parents(self) -> tuple:
        return tuple(self.parent_class(i) for i in range(len(self)))

    def class_label(self, k: int) -> str:
        if k < len(self.biomarkers):
            return self.biomarkers[k].code
        if k < self.root_class:
            return CATEGORIES[k - len(self.biomarkers)]
        return "ROOT"

    def has_ie(self, i: int) -> bool:
        return self.biomarkers[i].code not in DIFFERENCE_CODES

    def schema_hash(self) -> str:
        text = "|".join(f"{b.code}:{b.category}:{b.unit}" for b in self.biomarkers)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


SCHEMA = BiomarkerSchema((
    Biomarker("A-R", "Average RNFL", "RNFL", "µm"),
    Biomarker("S-R", "Superior RNFL", "RNFL", "µm"),
    Biomarker("I-R", "Inferior RNFL", "RNFL", "µm"),
    Biomarker("I-ER", "Intra Eye (S-I) RNFL", "RNFL", "µm"),
    Biomarker("A-O", "Cup/Disc Area Ratio", "ONH", "ratio"),
    Biomarker("V-O", "Cup/Disc V. Ratio", "ONH", "ratio"),
    Biomarker("H-O", "Cup/Disc H. Ratio", "ONH", "ratio"),
    Biomarker("RA", "Rim Area", "ONH", "mm²"),
    Biomarker("DA", "Disc Area", "ONH", "mm²"),
    Biomarker("CVO", "Cup Volume", "ONH", "mm²"),
    Biomarker("A-G", "Average GCC", "GCC", "µm"),
    Biomarker("S-G", "Superior GCC", "GCC", "µm"),
    Biomarker("I-F", "Inferior GCC", "GCC", "µm"),
    Biomarker("I-EG", "Intra Eye (S-I) GCC", "GCC", "µm"),
    Biomarker("FLV", "Focal Loss Volume", "GCC", "dimensionless"),
    Biomarker("GLV", "Global Loss Volume", "GCC", "dimensionless"),
    Biomarker("IOP", "Intraocular Pressure", "IOP", "mmHg"),
))

# S-I differences: their IE column is N/A
DIFFERENCE_CODES = frozenset({"I-ER", "I-EG"})
THICKNESS_CODES = frozenset({"A-R", "S-R", "I-R", "A-G", "S-G", "I-F"})

# Generator profile: (normal mean, glaucoma mean, sd, lower bound, upper bound).
# Normal means follow the OD column of the published sample record; IOP uses
# 15 vs 24 mmHg with sd 3.
GENERATOR_PROFILE = {
    "A-R": (97.0, 75.0, 8.0, 1.0, None),
    "S-R": (94.0, 72.0, 10.0, 1.0, None),
    "I-R": (99.0, 74.0, 10.0, 1.0, None),
    "I-ER": (-5.0, -2.0, 6.0, None, None),
    "A-O": (0.28, 0.55, 0.10, 0.01, 0.99),
    "V-O": (0.46, 0.72, 0.10, 0.01, 0.99),
    "H-O": (0.62, 0.78, 0.10, 0.01, 0.99),
    "RA": (1.44, 0.95, 0.25, 0.01, None),
    "DA": (2.01, 2.10, 0.35, 0.01, None),
    "CVO": (0.043, 0.30, 0.05, 0.001, None),
    "A-G": (85.0, 70.0, 7.0, 1.0, None),
    "S-G": (81.0, 68.0, 8.0, 1.0, None),
    "I-F": (88.0, 70.0, 8.0, 1.0, None),
    "I-EG": (-7.0, -3.0, 5.0, None, None),
    "FLV": (0.87, 4.0, 1.0, 0.0, None),
    "GLV": (10.76, 18.0, 4.0, 0.0, None),
    "IOP": (15.0, 24.0, 3.0, 1.0, None),
}

# token layout: one-hot identity (17 biomarkers + null padding), then one
# (od, os, ie) slot per biomarker; only the slot of the token's own biomarker is filled
NULL_TOKEN = len(SCHEMA)
N_IDENTITIES = len(SCHEMA) + 1
TOKEN_DIM = N_IDENTITIES + len(SCHEMA) * len(EYES)


def value_slot(i: int) -> slice:
    """Token rows holding the (od, os, ie) values of biomarker ``i``."""
    start = N_IDENTITIES + len(EYES) * i
    return slice(start, start + len(EYES))


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    label: int
    od: tuple
    os: tuple
    ie: tuple
    flags: tuple = ()

    @property
    def diagnosis(self) -> str:
        return "Glaucoma" if self.label == 1 else "Normal"


@dataclass(frozen=True)
class NormalizerStats:
    mean: tuple
    std: tuple

    def arrays(self):
        return np.array(self.mean, dtype=np.float64), np.array(self.std, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"mean": [list(row) for row in self.mean], "std": [list(row) for row in self.std]}

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizerStats":
        return cls(tuple(tuple(float(x) for x in row) for row in data["mean"]),
                   tuple(tuple(float(x) for x in row) for row in data["std"]))


@dataclass(frozen=True)
class Dataset:
    schema: BiomarkerSchema
    records: tuple
    stats: Optional[NormalizerStats] = None

    def __len__(self):
        return len(self.records)

    @property
    def normalized(self) -> bool:
        return self.stats is not None

    @property
    def subordination(self) -> tuple:
        return self.schema.ground_truth_parents()

    def values(self) -> np.ndarray:
        """``N x 17 x 3`` array of (od, os, ie); N/A IE cells are NaN."""
        out = np.empty((len(self.records), len(self.schema), len(EYES)))
        for n, r in enumerate(self.records):
            out[n, :, 0] = r.od
            out[n, :, 1] = r.os
            out[n, :, 2] = [np.nan if v is None else v for v in r.ie]
        return out

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return replace(self, records=tuple(self.records[i] for i in indices))


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 2000
    glaucoma_fraction: float = 0.5
    noise_scale: float = 1.0
    seed: int = 7
    separability: float = 1.0

    def __post_init__(self):
        if self.n_patients < 4:
            raise ConfigError(f"n_patients must be at least 4, got {self.n_patients}")
        if not 0.0 < self.glaucoma_fraction < 1.0:
            raise ConfigError(f"glaucoma_fraction must lie in (0, 1), got {self.glaucoma_fraction}")
        if not self.noise_scale >= 0.0:
            raise ConfigError(f"noise_scale must be non-negative, got {self.noise_scale}")
        if not self.separability >= 0.0:
            raise ConfigError(f"separability must be non-negative, got {self.separability}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


def _make_record(schema: BiomarkerSchema, patient_id: str, label: int, od, os, flags=()) -> PatientRecord:
    ie = tuple(float(a - b) if schema.has_ie(i) else None for i, (a, b) in enumerate(zip(od, os)))
    return PatientRecord(patient_id, int(label), tuple(float(x) for x in od), tuple(float(x) for x in os), ie, flags)


def generate_synthetic(cfg: GeneratorConfig, schema: BiomarkerSchema = SCHEMA) -> Dataset:
    """Class-conditional Gaussian cohort with the schema's subordination as ground truth.

    Each record draws from its own substream, so output does not depend on
    generation order.
    """
    profile = np.array([GENERATOR_PROFILE[code][:3] for code in schema.codes])
    normal_mean, glaucoma_mean, sd = profile[:, 0], profile[:, 1], profile[:, 2]
    lower = np.array([GENERATOR_PROFILE[c][3] if GENERATOR_PROFILE[c][3] is not None else -np.inf for c in schema.codes])
    upper = np.array([GENERATOR_PROFILE[c][4] if GENERATOR_PROFILE[c][4] is not None else np.inf for c in schema.codes])
    root = RngStream(cfg.seed).child("cohort")
    records = []
    for n in range(cfg.n_patients):
        rng = root.child(f"record-{n}")
        label = int(rng.random() < cfg.glaucoma_fraction)
        mean = normal_mean + label * cfg.separability * (glaucoma_mean - normal_mean)
        shared = rng.normal(size=len(schema))
        # 0.8/0.6 mix keeps unit variance while correlating the two eyes
        od = mean + cfg.noise_scale * sd * (0.8 * shared + 0.6 * rng.normal(size=len(schema)))
        os = mean + cfg.noise_scale * sd * (0.8 * shared + 0.6 * rng.normal(size=len(schema)))
        od = np.clip(od, lower, upper)
        os = np.clip(os, lower, upper)
        records.append(_make_record(schema, f"P{n:05d}", label, od, os))
    n_pos = sum(r.label for r in records)
    logger.info(f"Generated {len(records)} synthetic records ({n_pos} glaucoma, seed {cfg.seed})")
    return Dataset(schema, tuple(records))


# -- CSV --------------------------------------------------------------------

def csv_header(schema: BiomarkerSchema) -> list:
    header = ["patient_id", "label"]
    for code in schema.codes:
        header += [f"{code}_{eye}" for eye in EYES]
    return header


def flag_header(schema: BiomarkerSchema) -> list:
    return [f"{code}_{eye}_flag" for code in schema.codes for eye in ("od", "os")]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def save_csv(d: Dataset, path) -> None:
    with_flags = any(r.flags for r in d.records)
    header = csv_header(d.schema) + (flag_header(d.schema) if with_flags else [])
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for r in d.records:
            row = [r.patient_id, str(r.label)]
            for i in range(len(d.schema)):
                row += [_fmt(r.od[i]), _fmt(r.os[i]), _fmt(r.ie[i])]
            if with_flags:
                flags = dict(r.flags)
                row += [flags.get(col, "") for col in flag_header(d.schema)]
            writer.writerow(row)
    logger.info(f"Saved {len(d.records)} records to {path}")


def _parse_float(text: str, line: int, column: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"cannot parse {text!r} as a number", line, column) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {text!r}", line, column)
    return value


def load_csv(path, schema: BiomarkerSchema = SCHEMA) -> Dataset:
    """
    Read and validate a cohort CSV written by :func:`save_csv` (or by hand).
    Args:
        path: CSV file with the `patient_id,label,<code>_od,<code>_os,<code>_ie,...` header.
        schema: biomarker schema the columns must follow.
    Returns:
        Dataset: the un-normalized records, in file order.
    Raises:
        ParseError: malformed file, naming line and column where known.
        ValidationError: well-formed values that break a record invariant.
    """
    with open(path, "rb") as f:
        raw = f.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        line = raw.count(b"\n", 0, e.start) + 1
        raise ParseError(f"{path} is not valid UTF-8 text: {e.reason}", line) from None
    rows = list(csv.reader(io.StringIO(text, newline="")))
    if not rows:
        raise ParseError(f"{path} is empty", 1)
    header = rows[0]
    expected = csv_header(schema)
    if header[:len(expected)] != expected:
        raise ParseError(f"unexpected header in {path}; expected columns {expected}", 1)
    extra = header[len(expected):]
    unknown = [c for c in extra if c not in flag_header(schema)]
    if unknown:
        raise ParseError(f"unknown columns {unknown}", 1, len(expected) + 1)
    if len(rows) == 1:
        raise ParseError(f"{path} has a header but no records", 2)

    records = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", line)
        patient_id, label_text = row[0], row[1]
        if label_text not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, got {label_text!r}", line, 2)
        od, os, ie = [], [], []
        for i, code in enumerate(schema.codes):
            col = 2 + 3 * i
            a = _parse_float(row[col], line, col + 1)
            b = _parse_float(row[col + 1], line, col + 2)
            ie_text = row[col + 2]
            if not schema.has_ie(i):
                if ie_text != "":
                    raise ValidationError(f"line {line}: {code}_ie must be empty (N/A)")
                ie.append(None)
            else:
                diff = _parse_float(ie_text, line, col + 3)
                if abs(diff - (a - b)) > IE_TOLERANCE:
                    raise ValidationError(f"line {line}: {code} IE {diff} != OD - OS = {a - b}")
                ie.append(diff)
            if code in THICKNESS_CODES and (a <= 0.0 or b <= 0.0):
                raise ValidationError(f"line {line}: thickness {code} must be positive")
            od.append(a)
            os.append(b)
        flags = tuple((col, value) for col, value in zip(extra, row[len(expected):]) if value != "")
        # IE cells are kept as written so that load(save(d)) == d
        records.append(PatientRecord(patient_id, int(label_text), tuple(od), tuple(os), tuple(ie), flags))
    logger.info(f"Loaded {len(records)} records from {path}")
    return Dataset(schema, tuple(records))


# -- normalization ----------------------------------------------------------

def fit_normalizer(train: Dataset) -> NormalizerStats:
    """Per-biomarker, per-column z-score statistics (population std, floored)."""
    if not train.records:
        raise ConfigError("cannot fit a normalizer on an empty dataset")
    values = train.values()
    mean = np.zeros(values.shape[1:])
    std = np.ones(values.shape[1:])
    for i in range(values.shape[1]):
        for e in range(values.shape[2]):
            col = values[:, i, e]
            if np.all(np.isnan(col)):
                continue
            mean[i, e] = col.mean()
            s = col.std()
            if s < STD_FLOOR:
                logger.warning(f"Column {train.schema.codes[i]}_{EYES[e]} is constant; flooring std at {STD_FLOOR}")
                s = STD_FLOOR
            std[i, e] = s
    return NormalizerStats(tuple(map(tuple, mean.tolist())), tuple(map(tuple, std.tolist())))


def apply_normalizer(d: Dataset, stats: NormalizerStats) -> Dataset:
    mean, std = stats.arrays()
    records = []
    for r in d.records:
        od = (np.array(r.od) - mean[:, 0]) / std[:, 0]
        os = (np.array(r.os) - mean[:, 1]) / std[:, 1]
        ie = tuple(None if v is None else float((v - mean[i, 2]) / std[i, 2]) for i, v in enumerate(r.ie))
        records.append(replace(r, od=tuple(od.tolist()), os=tuple(os.tolist()), ie=ie))
    return Dataset(d.schema, tuple(records), stats)


# -- splitting and presentation order ----------------------------------------

def split_75_25(d: Dataset, seed: int):
    n = len(d.records)
    if n < 4:
        raise ConfigError(f"need at least 4 records to split, got {n}")
    perm = RngStream(seed).child("split").permutation(n)
    n_train = (3 * n) // 4
    return d.subset(perm[:n_train]), d.subset(perm[n_train:])


@dataclass(frozen=True, eq=False)
class TrainingView:
    """Rows of (record index, biomarker presentation permutation)."""

    record_index: np.ndarray
    permutations: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.record_index)


def presentation_orders(n_records: int, n_biomarkers: int, rng: Optional[RngStream]) -> np.ndarray:
    """One permutation per record; ``rng=None`` gives schema order."""
    if rng is None:
        return np.tile(np.arange(n_biomarkers), (n_records, 1))
    return np.argsort(rng.random((n_records, n_biomarkers)), axis=1, kind="stable")


def shuffle_order_augment(train: Dataset, copies: int, rng: RngStream, shuffle: bool = True) -> TrainingView:
    if copies < 1:
        raise ConfigError(f"copies must be at least 1, got {copies}")
    n = len(train.records)
    index, perms = [], []
    for c in range(copies):
        index.append(np.arange(n))
        perms.append(presentation_orders(n, len(train.schema), rng.child(f"copy-{c}") if shuffle else None))
    return TrainingView(np.concatenate(index), np.concatenate(perms))


def _check_permutation(permutation, n: int) -> np.ndarray:
    perm = np.asarray(permutation, dtype=np.int64)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ConfigError(f"not a permutation of {n} biomarker indices: {list(permutation)}")
    return perm


def partition_halves(schema: BiomarkerSchema, permutation):
    """Split a presentation order between the two encoders: first ceil(n/2) to stream 1."""
    perm = _check_permutation(permutation, len(schema))
    cut = (len(schema) + 1) // 2
    return tuple(int(i) for i in perm[:cut]), tuple(int(i) for i in perm[cut:])


def partition_halves_batch(permutations: np.ndarray):
    """Batched :func:`partition_halves`: returns ``(T x B, T x B)`` index arrays, stream 2 null-padded."""
    n = permutations.shape[1]
    cut = (n + 1) // 2
    first = permutations[:, :cut].T
    second = permutations[:, cut:].T
    if second.shape[0] < cut:
        pad = np.full((cut - second.shape[0], permutations.shape[0]), NULL_TOKEN)
        second = np.vstack([second, pad])
    return first, second


def encode_tokens(values: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Token tensor ``L x TOKEN_DIM x B`` for biomarker indices ``index`` (``L x B``).

    ``values`` is the ``B x 17 x 3`` normalized value array. Each biomarker
    writes its values into its own :func:`value_slot`. Null indices give the
    padding token; N/A IE cells encode as 0.
    """
    length, batch = index.shape
    tokens = np.zeros((length, batch, TOKEN_DIM))
    cols = np.arange(batch)
    filled = np.nan_to_num(values, nan=0.0)
    for t in range(length):
        idx = index[t]
        tokens[t, cols, idx] = 1.0
        real = idx != NULL_TOKEN
        base = N_IDENTITIES + len(EYES) * idx[real]
        for k in range(len(EYES)):
            tokens[t, cols[real], base + k] = filled[cols[real], idx[real], k]
    return np.ascontiguousarray(tokens.transpose(0, 2, 1))
