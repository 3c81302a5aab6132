"""Dataset ingestion, manifests, patient-level splitting, synthesis.

External file formats (normative):

* Manifest CSV, header ``sample_id,patient_id,site_id,label,kind,path``.
  ``label`` is 1..4 (1 control, 2 glycine substitution, 3 pseudoexon
  insertion, 4 exon skipping); ``kind`` is ``image`` (8-bit PPM) or
  ``features``; ``path`` is resolved relative to the manifest's
  directory.
* Feature file: first line ``fedhorizon-features v1 <d>``, second line
  ``d`` comma-separated decimal reals (shortest round-trip formatting).

Labels stay 1-based in :class:`SampleRecord`; the model layer works
0-based, converted by :func:`site_to_arrays`.
"""

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from fedhorizon import images
from fedhorizon.errors import DataError

FEATURES_MAGIC = "fedhorizon-features v1"
MANIFEST_COLUMNS = ["sample_id", "patient_id", "site_id", "label", "kind", "path"]

CLASS_NAMES = {
    1: "control",
    2: "glycine substitution",
    3: "pseudoexon insertion",
    4: "exon skipping",
}


@dataclass(frozen=True)
class SampleRecord:
    """One labeled example; exactly one of image/features is present."""

    sample_id: str
    patient_id: str
    site_id: str
    label: int
    image: np.ndarray = None
    features: np.ndarray = None

    def __post_init__(self):
        if self.label not in CLASS_NAMES:
            raise DataError(f"sample {self.sample_id}: label {self.label} outside 1..4")
        if (self.image is None) == (self.features is None):
            raise DataError(
                f"sample {self.sample_id}: exactly one of image/features must be present"
            )

    @property
    def kind(self):
        return "image" if self.image is not None else "features"

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        same_payload = (
            np.array_equal(self.image, other.image)
            if self.kind == "image" == other.kind
            else self.kind == other.kind and np.array_equal(self.features, other.features)
        )
        return (
            (self.sample_id, self.patient_id, self.site_id, self.label)
            == (other.sample_id, other.patient_id, other.site_id, other.label)
            and same_payload
        )


@dataclass
class SiteDataset:
    """A site's local record collection."""

    site_id: str
    records: list

    def __post_init__(self):
        for rec in self.records:
            if rec.site_id != self.site_id:
                raise DataError(
                    f"record {rec.sample_id} carries site {rec.site_id!r}, "
                    f"dataset is {self.site_id!r}"
                )

    def __len__(self):
        return len(self.records)

    @property
    def patient_ids(self):
        return {rec.patient_id for rec in self.records}


@dataclass(frozen=True)
class SplitPlan:
    """Either an explicit test patient set or a seeded fraction."""

    test_patient_ids: frozenset = None
    test_fraction: float = None
    seed: int = 0

    def __post_init__(self):
        if (self.test_patient_ids is None) == (self.test_fraction is None):
            raise ValueError("specify exactly one of test_patient_ids / test_fraction")
        if self.test_fraction is not None and not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")


def write_features_file(path, features):
    values = np.ascontiguousarray(features, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{FEATURES_MAGIC} {values.size}\n")
        fh.write(",".join(repr(float(v)) for v in values) + "\n")


def read_features_file(path):
    try:
        with open(path, encoding="ascii") as fh:
            header = fh.readline().rstrip("\n")
            payload = fh.readline().strip()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    parts = header.rsplit(" ", 1)
    if len(parts) != 2 or parts[0] != FEATURES_MAGIC or not parts[1].isdigit():
        raise DataError(f"{path}: bad feature file header {header!r}")
    count = int(parts[1])
    try:
        values = np.array([float(tok) for tok in payload.split(",")], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: malformed feature values") from exc
    if values.size != count:
        raise DataError(f"{path}: header declares {count} values, found {values.size}")
    return values


def load_manifest(path):
    """Read a manifest CSV (plus referenced payload files) into a SiteDataset."""
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    records = []
    site_id = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_COLUMNS:
            raise DataError(f"{path}: bad manifest header {header!r}")
        for row in reader:
            line = reader.line_num
            if len(row) != len(MANIFEST_COLUMNS):
                raise DataError(f"{path}:{line}: expected {len(MANIFEST_COLUMNS)} columns")
            sample_id, patient_id, row_site, label_s, kind, rel = row
            try:
                label = int(label_s)
            except ValueError:
                raise DataError(f"{path}:{line}: label {label_s!r} is not an integer") from None
            if label not in CLASS_NAMES:
                raise DataError(f"{path}:{line}: label {label} outside 1..4")
            if kind not in ("image", "features"):
                raise DataError(f"{path}:{line}: unknown payload kind {kind!r}")
            payload_path = os.path.join(base, rel)
            if not os.path.exists(payload_path):
                raise DataError(f"{path}:{line}: dangling payload reference {rel!r}")
            if kind == "image":
                rec = SampleRecord(sample_id, patient_id, row_site, label,
                                   image=images.read_ppm(payload_path))
            else:
                rec = SampleRecord(sample_id, patient_id, row_site, label,
                                   features=read_features_file(payload_path))
            records.append(rec)
            if site_id is None:
                site_id = row_site
    if site_id is None:
        site_id = os.path.splitext(os.path.basename(path))[0]
    return SiteDataset(site_id=site_id, records=records)


def save_manifest(ds, manifest_path, data_dir=None):
    """Write a SiteDataset as manifest CSV plus payload files.

    Payloads land in ``data_dir`` (default: ``<manifest stem>_data``
    beside the manifest) as ``<sample_id>.ppm`` / ``<sample_id>.ftr``.
    """
    manifest_path = os.path.abspath(manifest_path)
    base = os.path.dirname(manifest_path)
    if data_dir is None:
        data_dir = os.path.splitext(manifest_path)[0] + "_data"
    os.makedirs(data_dir, exist_ok=True)
    rows = []
    for rec in ds.records:
        if rec.kind == "image":
            fname = f"{rec.sample_id}.ppm"
            images.write_ppm(os.path.join(data_dir, fname), rec.image)
        else:
            fname = f"{rec.sample_id}.ftr"
            write_features_file(os.path.join(data_dir, fname), rec.features)
        rel = os.path.relpath(os.path.join(data_dir, fname), base)
        rows.append([rec.sample_id, rec.patient_id, rec.site_id, str(rec.label),
                     rec.kind, rel])
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return manifest_path


def patient_level_split(ds, plan):
    """Split so every patient's records land entirely on one side.

    With ``test_fraction``, patients are shuffled by the plan's seed and
    accepted into the test side until it holds at least
    ``round(fraction * len(ds))`` records (so a fraction of 0 yields an
    empty test side). Returns ``(train, test)``.
    """
    patients = sorted(ds.patient_ids)
    if plan.test_patient_ids is not None:
        unknown = set(plan.test_patient_ids) - set(patients)
        if unknown:
            raise DataError(f"test patients not in dataset: {sorted(unknown)}")
        test_set = set(plan.test_patient_ids)
    else:
        target = round(plan.test_fraction * len(ds))
        order = np.random.default_rng(plan.seed).permutation(len(patients))
        test_set = set()
        count = 0
        per_patient = {}
        for rec in ds.records:
            per_patient[rec.patient_id] = per_patient.get(rec.patient_id, 0) + 1
        for i in order:
            if count >= target:
                break
            pid = patients[i]
            test_set.add(pid)
            count += per_patient[pid]
    train_recs = [r for r in ds.records if r.patient_id not in test_set]
    test_recs = [r for r in ds.records if r.patient_id in test_set]
    return (
        SiteDataset(site_id=ds.site_id, records=train_recs),
        SiteDataset(site_id=ds.site_id, records=test_recs),
    )


def synthesize_dataset(per_site_class_counts, feature_dim, class_separation,
                       seed, site_ids=None):
    """Gaussian-cluster synthetic sites with patient grouping.

    Class ``c`` draws features from N(mu_c, I) with
    ``mu_c = (class_separation / sqrt(2)) * e_c`` (pairwise mean distance
    exactly ``class_separation``; requires ``feature_dim >= 4``).
    Patients group 2-4 consecutive same-class samples. Deterministic for
    a fixed seed.
    """
    if feature_dim < len(CLASS_NAMES):
        raise ValueError(f"feature_dim must be >= {len(CLASS_NAMES)}")
    if class_separation < 0:
        raise ValueError("class_separation must be >= 0")
    counts = [list(map(int, row)) for row in per_site_class_counts]
    if any(len(row) != len(CLASS_NAMES) for row in counts):
        raise ValueError(f"each site needs {len(CLASS_NAMES)} class counts")
    if any(c < 0 for row in counts for c in row):
        raise ValueError("class counts must be >= 0")
    if sum(c for row in counts for c in row) == 0:
        raise ValueError("zero total samples")
    if site_ids is None:
        site_ids = [f"site{i + 1}" for i in range(len(counts))]
    if len(site_ids) != len(counts):
        raise ValueError("site_ids and per_site_class_counts disagree in length")

    rng = np.random.default_rng(seed)
    scale = class_separation / np.sqrt(2.0)
    sites = []
    for site_id, row in zip(site_ids, counts):
        records = []
        patient_no = 0
        sample_no = 0
        for label, count in zip(sorted(CLASS_NAMES), row):
            mu = np.zeros(feature_dim)
            mu[label - 1] = scale
            remaining = count
            while remaining > 0:
                group = min(int(rng.integers(2, 5)), remaining)
                patient_no += 1
                pid = f"{site_id}-pat{patient_no:04d}"
                for _ in range(group):
                    sample_no += 1
                    feats = rng.normal(0.0, 1.0, feature_dim) + mu
                    records.append(SampleRecord(
                        sample_id=f"{site_id}-s{sample_no:05d}",
                        patient_id=pid,
                        site_id=site_id,
                        label=label,
                        features=feats,
                    ))
                remaining -= group
        sites.append(SiteDataset(site_id=site_id, records=records))
    return sites


def site_to_arrays(ds):
    """(features matrix, 0-based label vector) for a feature-payload dataset."""
    if not ds.records:
        raise DataError(f"site {ds.site_id}: empty dataset")
    feats = []
    for rec in ds.records:
        if rec.features is None:
            raise DataError(
                f"sample {rec.sample_id} carries an image payload; "
                "extract features first (materialize_features)"
            )
        feats.append(rec.features)
    x = np.ascontiguousarray(np.stack(feats), dtype=np.float64)
    y = np.array([rec.label - 1 for rec in ds.records], dtype=np.int64)
    return x, y


def materialize_features(ds, extractor_id="gridpool", extractor_config=None):
    """Replace image payloads with extracted feature vectors."""
    records = []
    for rec in ds.records:
        if rec.features is not None:
            records.append(rec)
        else:
            feats = images.extract_features(
                images.preprocess(rec.image), extractor_id, extractor_config
            )
            records.append(replace(rec, image=None, features=feats))
    return SiteDataset(site_id=ds.site_id, records=records)


def pool_sites(sites, pooled_id="central"):
    """Disjoint union of sites in canonical (site_id, sample_id) order.

    Records are relabeled to the pooled site id so the result is a valid
    SiteDataset; the ordering makes pooling invariant to input order.
    """
    all_recs = [rec for ds in sites for rec in ds.records]
    if not all_recs:
        raise DataError("pooled dataset is empty")
    all_recs.sort(key=lambda r: (r.site_id, r.sample_id))
    return SiteDataset(
        site_id=pooled_id,
        records=[replace(r, site_id=pooled_id) for r in all_recs],
    )
