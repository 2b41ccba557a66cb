"""Manifests, patient-grouped splitting, batching, and the synthetic corpus.

The synthetic generator plants a two-level structure: each coarse family is
a stripe orientation, and the fine classes inside a family modulate the
stripe with a family-shared base plus a child-specific frequency/amplitude
overlay whose phase is random per image (unless noise is disabled).  Coarse
identity is therefore linearly visible in pixel space while fine identity
needs phase-invariant texture features, mirroring the premise that coarse
classes are the easier level.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .hierarchy import ClassHierarchy, gi_tract_hierarchy

SPLIT_NAMES = ("train", "dev", "test")
MANIFEST_HEADER = ["patient_id", "wsi_id", "image_path", "coarse_label", "fine_label"]

# H&E-like optical-density directions (unit columns) used to render the
# synthetic grayscale texture as a plausibly stained RGB image.
SYNTH_STAINS = np.array([
    [0.65, 0.07],
    [0.70, 0.99],
    [0.29, 0.11],
])
SYNTH_STAINS = SYNTH_STAINS / np.linalg.norm(SYNTH_STAINS, axis=0, keepdims=True)


@dataclass(frozen=True)
class ManifestRow:
    patient_id: str
    wsi_id: str
    image_path: str
    coarse_label: str
    fine_label: str


def load_manifest(path, hierarchy: Optional[ClassHierarchy] = None) -> list:
    """Read and validate a manifest CSV; errors cite 1-based line numbers.

    Lines whose first cell starts with '#' are comments (provenance headers)
    and are skipped without disturbing the line numbering of later errors.
    """
    hierarchy = hierarchy or gi_tract_hierarchy()
    rows = []
    seen_wsi = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        numbered = ((i, row) for i, row in enumerate(reader, start=1)
                    if not (row and row[0].startswith("#")))
        try:
            _, header = next(numbered)
        except StopIteration:
            raise ValueError(f"{path}: empty manifest") from None
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: bad header {header}; expected {MANIFEST_HEADER}")
        for lineno, row in numbered:
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            patient_id, wsi_id, image_path, coarse, fine = row
            if not patient_id or not wsi_id:
                raise ValueError(f"{path}:{lineno}: empty patient_id or wsi_id")
            if wsi_id in seen_wsi:
                raise ValueError(f"{path}:{lineno}: duplicate wsi_id {wsi_id!r} "
                                 f"(first seen on line {seen_wsi[wsi_id]})")
            seen_wsi[wsi_id] = lineno
            if fine not in hierarchy.fine_names:
                raise ValueError(f"{path}:{lineno}: unknown fine label {fine!r}")
            if coarse not in hierarchy.coarse_names:
                raise ValueError(f"{path}:{lineno}: unknown coarse label {coarse!r}")
            fine_idx = hierarchy.fine_names.index(fine)
            expected = hierarchy.coarse_names[hierarchy.parent[fine_idx]]
            if coarse != expected:
                raise ValueError(
                    f"{path}:{lineno}: fine class {fine!r} belongs to coarse "
                    f"category {expected!r}, not {coarse!r}")
            rows.append(ManifestRow(patient_id, wsi_id, image_path, coarse, fine))
    if not rows:
        raise ValueError(f"{path}: manifest has a header but no rows")
    return rows


def write_manifest(rows, path, comment: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            writer.writerow([r.patient_id, r.wsi_id, r.image_path,
                             r.coarse_label, r.fine_label])


# ---------------------------------------------------------------------------
# patient-grouped splitting

def split_by_patient(manifest, ratios=(0.5, 0.2, 0.3),
                     rng: Optional[np.random.Generator] = None) -> dict:
    """Assign each patient to train/dev/test, balancing WSI counts greedily.

    Patients are shuffled (seeded), then each goes to the split with the
    largest remaining WSI-count deficit against its target.  A patient is
    never divided, so splits cannot overlap.
    """
    if len(ratios) != 3:
        raise ValueError("exactly three ratios (train, dev, test) required")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios {ratios} do not sum to 1")
    rng = rng or np.random.default_rng(0)
    wsi_per_patient: dict = {}
    for row in manifest:
        wsi_per_patient[row.patient_id] = wsi_per_patient.get(row.patient_id, 0) + 1
    patients = sorted(wsi_per_patient)
    if len(patients) < 3:
        raise ValueError(f"need at least 3 patients to split, got {len(patients)}")
    order = rng.permutation(len(patients))
    total = sum(wsi_per_patient.values())
    targets = [r * total for r in ratios]
    counts = [0, 0, 0]
    assignment = {}
    for idx in order:
        pid = patients[idx]
        deficits = [targets[i] - counts[i] for i in range(3)]
        chosen = max(range(3), key=lambda i: (deficits[i], -i))
        assignment[pid] = SPLIT_NAMES[chosen]
        counts[chosen] += wsi_per_patient[pid]
    return assignment


def save_split(assignment: dict, path, comment: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "split"])
        for pid in sorted(assignment):
            writer.writerow([pid, assignment[pid]])


def load_split(path) -> dict:
    """Read a patient->split assignment; '#'-prefixed lines are comments."""
    assignment = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        numbered = ((i, row) for i, row in enumerate(reader, start=1)
                    if not (row and row[0].startswith("#")))
        try:
            _, header = next(numbered)
        except StopIteration:
            raise ValueError(f"{path}: empty split file") from None
        if header != ["patient_id", "split"]:
            raise ValueError(f"{path}: bad split header {header}")
        for lineno, row in numbered:
            pid, split = row
            if split not in SPLIT_NAMES:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            if pid in assignment:
                raise ValueError(f"{path}:{lineno}: duplicate patient {pid!r}")
            assignment[pid] = split
    return assignment


def audit_leakage(patient_ids_by_split: dict) -> None:
    """Raise if any patient id appears in more than one split."""
    names = sorted(patient_ids_by_split)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            overlap = set(patient_ids_by_split[a]) & set(patient_ids_by_split[b])
            if overlap:
                raise ValueError(f"patient leakage between {a} and {b}: {sorted(overlap)[:5]}")


# ---------------------------------------------------------------------------
# batching

def make_batches(n_records: int, batch_size: int, rng: np.random.Generator) -> list:
    """Seeded shuffle into full batches; the incomplete remainder is dropped."""
    if n_records < 1:
        raise ValueError("no records to batch")
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2 (batch-norm constraint), got {batch_size}")
    n_full = n_records // batch_size
    if n_full == 0:
        raise ValueError(f"batch_size {batch_size} exceeds record count {n_records}")
    perm = rng.permutation(n_records)
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(n_full)]


@dataclass
class ArraySet:
    """In-memory image set: float inputs in [0,1] plus both label levels."""

    images: np.ndarray  # [N,1,H,W] float
    coarse: np.ndarray  # [N] int
    fine: np.ndarray  # [N] int
    ids: tuple = ()

    def __post_init__(self):
        n = self.images.shape[0]
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be [N,1,H,W], got {self.images.shape}")
        if self.coarse.shape != (n,) or self.fine.shape != (n,):
            raise ValueError("label arrays must match image count")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "ArraySet":
        ids = tuple(self.ids[i] for i in idx) if self.ids else ()
        return ArraySet(self.images[idx], self.coarse[idx], self.fine[idx], ids)


# ---------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 32
    samples_per_class: int = 50
    noise_level: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")


@dataclass(frozen=True)
class SyntheticRecord:
    patient_id: str
    wsi_id: str
    coarse_idx: int
    fine_idx: int
    rgb: np.ndarray  # [H,W,3] uint8


# per-family stripe orientation, base frequency/amplitude shared by the
# family; child overlays vary frequency and amplitude so fine identity is a
# texture property rather than a mean-intensity shift.  The overlay runs
# along one fixed direction for every class, deliberately decoupling child
# texture from family orientation.
_FAMILY_ANGLES_DEG = (0.0, 90.0, 45.0)
_OVERLAY_ANGLE_DEG = 30.0
_BASE_FREQ = 2.0
_BASE_AMP = 40.0
_CHILD_FREQS = (4.0, 7.0, 10.0)
_CHILD_AMPS = (38.0, 52.0, 66.0)


def _child_rank(hierarchy: ClassHierarchy, fine_idx: int) -> int:
    return hierarchy.children(hierarchy.parent[fine_idx]).index(fine_idx)


def synth_grayscale(hierarchy: ClassHierarchy, fine_idx: int, size: int,
                    phase: float, noise: np.ndarray) -> np.ndarray:
    """One synthetic texture image (float before quantization).

    The coarse family sets the orientation of a low-frequency base stripe;
    the child rank sets the frequency/amplitude of an overlay along a fixed
    direction shared by every class.  Same-rank children of different
    families therefore carry identical overlay texture, so telling families
    apart by texture alone is a trap: the model has to use the base stripe.
    """
    coarse_idx = hierarchy.parent[fine_idx]
    rank = _child_rank(hierarchy, fine_idx)
    theta = np.deg2rad(_FAMILY_ANGLES_DEG[coarse_idx])
    ys, xs = np.mgrid[0:size, 0:size]
    u = (xs * np.cos(theta) + ys * np.sin(theta)) / size
    phi = np.deg2rad(_OVERLAY_ANGLE_DEG)
    v = (xs * np.cos(phi) + ys * np.sin(phi)) / size
    img = 127.5 + _BASE_AMP * np.sin(2 * np.pi * _BASE_FREQ * u)
    img = img + _CHILD_AMPS[rank] * np.sin(2 * np.pi * _CHILD_FREQS[rank] * v + phase)
    return img + noise


def grayscale_to_rgb(gray: np.ndarray) -> np.ndarray:
    """Render intensity as a two-stain mixture so the image looks stained.

    Darker texture regions mean more of stain 1; stain 2 peaks at mid
    intensities.  The optical-density image is exactly rank 2 by
    construction, which the stain-model fit can recover.
    """
    t = np.clip(gray, 0.0, 255.0) / 255.0
    c1 = 1.1 * (1.0 - t)
    c2 = 0.18 + 0.7 * t * (1.0 - t)
    od = np.tensordot(np.stack([c1, c2], axis=-1), SYNTH_STAINS.T, axes=([2], [0]))
    rgb = np.round(255.0 * np.power(10.0, -od))
    return np.clip(rgb, 0, 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec,
                       hierarchy: Optional[ClassHierarchy] = None) -> list:
    """Seeded corpus of SyntheticRecords, several images per synthetic patient."""
    hierarchy = hierarchy or gi_tract_hierarchy()
    rng = np.random.default_rng(spec.seed)
    records = []
    patient_counter = 0
    wsi_counter = 0
    for fine_idx in range(hierarchy.n_fine):
        coarse_idx = hierarchy.parent[fine_idx]
        remaining = spec.samples_per_class
        while remaining > 0:
            patient_counter += 1
            pid = f"P{patient_counter:04d}"
            group = min(int(rng.integers(2, 4)), remaining)
            for _ in range(group):
                wsi_counter += 1
                if spec.noise_level > 0:
                    phase = float(rng.uniform(0.0, 2.0 * np.pi))
                    noise = rng.normal(0.0, spec.noise_level,
                                       size=(spec.image_size, spec.image_size))
                else:
                    phase = 0.0
                    noise = np.zeros((spec.image_size, spec.image_size))
                gray = synth_grayscale(hierarchy, fine_idx, spec.image_size, phase, noise)
                records.append(SyntheticRecord(
                    patient_id=pid,
                    wsi_id=f"W{wsi_counter:05d}",
                    coarse_idx=coarse_idx,
                    fine_idx=fine_idx,
                    rgb=grayscale_to_rgb(gray),
                ))
                remaining -= 1
    return records


def records_manifest(records, hierarchy: ClassHierarchy, image_dir: str = "") -> list:
    rows = []
    for rec in records:
        path = f"{image_dir}/{rec.wsi_id}.png" if image_dir else f"{rec.wsi_id}.png"
        rows.append(ManifestRow(
            patient_id=rec.patient_id,
            wsi_id=rec.wsi_id,
            image_path=path,
            coarse_label=hierarchy.coarse_names[rec.coarse_idx],
            fine_label=hierarchy.fine_names[rec.fine_idx],
        ))
    return rows
