"""Manifest IO, patient-grouped splits, batching, and the synthetic corpus."""

import numpy as np
import pytest

from hierpath import dataset as D
from hierpath.hierarchy import gi_tract_hierarchy


H = gi_tract_hierarchy()


def _rows(*triples):
    """(patient, wsi, fine_name) -> ManifestRow with the correct coarse."""
    out = []
    for pid, wid, fine in triples:
        ci = H.parent[H.fine_names.index(fine)]
        out.append(D.ManifestRow(pid, wid, f"{wid}.png",
                                 H.coarse_names[ci], fine))
    return out


# ---------------------------------------------------------------------------
# manifest

def test_manifest_roundtrip(tmp_path):
    rows = _rows(("P1", "W1", "Celiac"), ("P1", "W2", "EoE"), ("P2", "W3", "Crohn's"))
    path = tmp_path / "manifest.csv"
    D.write_manifest(rows, path)
    assert D.load_manifest(path) == rows
    header = path.read_text().splitlines()[0]
    assert header == "patient_id,wsi_id,image_path,coarse_label,fine_label"


def _write_lines(tmp_path, lines):
    path = tmp_path / "manifest.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_manifest_rejects_bad_header(tmp_path):
    path = _write_lines(tmp_path, ["patient,wsi,path,coarse,fine"])
    with pytest.raises(ValueError, match="bad header"):
        D.load_manifest(path)


def test_manifest_rejects_empty_file(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("")
    with pytest.raises(ValueError, match="empty manifest"):
        D.load_manifest(path)


def test_manifest_rejects_header_only(tmp_path):
    path = _write_lines(tmp_path, [",".join(D.MANIFEST_HEADER)])
    with pytest.raises(ValueError, match="no rows"):
        D.load_manifest(path)


def test_manifest_rejects_duplicate_wsi_with_both_lines(tmp_path):
    path = _write_lines(tmp_path, [
        ",".join(D.MANIFEST_HEADER),
        "P1,W1,a.png,Duodenum,Celiac",
        "P2,W1,b.png,Esophagus,EoE",
    ])
    with pytest.raises(ValueError, match=r"manifest.csv:3: duplicate wsi_id 'W1'.*line 2"):
        D.load_manifest(path)


def test_manifest_rejects_unknown_fine_label(tmp_path):
    path = _write_lines(tmp_path, [
        ",".join(D.MANIFEST_HEADER),
        "P1,W1,a.png,Duodenum,Polyp",
    ])
    with pytest.raises(ValueError, match=r":2: unknown fine label 'Polyp'"):
        D.load_manifest(path)


def test_manifest_rejects_parent_mismatch(tmp_path):
    # Crohn's is an Ileum condition; pairing it with Duodenum must fail
    path = _write_lines(tmp_path, [
        ",".join(D.MANIFEST_HEADER),
        "P1,W1,a.png,Duodenum,Crohn's",
    ])
    with pytest.raises(ValueError, match=r"belongs to coarse category 'Ileum', not 'Duodenum'"):
        D.load_manifest(path)


def test_manifest_rejects_field_count_and_empty_ids(tmp_path):
    path = _write_lines(tmp_path, [
        ",".join(D.MANIFEST_HEADER),
        "P1,W1,a.png,Duodenum",
    ])
    with pytest.raises(ValueError, match=":2: expected 5 fields, got 4"):
        D.load_manifest(path)
    path = _write_lines(tmp_path, [
        ",".join(D.MANIFEST_HEADER),
        ",W1,a.png,Duodenum,Celiac",
    ])
    with pytest.raises(ValueError, match="empty patient_id"):
        D.load_manifest(path)


# ---------------------------------------------------------------------------
# patient split

def test_split_ten_single_wsi_patients_hits_ratios_exactly():
    rows = _rows(*[(f"P{i}", f"W{i}", "Celiac") for i in range(10)])
    assignment = D.split_by_patient(rows, rng=np.random.default_rng(0))
    counts = {s: 0 for s in D.SPLIT_NAMES}
    for split in assignment.values():
        counts[split] += 1
    assert counts == {"train": 5, "dev": 2, "test": 3}


def test_split_never_divides_a_patient_and_roundtrips(tmp_path):
    rng = np.random.default_rng(7)
    triples = []
    w = 0
    for p in range(40):
        for _ in range(int(rng.integers(1, 4))):
            triples.append((f"P{p:03d}", f"W{w:04d}", "EoE"))
            w += 1
    rows = _rows(*triples)
    assignment = D.split_by_patient(rows, rng=np.random.default_rng(1))
    assert set(assignment.values()) <= set(D.SPLIT_NAMES)
    by_split = {s: [p for p, v in assignment.items() if v == s] for s in D.SPLIT_NAMES}
    D.audit_leakage(by_split)  # must not raise

    path = tmp_path / "split.csv"
    D.save_split(assignment, path)
    assert D.load_split(path) == assignment


def test_split_fraction_deviation_bounded_monte_carlo():
    # many random manifests: never any patient overlap, WSI fractions within
    # 5 points of the 50/20/30 targets once the corpus is reasonably sized
    master = np.random.default_rng(2024)
    for trial in range(50):
        n_patients = int(master.integers(80, 151))
        triples = []
        w = 0
        for p in range(n_patients):
            for _ in range(int(master.integers(1, 4))):
                triples.append((f"P{p:03d}", f"W{w:05d}", "Normal-Ileum"))
                w += 1
        rows = _rows(*triples)
        assignment = D.split_by_patient(rows, rng=np.random.default_rng(trial))
        counts = {s: 0 for s in D.SPLIT_NAMES}
        for row in rows:
            counts[assignment[row.patient_id]] += 1
        total = len(rows)
        for name, target in zip(D.SPLIT_NAMES, (0.5, 0.2, 0.3)):
            frac = counts[name] / total
            assert abs(frac - target) <= 0.05, (trial, name, frac)


def test_split_requires_three_patients():
    rows = _rows(("P1", "W1", "Celiac"), ("P2", "W2", "Celiac"))
    with pytest.raises(ValueError, match="at least 3 patients"):
        D.split_by_patient(rows)


def test_audit_leakage_detects_shared_patient():
    with pytest.raises(ValueError, match="leakage.*P9"):
        D.audit_leakage({"train": ["P1", "P9"], "dev": ["P2"], "test": ["P9"]})


# ---------------------------------------------------------------------------
# batching

def test_make_batches_drops_incomplete_remainder():
    batches = D.make_batches(100, 32, np.random.default_rng(0))
    assert [len(b) for b in batches] == [32, 32, 32]
    flat = np.concatenate(batches)
    assert len(set(flat.tolist())) == 96  # no index appears twice


def test_make_batches_same_seed_identical():
    a = D.make_batches(50, 8, np.random.default_rng(3))
    b = D.make_batches(50, 8, np.random.default_rng(3))
    assert all((x == y).all() for x, y in zip(a, b))


def test_make_batches_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="batch-norm constraint"):
        D.make_batches(10, 1, rng)
    with pytest.raises(ValueError, match="exceeds record count"):
        D.make_batches(10, 16, rng)
    with pytest.raises(ValueError, match="no records"):
        D.make_batches(0, 4, rng)


# ---------------------------------------------------------------------------
# synthetic corpus

def test_synthetic_counts_and_grouping():
    spec = D.SyntheticSpec(samples_per_class=50, seed=0)
    records = D.generate_synthetic(spec)
    assert len(records) == 350
    fines = {}
    for rec in records:
        fines.setdefault(rec.fine_idx, []).append(rec)
    assert set(fines) == set(range(7))
    assert all(len(v) == 50 for v in fines.values())
    # each patient owns 2-3 images, all with the same fine class
    by_patient = {}
    for rec in records:
        by_patient.setdefault(rec.patient_id, []).append(rec)
    for recs in by_patient.values():
        assert 1 <= len(recs) <= 3  # a class tail may leave a single image
        assert len({r.fine_idx for r in recs}) == 1
    sizes = [len(v) for v in by_patient.values()]
    assert max(sizes) == 3 and sizes.count(2) + sizes.count(3) >= len(sizes) - 7


def test_synthetic_ids_unique_and_formatted():
    records = D.generate_synthetic(D.SyntheticSpec(samples_per_class=5, seed=1))
    wsis = [r.wsi_id for r in records]
    assert len(set(wsis)) == len(wsis)
    assert all(w.startswith("W") and len(w) == 6 for w in wsis)
    assert all(r.patient_id.startswith("P") and len(r.patient_id) == 5 for r in records)


def test_synthetic_bit_reproducible():
    a = D.generate_synthetic(D.SyntheticSpec(samples_per_class=4, seed=9))
    b = D.generate_synthetic(D.SyntheticSpec(samples_per_class=4, seed=9))
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.patient_id == y.patient_id and x.wsi_id == y.wsi_id
        assert np.array_equal(x.rgb, y.rgb)


def test_synthetic_zero_noise_collapses_each_class():
    records = D.generate_synthetic(D.SyntheticSpec(samples_per_class=3,
                                                   noise_level=0.0, seed=0))
    by_fine = {}
    for rec in records:
        by_fine.setdefault(rec.fine_idx, []).append(rec.rgb)
    for imgs in by_fine.values():
        for img in imgs[1:]:
            assert np.array_equal(img, imgs[0])


def test_synthetic_noise_makes_images_distinct():
    records = D.generate_synthetic(D.SyntheticSpec(samples_per_class=3, seed=0))
    by_fine = {}
    for rec in records:
        by_fine.setdefault(rec.fine_idx, []).append(rec.rgb)
    for imgs in by_fine.values():
        assert not np.array_equal(imgs[0], imgs[1])


def test_records_manifest_loads_back(tmp_path):
    records = D.generate_synthetic(D.SyntheticSpec(samples_per_class=4, seed=2))
    rows = D.records_manifest(records, H, image_dir="images")
    path = tmp_path / "manifest.csv"
    D.write_manifest(rows, path)
    loaded = D.load_manifest(path)
    assert len(loaded) == len(records)
    assert loaded[0].image_path == f"images/{records[0].wsi_id}.png"


def _probe_gray(rgb):
    gray = np.round(0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2])
    return gray.astype(np.float64) / 255.0


def _ridge_probe(x_train, y_train, x_test, n_classes):
    """Least-squares one-vs-rest probe; returns test argmax predictions."""
    xt = np.hstack([x_train, np.ones((len(x_train), 1))])
    xe = np.hstack([x_test, np.ones((len(x_test), 1))])
    onehot = np.eye(n_classes)[y_train]
    lam = 1e-2 * len(x_train)
    w = np.linalg.solve(xt.T @ xt + lam * np.eye(xt.shape[1]), xt.T @ onehot)
    return np.argmax(xe @ w, axis=1)


def test_linear_probe_separates_coarse_but_not_fine():
    """The corpus is built so coarse identity is easy and fine identity needs
    texture features: a pixel-space linear probe nails the coarse level but
    cannot reliably tell siblings apart (their overlays differ only in
    frequency/amplitude under a random phase)."""
    records = D.generate_synthetic(D.SyntheticSpec(samples_per_class=40, seed=3))
    assignment = D.split_by_patient(
        D.records_manifest(records, H), rng=np.random.default_rng(0))
    train_idx = [i for i, r in enumerate(records) if assignment[r.patient_id] == "train"]
    test_idx = [i for i, r in enumerate(records) if assignment[r.patient_id] == "test"]
    x = np.stack([_probe_gray(r.rgb).ravel() for r in records])
    fine = np.array([r.fine_idx for r in records])
    coarse = np.array([r.coarse_idx for r in records])

    pred_c = _ridge_probe(x[train_idx], coarse[train_idx], x[test_idx], 3)
    coarse_acc = float(np.mean(pred_c == coarse[test_idx]))
    assert coarse_acc > 0.90, coarse_acc

    # probe fine labels within each family, conditioning on the true coarse
    within = []
    for ci in range(3):
        kids = H.children(ci)
        tr = [i for i in train_idx if records[i].coarse_idx == ci]
        te = [i for i in test_idx if records[i].coarse_idx == ci]
        remap = {f: j for j, f in enumerate(kids)}
        pred = _ridge_probe(x[tr], np.array([remap[records[i].fine_idx] for i in tr]),
                            x[te], len(kids))
        truth = np.array([remap[records[i].fine_idx] for i in te])
        within.append(float(np.mean(pred == truth)))
    assert np.mean(within) < 0.90, within
    assert np.mean(within) < coarse_acc
