"""Command-line driver wiring the stages into reproducible end-to-end runs.

Usage:
    hierpath <synth|patch|filter|normalize|train|evaluate>
             --config FILE [--model flat|hier] [--seed N] [--samples N]

Each stage writes one subdirectory of `out_dir` and stamps every artifact
with the effective config hash; stages that consume pipeline artifacts refuse
inputs stamped with a different hash (external manifests without a stamp are
accepted as-is).  Exit codes: 0 success, 1 usage, 2 data error, 3 numeric
failure.
"""

import argparse
import csv
import json
import os
import sys
import warnings
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .config import RunConfig, build_config, parse_config_file
from .dataset import (ArraySet, SPLIT_NAMES, SyntheticSpec, audit_leakage,
                      generate_synthetic, load_manifest, load_split,
                      records_manifest, save_split, split_by_patient,
                      write_manifest)
from .filtering import embed_patches, filter_patches, train_cae
from .hierarchy import gi_tract_hierarchy
from .metrics import MetricsReport, compute_per_run_metrics, render_report
from .models import load_network, save_network, spec_by_name
from .patches import SourceImage, extract_patches, resize_patch, to_grayscale
from .stain import fit_stain_model, normalize_stain, rgb_to_od
from .training import evaluate as evaluate_network
from .training import multi_run


class UsageError(Exception):
    exit_code = 1


class DataError(Exception):
    exit_code = 2


class NumericError(Exception):
    exit_code = 3


# ---------------------------------------------------------------------------
# small file helpers

INDEX_HEADER = ["patient_id", "wsi_id", "x", "y", "path", "coarse_label",
                "fine_label", "kept"]


@dataclass(frozen=True)
class IndexRow:
    patient_id: str
    wsi_id: str
    x: int
    y: int
    path: str  # relative to out_dir
    coarse_label: str
    fine_label: str
    kept: bool


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _save_png(arr: np.ndarray, path: str, config_hash: str) -> None:
    info = PngInfo()
    info.add_text("config_hash", config_hash)
    Image.fromarray(arr).save(path, pnginfo=info)


def _load_rgb(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _load_gray(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"))


def _read_hash_comment(path: str) -> str:
    """The config hash stamped on a CSV artifact, or '' if none."""
    with open(path) as fh:
        first = fh.readline().strip()
    prefix = "# config_hash="
    return first[len(prefix):] if first.startswith(prefix) else ""


def _require_hash(path: str, current: str, allow_unstamped: bool = False) -> None:
    try:
        found = _read_hash_comment(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not found and allow_unstamped:
        return
    if found != current:
        raise DataError(
            f"{path} carries config hash {found or '(none)'!s} but the current "
            f"configuration hashes to {current}; refusing to mix runs")


def write_index(rows: List[IndexRow], path: str, config_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(INDEX_HEADER)
        for r in rows:
            writer.writerow([r.patient_id, r.wsi_id, r.x, r.y, r.path,
                             r.coarse_label, r.fine_label, int(r.kept)])


def read_index(path: str) -> List[IndexRow]:
    rows = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"patch index not found: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        numbered = ((i, row) for i, row in enumerate(reader, start=1)
                    if not (row and row[0].startswith("#")))
        try:
            _, header = next(numbered)
        except StopIteration:
            raise DataError(f"{path}: empty index") from None
        if header != INDEX_HEADER:
            raise DataError(f"{path}: bad index header {header}")
        for lineno, row in numbered:
            if not row:
                continue
            if len(row) != len(INDEX_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(INDEX_HEADER)} fields")
            rows.append(IndexRow(row[0], row[1], int(row[2]), int(row[3]),
                                 row[4], row[5], row[6], row[7] == "1"))
    if not rows:
        raise DataError(f"{path}: index has a header but no rows")
    return rows


def _class_order(hierarchy) -> list:
    """(coarse, fine) label pairs in hierarchy order, for table printing."""
    pairs = []
    for fine_idx, fine in enumerate(hierarchy.fine_names):
        pairs.append((hierarchy.coarse_names[hierarchy.parent[fine_idx]], fine))
    return pairs


# ---------------------------------------------------------------------------
# stage commands

def cmd_synth(cfg: RunConfig, args) -> None:
    hierarchy = cfg.hierarchy
    h = cfg.config_hash()
    spec = SyntheticSpec(
        image_size=cfg["synth.image_size"],
        samples_per_class=cfg["synth.samples_per_class"],
        noise_level=cfg["synth.noise_level"],
        seed=cfg.sub_seed("synth"),
    )
    records = generate_synthetic(spec, hierarchy)
    stage_dir = _ensure_dir(os.path.join(cfg.out_dir, "synthetic"))
    image_dir = _ensure_dir(os.path.join(stage_dir, "images"))
    for rec in records:
        _save_png(rec.rgb, os.path.join(image_dir, f"{rec.wsi_id}.png"), h)
    rows = records_manifest(records, hierarchy, image_dir="images")
    manifest_path = os.path.join(stage_dir, "manifest.csv")
    write_manifest(rows, manifest_path, comment=f"config_hash={h}")
    per_class: Dict[str, int] = {}
    for rec in records:
        name = hierarchy.fine_names[rec.fine_idx]
        per_class[name] = per_class.get(name, 0) + 1
    print(f"synth: {len(records)} images, {len(per_class)} fine classes -> {manifest_path}")
    for coarse, fine in _class_order(hierarchy):
        print(f"  {coarse:<10} {fine:<18} {per_class.get(fine, 0):>6}")


def _manifest_path(cfg: RunConfig) -> str:
    return cfg["manifest"] or os.path.join(cfg.out_dir, "synthetic", "manifest.csv")


def cmd_patch(cfg: RunConfig, args) -> None:
    hierarchy = cfg.hierarchy
    h = cfg.config_hash()
    manifest_path = _manifest_path(cfg)
    if not os.path.exists(manifest_path):
        raise DataError(f"manifest not found at {manifest_path}; run synth first "
                        f"or set manifest= to your data")
    # External manifests carry no stamp; pipeline-produced ones must match.
    _require_hash(manifest_path, h, allow_unstamped=True)
    try:
        manifest = load_manifest(manifest_path, hierarchy)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    try:
        assignment = split_by_patient(manifest, cfg.split_ratios(), cfg.sub_rng("split"))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    ids_by_split = {name: [p for p, s in assignment.items() if s == name]
                    for name in SPLIT_NAMES}
    audit_leakage(ids_by_split)
    save_split(assignment, os.path.join(cfg.out_dir, "split.csv"),
               comment=f"config_hash={h}")

    stage_dir = _ensure_dir(os.path.join(cfg.out_dir, "patches"))
    image_dir = _ensure_dir(os.path.join(stage_dir, "images"))
    window = cfg["patch.window"]
    out_size = cfg.patch_size()
    base = os.path.dirname(manifest_path)
    index_rows: List[IndexRow] = []
    failures = 0
    wsis_read = []
    for row in manifest:
        img_path = os.path.join(base, row.image_path)
        try:
            src = SourceImage(_load_rgb(img_path), row.wsi_id, row.patient_id,
                              row.coarse_label, row.fine_label)
            stride = cfg.stride_for(row.fine_label)
            for win, x, y in extract_patches(src, window, stride):
                resized = resize_patch(win, out_size)
                name = f"{row.wsi_id}_x{x:05d}_y{y:05d}.png"
                _save_png(resized, os.path.join(image_dir, name), h)
                index_rows.append(IndexRow(
                    row.patient_id, row.wsi_id, x, y,
                    os.path.join("patches", "images", name),
                    row.coarse_label, row.fine_label, True))
        except (OSError, ValueError) as exc:
            warnings.warn(f"skipping {row.wsi_id} ({img_path}): {exc}")
            failures += 1
            continue
        wsis_read.append(row)
    if not index_rows:
        raise DataError(
            f"no patches extracted: {failures} of {len(manifest)} images unreadable")
    write_index(index_rows, os.path.join(stage_dir, "index.csv"), h)

    # Distribution table: per class and split, WSI and patch counts.
    wsi_counts: Dict[tuple, int] = {}
    for row in wsis_read:
        key = (row.fine_label, assignment[row.patient_id])
        wsi_counts[key] = wsi_counts.get(key, 0) + 1
    patch_counts: Dict[tuple, int] = {}
    for r in index_rows:
        key = (r.fine_label, assignment[r.patient_id])
        patch_counts[key] = patch_counts.get(key, 0) + 1
    print(f"patch: {len(index_rows)} patches from {len(wsis_read)} of "
          f"{len(manifest)} images ({failures} skipped)")
    header = (f"{'coarse':<10} {'fine':<18} "
              f"{'train_wsis':>10} {'train_patches':>13} "
              f"{'dev_wsis':>8} {'dev_patches':>11} "
              f"{'test_wsis':>9} {'test_patches':>12}")
    print(header)
    totals = {name: [0, 0] for name in SPLIT_NAMES}
    for coarse, fine in _class_order(hierarchy):
        cells = []
        for split in SPLIT_NAMES:
            w = wsi_counts.get((fine, split), 0)
            p = patch_counts.get((fine, split), 0)
            totals[split][0] += w
            totals[split][1] += p
            cells.extend([w, p])
        print(f"{coarse:<10} {fine:<18} {cells[0]:>10} {cells[1]:>13} "
              f"{cells[2]:>8} {cells[3]:>11} {cells[4]:>9} {cells[5]:>12}")
    t = [totals[s][i] for s in SPLIT_NAMES for i in (0, 1)]
    print(f"{'total':<10} {'':<18} {t[0]:>10} {t[1]:>13} "
          f"{t[2]:>8} {t[3]:>11} {t[4]:>9} {t[5]:>12}")


def _load_patch_stack(cfg: RunConfig, rows: List[IndexRow]) -> np.ndarray:
    """Kept-order RGB patches as [N,3,S,S] float32 in [0,1]."""
    arrays = []
    for r in rows:
        path = os.path.join(cfg.out_dir, r.path)
        try:
            arr = _load_rgb(path)
        except OSError as exc:
            raise DataError(f"cannot read patch {path}: {exc}") from exc
        arrays.append(arr.transpose(2, 0, 1))
    stack = np.stack(arrays).astype(np.float32) / np.float32(255.0)
    return stack


def cmd_filter(cfg: RunConfig, args) -> None:
    h = cfg.config_hash()
    index_path = os.path.join(cfg.out_dir, "patches", "index.csv")
    _require_hash(index_path, h)
    rows = read_index(index_path)
    if len(rows) < 2:
        raise DataError(f"need at least 2 patches to cluster, found {len(rows)}")
    patches = _load_patch_stack(cfg, rows)
    batch_size = max(2, min(cfg["filter.batch_size"], len(rows) // 2))
    try:
        model, history = train_cae(
            patches, epochs=cfg["filter.epochs"], rng=cfg.sub_rng("cae"),
            batch_size=batch_size, lr=cfg["filter.lr"],
            embed_dim=cfg["filter.embed_dim"])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    embeddings = embed_patches(model, patches)
    mean_intensities = patches.mean(axis=(1, 2, 3))
    assignment = filter_patches(embeddings, mean_intensities, rng=cfg.sub_rng("kmeans"))
    flagged = [replace(r, kept=bool(k)) for r, k in zip(rows, assignment.kept)]
    write_index(flagged, index_path, h)

    print(f"filter: holdout mse {history['initial_holdout_mse']:.4f} -> "
          f"{history['final_holdout_mse']:.4f}")
    print(f"{'coarse':<10} {'fine':<18} {'kept':>6} {'dropped':>8} {'total':>6}")
    hierarchy = cfg.hierarchy
    kept_total = dropped_total = 0
    for coarse, fine in _class_order(hierarchy):
        kept = sum(1 for r in flagged if r.fine_label == fine and r.kept)
        dropped = sum(1 for r in flagged if r.fine_label == fine and not r.kept)
        kept_total += kept
        dropped_total += dropped
        print(f"{coarse:<10} {fine:<18} {kept:>6} {dropped:>8} {kept + dropped:>6}")
    print(f"{'total':<10} {'':<18} {kept_total:>6} {dropped_total:>8} "
          f"{kept_total + dropped_total:>6}")


def cmd_normalize(cfg: RunConfig, args) -> None:
    h = cfg.config_hash()
    index_path = os.path.join(cfg.out_dir, "patches", "index.csv")
    _require_hash(index_path, h)
    rows = [r for r in read_index(index_path) if r.kept]
    if not rows:
        raise DataError("no kept patches in the index; run filter first")

    ref_path = cfg["normalize.reference"] or os.path.join(cfg.out_dir, rows[0].path)
    try:
        ref_rgb = _load_rgb(ref_path)
    except OSError as exc:
        raise DataError(f"cannot read reference patch {ref_path}: {exc}") from exc
    sparsity = cfg["normalize.sparsity"]
    threshold = cfg["normalize.od_threshold"]
    iterations = cfg["normalize.iterations"]
    try:
        target = fit_stain_model(rgb_to_od(ref_rgb.reshape(-1, 3)),
                                 sparsity=sparsity, od_threshold=threshold,
                                 iterations=iterations)
    except (ValueError, AssertionError) as exc:
        raise NumericError(f"reference stain fit failed on {ref_path}: {exc}") from exc

    stage_dir = _ensure_dir(os.path.join(cfg.out_dir, "normalized"))
    image_dir = _ensure_dir(os.path.join(stage_dir, "images"))
    sample_dir = _ensure_dir(os.path.join(stage_dir, "samples"))
    by_wsi: Dict[str, List[IndexRow]] = {}
    for r in rows:
        by_wsi.setdefault(r.wsi_id, []).append(r)

    written: List[IndexRow] = []
    skipped_slides = []
    sample_budget = cfg["normalize.samples"]
    sample_count = 0
    for wsi_id, wsi_rows in by_wsi.items():
        arrays = []
        for r in wsi_rows:
            path = os.path.join(cfg.out_dir, r.path)
            try:
                arrays.append(_load_rgb(path))
            except OSError as exc:
                raise DataError(f"cannot read patch {path}: {exc}") from exc
        pool = np.concatenate([rgb_to_od(a.reshape(-1, 3)) for a in arrays])
        try:
            src_model = fit_stain_model(pool, sparsity=sparsity,
                                        od_threshold=threshold,
                                        iterations=iterations)
        except ValueError as exc:
            warnings.warn(f"skipping slide {wsi_id}: {exc}")
            skipped_slides.append(wsi_id)
            continue
        except AssertionError as exc:
            raise NumericError(f"stain fit diverged on slide {wsi_id}: {exc}") from exc
        for r, arr in zip(wsi_rows, arrays):
            normalized = normalize_stain(arr, src_model, target)
            gray = to_grayscale(normalized)
            name = os.path.basename(r.path)
            _save_png(gray, os.path.join(image_dir, name), h)
            written.append(replace(r, path=os.path.join("normalized", "images", name)))
            if sample_count < sample_budget:
                stem = name[:-len(".png")]
                _save_png(arr, os.path.join(sample_dir, f"{stem}_original.png"), h)
                _save_png(normalized, os.path.join(sample_dir, f"{stem}_normalized.png"), h)
                _save_png(gray, os.path.join(sample_dir, f"{stem}_grayscale.png"), h)
                sample_count += 1
    if not written:
        raise NumericError(
            f"stain fit failed on every slide ({len(skipped_slides)} skipped)")
    write_index(written, os.path.join(stage_dir, "index.csv"), h)
    print(f"normalize: {len(written)} of {len(rows)} kept patches written "
          f"({len(skipped_slides)} slides skipped), reference {ref_path}, "
          f"{sample_count} sample triplets")


def _build_arraysets(cfg: RunConfig) -> Dict[str, Optional[ArraySet]]:
    """train/dev/test ArraySets from the normalized index and the saved split."""
    hierarchy = cfg.hierarchy
    h = cfg.config_hash()
    index_path = os.path.join(cfg.out_dir, "normalized", "index.csv")
    split_path = os.path.join(cfg.out_dir, "split.csv")
    if not os.path.exists(index_path):
        raise DataError(f"normalized index not found at {index_path}; run normalize first")
    if not os.path.exists(split_path):
        raise DataError(f"split file not found at {split_path}; run patch first")
    _require_hash(index_path, h)
    _require_hash(split_path, h)
    rows = read_index(index_path)
    try:
        assignment = load_split(split_path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    expected_hw = spec_by_name(cfg["model.preset"]).input_shape[1]
    by_split: Dict[str, list] = {name: [] for name in SPLIT_NAMES}
    for r in rows:
        if r.patient_id not in assignment:
            raise DataError(f"patient {r.patient_id!r} missing from {split_path}")
        by_split[assignment[r.patient_id]].append(r)
    audit_leakage({name: [r.patient_id for r in split_rows]
                   for name, split_rows in by_split.items()})

    sets: Dict[str, Optional[ArraySet]] = {}
    for name, split_rows in by_split.items():
        if not split_rows:
            sets[name] = None
            continue
        images = np.zeros((len(split_rows), 1, expected_hw, expected_hw),
                          dtype=np.float32)
        coarse = np.zeros(len(split_rows), dtype=np.int64)
        fine = np.zeros(len(split_rows), dtype=np.int64)
        for i, r in enumerate(split_rows):
            path = os.path.join(cfg.out_dir, r.path)
            try:
                gray = _load_gray(path)
            except OSError as exc:
                raise DataError(f"cannot read patch {path}: {exc}") from exc
            if gray.shape != (expected_hw, expected_hw):
                raise DataError(
                    f"patch {path} is {gray.shape[0]}x{gray.shape[1]} but the "
                    f"{cfg['model.preset']} preset expects {expected_hw}x{expected_hw}; "
                    f"set patch.size to match")
            images[i, 0] = gray.astype(np.float32) / np.float32(255.0)
            fine[i] = hierarchy.fine_names.index(r.fine_label)
            coarse[i] = hierarchy.parent[fine[i]]
        sets[name] = ArraySet(images, coarse, fine,
                              ids=tuple(r.wsi_id for r in split_rows))
    return sets


def cmd_train(cfg: RunConfig, args) -> None:
    if args.model is None:
        raise UsageError("train requires --model flat|hier")
    family = args.model
    h = cfg.config_hash()
    sets = _build_arraysets(cfg)
    train_set = sets["train"]
    if train_set is None:
        raise DataError("training split contains no patches")
    tc = cfg.train_config()
    if train_set.n < tc.batch_size:
        raise DataError(f"training split has {train_set.n} patches but "
                        f"train.batch_size is {tc.batch_size}")
    spec = spec_by_name(cfg["model.preset"])
    run_dir = _ensure_dir(os.path.join(cfg.out_dir, "runs", family))
    log_path = os.path.join(run_dir, "train_log.jsonl")

    saved = []
    with open(log_path, "w") as log_fh:
        def log_sink(record):
            line = dict(record, config_hash=h, family=family)
            log_fh.write(json.dumps(line, sort_keys=True) + "\n")
            log_fh.flush()

        def run_sink(i, result):
            ckpt = os.path.join(run_dir, f"run_{i}.ckpt")
            save_network(result.net, ckpt, config_hash=h)
            saved.append(ckpt)
            last = result.logs[-1]
            dev = last.get("dev_fine_acc")
            dev_text = "n/a" if dev is None else f"{dev:.3f}"
            print(f"  run {i} (seed {result.seed}): train loss "
                  f"{last['train_loss']:.4f}, dev fine acc {dev_text}")

        print(f"train: {family} family, {tc.runs} runs x {tc.epochs} epochs "
              f"on {train_set.n} patches")
        try:
            multi_run(family, spec, train_set, tc, dev_set=sets["dev"],
                      test_set=None, hierarchy=cfg.hierarchy,
                      log_sink=log_sink, run_sink=run_sink)
        except RuntimeError as exc:
            raise NumericError(str(exc)) from exc
    print(f"train: wrote {len(saved)} checkpoints and {log_path}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    hierarchy = cfg.hierarchy
    h = cfg.config_hash()
    spec = spec_by_name(cfg["model.preset"])
    runs = cfg["train.runs"]
    ckpt_paths: Dict[str, list] = {}
    missing = []
    for family in ("flat", "hier"):
        paths = [os.path.join(cfg.out_dir, "runs", family, f"run_{i}.ckpt")
                 for i in range(runs)]
        missing.extend(p for p in paths if not os.path.exists(p))
        ckpt_paths[family] = paths
    if missing:
        raise DataError("missing checkpoints: " + ", ".join(missing))

    sets = _build_arraysets(cfg)
    test_set = sets["test"]
    if test_set is None:
        raise DataError("test split contains no patches")

    per_run: Dict[str, list] = {"flat": [], "hier": []}
    for family in ("flat", "hier"):
        for path in ckpt_paths[family]:
            try:
                net, _ = load_network(path, hierarchy, expected_spec=spec,
                                      expected_config_hash=h)
            except ValueError as exc:
                raise DataError(f"{path}: {exc}") from exc
            bundle = evaluate_network(net, test_set, cfg["train.eval_batch_size"])
            per_run[family].append(compute_per_run_metrics(bundle, hierarchy))

    report = MetricsReport(hierarchy, per_run, cfg["eval.ci_method"])
    metric_dir = _ensure_dir(os.path.join(cfg.out_dir, "metrics"))
    outputs = {
        "csv": os.path.join(metric_dir, "metrics.csv"),
        "json": os.path.join(metric_dir, "metrics.json"),
        "flat": os.path.join(metric_dir, "confusion_flat.csv"),
        "hier": os.path.join(metric_dir, "confusion_hier.csv"),
    }
    render_report(report, outputs["csv"], outputs["json"],
                  {"flat": outputs["flat"], "hier": outputs["hier"]},
                  config_hash=h)

    print(f"evaluate: {runs} runs per family on {test_set.n} test patches")
    for family in ("flat", "hier"):
        coarse = report.level_accuracy(family, "coarse")
        fine = report.level_accuracy(family, "fine")
        print(f"  {family:<5} coarse acc {coarse.mean:.3f} ± {coarse.half_width:.3f}, "
              f"fine acc {fine.mean:.3f} ± {fine.half_width:.3f}")
    ccm_flat = report.cross_coarse("flat")
    ccm_hier = report.cross_coarse("hier")
    diff = ccm_hier.mean - ccm_flat.mean
    print(f"  cross-coarse mass: flat {ccm_flat.mean:.4f}, hier {ccm_hier.mean:.4f}, "
          f"hier-minus-flat {diff:+.4f}")
    for path in outputs.values():
        print(f"  wrote {path}")


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {
    "synth": cmd_synth,
    "patch": cmd_patch,
    "filter": cmd_filter,
    "normalize": cmd_normalize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hierpath",
        description="Staged pipeline: synth, patch, filter, normalize, train, evaluate.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="key=value config file")
    parser.add_argument("--model", choices=("flat", "hier"),
                        help="model family (train only)")
    parser.add_argument("--seed", type=int, help="override the root seed")
    parser.add_argument("--samples", type=int,
                        help="synth: images per class; normalize: sample triplets")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        try:
            pairs = parse_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        if args.samples is not None:
            if args.samples < 1:
                raise UsageError("--samples must be >= 1")
            if args.command == "synth":
                pairs["synth.samples_per_class"] = str(args.samples)
            elif args.command == "normalize":
                pairs["normalize.samples"] = str(args.samples)
            else:
                raise UsageError("--samples applies to synth and normalize only")
        try:
            cfg = build_config(pairs, seed_override=args.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        _ensure_dir(cfg.out_dir)
        COMMANDS[args.command](cfg, args)
        return 0
    except (UsageError, DataError, NumericError) as exc:
        kind = {1: "usage error", 2: "data error", 3: "numeric failure"}[exc.exit_code]
        print(f"{kind}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
