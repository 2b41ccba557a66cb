"""Run configuration: a flat key=value text file with documented defaults.

Every knob the pipeline exposes is listed in CONFIG_FIELDS with its type,
default, and one-line description; unknown keys are rejected so typos fail
loudly instead of silently running on defaults.  The effective configuration
(defaults merged with the file and any command-line overrides) is hashed, and
that hash is stamped into every artifact so downstream stages can refuse to
mix outputs from different runs.

All randomness flows from the single root `seed` through named sub-seeds
(`sub_rng("split")`, `sub_rng("cae")`, ...) so each stage's draws are
reproducible in isolation.
"""

import hashlib
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .hierarchy import ClassHierarchy, gi_tract_hierarchy
from .training import (LossWeightSchedule, LrSchedule, TrainConfig,
                       default_loss_weight_schedule)

_DEFAULT_LOSS_WEIGHTS = "1:0.98,0.02;5:0.30,0.70;10:0.10,0.90;15:0.00,1.00"
_DEFAULT_LR = "1:0.001;11:0.0005;16:0.0001"


@dataclass(frozen=True)
class ConfigField:
    key: str
    kind: type
    default: object
    doc: str
    # Display-only knobs are excluded from the config hash so changing them
    # cannot orphan previously built artifacts.
    hashed: bool = True


# The single source of truth for configuration keys.  `patch.stride.<class>`
# keys are validated dynamically against the hierarchy's fine-class names.
CONFIG_FIELDS = (
    ConfigField("seed", int, 0,
                "root seed; every stage derives a named sub-seed from it"),
    ConfigField("out_dir", str, "out",
                "output directory; each stage writes its own subdirectory "
                "(a locator, so excluded from the config hash)", hashed=False),
    ConfigField("manifest", str, "",
                "source manifest CSV; empty means <out_dir>/synthetic/manifest.csv"),
    ConfigField("hierarchy", str, "gi_tract",
                "label-tree preset; gi_tract is the only one defined"),
    ConfigField("model.preset", str, "desk",
                "network size: desk (3 blocks, 32x32 input) or full (5 blocks, 224x224)"),
    ConfigField("synth.samples_per_class", int, 50,
                "synthetic images generated per fine class"),
    ConfigField("synth.image_size", int, 32,
                "synthetic image edge length in pixels"),
    ConfigField("synth.noise_level", float, 30.0,
                "gaussian noise sigma added to synthetic textures"),
    ConfigField("patch.window", int, 1000,
                "sliding-window edge length in source-image pixels"),
    ConfigField("patch.stride", int, 0,
                "default window stride; 0 means equal to patch.window (no overlap)"),
    ConfigField("patch.size", int, 0,
                "resize target edge for extracted patches; 0 means the model preset's input size"),
    ConfigField("split.train", float, 0.5, "train split fraction of WSIs"),
    ConfigField("split.dev", float, 0.2, "development split fraction of WSIs"),
    ConfigField("split.test", float, 0.3, "test split fraction of WSIs"),
    ConfigField("filter.epochs", int, 5, "auto-encoder training epochs"),
    ConfigField("filter.batch_size", int, 16,
                "auto-encoder batch size (shrunk automatically for tiny corpora)"),
    ConfigField("filter.embed_dim", int, 64, "auto-encoder embedding width"),
    ConfigField("filter.lr", float, 1e-3, "auto-encoder initial learning rate"),
    ConfigField("normalize.reference", str, "",
                "reference patch path for the target stain model; empty means the first kept patch"),
    ConfigField("normalize.samples", int, 3,
                "patches illustrated as original/normalized/grayscale triplets "
                "(display-only; excluded from the config hash)", hashed=False),
    ConfigField("normalize.sparsity", float, 0.1,
                "L1 penalty on stain concentrations during the stain fit"),
    ConfigField("normalize.od_threshold", float, 0.15,
                "optical-density floor a pixel must exceed to count as tissue"),
    ConfigField("normalize.iterations", int, 200,
                "alternating NNLS iterations for the stain fit"),
    ConfigField("train.epochs", int, 20, "training epochs per run"),
    ConfigField("train.runs", int, 10, "independent training runs per model family"),
    ConfigField("train.batch_size", int, 32, "training batch size"),
    ConfigField("train.eval_batch_size", int, 64, "evaluation batch size"),
    ConfigField("train.loss_weights", str, _DEFAULT_LOSS_WEIGHTS,
                "level-weight anchors as epoch:coarse,fine;... (piecewise constant)"),
    ConfigField("train.lr", str, _DEFAULT_LR,
                "learning-rate anchors as epoch:value;... (piecewise constant)"),
    ConfigField("eval.ci_method", str, "normal",
                "confidence-interval method: normal or student"),
)

_FIELD_BY_KEY = {f.key: f for f in CONFIG_FIELDS}
_STRIDE_PREFIX = "patch.stride."


def _parse_value(field: ConfigField, raw: str):
    try:
        if field.kind is int:
            return int(raw)
        if field.kind is float:
            return float(raw)
    except ValueError:
        raise ValueError(
            f"config key {field.key!r}: cannot parse {raw!r} as {field.kind.__name__}"
        ) from None
    return raw


def parse_config_file(path) -> Dict[str, str]:
    """Raw key=value pairs from a config file; '#' lines and blanks skipped."""
    pairs: Dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected key = value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if key in pairs:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            pairs[key] = value.strip()
    return pairs


def parse_anchor_schedule(text: str, values_per_anchor: int) -> list:
    """'epoch:v[,v];epoch:v[,v];...' into [(epoch, (v, ...)), ...]."""
    anchors = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        epoch_text, _, values_text = part.partition(":")
        try:
            epoch = int(epoch_text)
            values = tuple(float(v) for v in values_text.split(","))
        except ValueError:
            raise ValueError(f"bad schedule anchor {part!r}") from None
        if len(values) != values_per_anchor:
            raise ValueError(
                f"anchor {part!r} carries {len(values)} values, expected {values_per_anchor}")
        anchors.append((epoch, values))
    if not anchors:
        raise ValueError(f"empty schedule {text!r}")
    return anchors


class RunConfig:
    """Effective configuration: defaults, file overrides, CLI overrides."""

    def __init__(self, values: Dict[str, object], strides: Dict[str, int]):
        self.values = values
        self.strides = strides  # fine-class name -> stride override
        self.hierarchy: ClassHierarchy = gi_tract_hierarchy()

    def __getitem__(self, key: str):
        return self.values[key]

    # -- derived accessors --------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def out_dir(self) -> str:
        return self.values["out_dir"]

    def sub_seed(self, name: str) -> int:
        """Stable per-stage seed: hash of root seed and the stage name."""
        digest = hashlib.sha256(f"{self.seed}:{name}".encode()).digest()
        return int.from_bytes(digest[:8], "little") % (2 ** 31)

    def sub_rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.sub_seed(name))

    def stride_for(self, fine_label: str) -> int:
        if fine_label in self.strides:
            return self.strides[fine_label]
        stride = self.values["patch.stride"]
        return stride if stride > 0 else self.values["patch.window"]

    def patch_size(self) -> int:
        size = self.values["patch.size"]
        if size > 0:
            return size
        return 32 if self.values["model.preset"] == "desk" else 224

    def split_ratios(self) -> tuple:
        return (self.values["split.train"], self.values["split.dev"],
                self.values["split.test"])

    def loss_weight_schedule(self) -> LossWeightSchedule:
        text = self.values["train.loss_weights"]
        if text == _DEFAULT_LOSS_WEIGHTS:
            return default_loss_weight_schedule()
        return LossWeightSchedule(anchors=tuple(parse_anchor_schedule(text, 2)))

    def lr_schedule(self) -> LrSchedule:
        anchors = parse_anchor_schedule(self.values["train.lr"], 1)
        return LrSchedule(anchors=tuple((e, v[0]) for e, v in anchors))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.values["train.epochs"],
            runs=self.values["train.runs"],
            batch_size=self.values["train.batch_size"],
            seed=self.sub_seed("train"),
            loss_weight_schedule=self.loss_weight_schedule(),
            lr_schedule=self.lr_schedule(),
            preset=self.values["model.preset"],
            eval_batch_size=self.values["train.eval_batch_size"],
        )

    # -- identity -----------------------------------------------------------

    def effective_lines(self) -> list:
        """Sorted key=value lines for every hashed field, overrides included."""
        lines = []
        for key in sorted(self.values):
            if not _FIELD_BY_KEY[key].hashed:
                continue
            value = self.values[key]
            text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key}={text}")
        for name in sorted(self.strides):
            lines.append(f"{_STRIDE_PREFIX}{name}={self.strides[name]}")
        return lines

    def config_hash(self) -> str:
        blob = "\n".join(self.effective_lines()).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def build_config(pairs: Dict[str, str],
                 seed_override: Optional[int] = None) -> RunConfig:
    """Validate raw pairs against CONFIG_FIELDS and fill in defaults."""
    hierarchy = gi_tract_hierarchy()
    values: Dict[str, object] = {f.key: f.default for f in CONFIG_FIELDS}
    strides: Dict[str, int] = {}
    for key, raw in pairs.items():
        if key in _FIELD_BY_KEY:
            values[key] = _parse_value(_FIELD_BY_KEY[key], raw)
        elif key.startswith(_STRIDE_PREFIX):
            name = key[len(_STRIDE_PREFIX):]
            if name not in hierarchy.fine_names:
                raise ValueError(
                    f"unknown config key {key!r}: {name!r} is not a fine class "
                    f"(expected one of {list(hierarchy.fine_names)})")
            stride = int(raw)
            if stride < 1:
                raise ValueError(f"config key {key!r}: stride must be >= 1")
            strides[name] = stride
        else:
            raise ValueError(f"unknown config key {key!r}")
    if seed_override is not None:
        values["seed"] = seed_override
    config = RunConfig(values, strides)
    _validate(config)
    return config


def load_config(path, seed_override: Optional[int] = None) -> RunConfig:
    return build_config(parse_config_file(path), seed_override)


def _validate(config: RunConfig) -> None:
    v = config.values
    if v["hierarchy"] != "gi_tract":
        raise ValueError(f"unknown hierarchy {v['hierarchy']!r}; only gi_tract is defined")
    if v["model.preset"] not in ("desk", "full"):
        raise ValueError(f"unknown model.preset {v['model.preset']!r}; expected desk or full")
    if v["eval.ci_method"] not in ("normal", "student"):
        raise ValueError(f"eval.ci_method must be normal or student, got {v['eval.ci_method']!r}")
    for key in ("patch.window", "synth.image_size", "synth.samples_per_class",
                "filter.epochs", "filter.batch_size", "filter.embed_dim",
                "normalize.iterations", "normalize.samples",
                "train.epochs", "train.runs", "train.batch_size",
                "train.eval_batch_size"):
        if v[key] < 1:
            raise ValueError(f"config key {key!r} must be >= 1, got {v[key]}")
    for key in ("patch.stride", "patch.size"):
        if v[key] < 0:
            raise ValueError(f"config key {key!r} must be >= 0, got {v[key]}")
    for key in ("synth.noise_level", "normalize.sparsity", "normalize.od_threshold",
                "filter.lr"):
        if v[key] < 0:
            raise ValueError(f"config key {key!r} must be >= 0, got {v[key]}")
    ratios = config.split_ratios()
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split fractions {ratios} do not sum to 1")
    # Parse the schedules now so malformed anchors fail at load time.
    config.loss_weight_schedule()
    config.lr_schedule()


def default_config_text() -> str:
    """A fully commented config file listing every key at its default."""
    lines = ["# every key at its default; '# ' lines are comments"]
    for field in CONFIG_FIELDS:
        lines.append(f"# {field.doc}")
        lines.append(f"{field.key} = {field.default}")
    lines.append("# per-class stride overrides: patch.stride.<fine class> = <pixels>")
    return "\n".join(lines) + "\n"
