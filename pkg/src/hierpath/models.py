"""Declarative construction of the flat and branched VGG-style networks.

Both families share one trunk recipe: repeated [3x3 conv -> ReLU -> batch
norm] groups closed by a 2x2 max pool per block, then a fully-connected
head (ReLU + batch norm + dropout 0.5 per hidden layer) emitting fine-class
logits.  The branched variant taps the trunk after a configurable block's
pool and runs a second fully-connected head emitting coarse-category
logits; both heads are produced by a single forward pass.

Construction order is trunk, head, branch, so equal seeds give bitwise-
identical trunk and head parameters across the two families.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .hierarchy import ClassHierarchy, gi_tract_hierarchy

CHECKPOINT_MAGIC = "branched-vgg-ckpt-1"


@dataclass(frozen=True)
class ModelSpec:
    """Shape-level description of one network family."""

    blocks: tuple  # ((conv_count, filters), ...)
    input_shape: tuple  # (channels, height, width)
    head_widths: tuple
    branch_attach: int
    branch_widths: tuple
    preset: str = "custom"

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("spec needs at least one block")
        for i, (count, filters) in enumerate(self.blocks):
            if count < 1 or filters < 1:
                raise ValueError(f"block {i} has non-positive extent ({count},{filters})")
        c, h, w = self.input_shape
        if c < 1 or h < 1 or w < 1:
            raise ValueError(f"bad input shape {self.input_shape}")
        divisor = 2 ** len(self.blocks)
        if h % divisor or w % divisor:
            raise ValueError(
                f"input {h}x{w} not divisible by 2^{len(self.blocks)} "
                "(each block halves the spatial extent)")
        if not 1 <= self.branch_attach <= len(self.blocks) - 1:
            raise ValueError(
                f"branch_attach {self.branch_attach} outside [1,{len(self.blocks) - 1}]")
        if any(wd < 1 for wd in self.head_widths) or any(wd < 1 for wd in self.branch_widths):
            raise ValueError("head and branch widths must be positive")

    def spatial_after(self, n_blocks: int) -> tuple:
        _, h, w = self.input_shape
        return h // 2 ** n_blocks, w // 2 ** n_blocks

    def canonical(self) -> dict:
        return {
            "blocks": [list(b) for b in self.blocks],
            "input_shape": list(self.input_shape),
            "head_widths": list(self.head_widths),
            "branch_attach": self.branch_attach,
            "branch_widths": list(self.branch_widths),
            "preset": self.preset,
        }


def full_spec() -> ModelSpec:
    """The 224x224 configuration: 13 convs in 5 blocks + 3 fully-connected."""
    return ModelSpec(
        blocks=((2, 64), (2, 128), (3, 256), (3, 512), (3, 512)),
        input_shape=(1, 224, 224),
        head_widths=(4096, 4096),
        branch_attach=3,
        branch_widths=(256, 256),
        preset="full",
    )


def desk_spec() -> ModelSpec:
    """Small configuration that trains in minutes on a CPU."""
    return ModelSpec(
        blocks=((1, 8), (1, 16), (1, 32)),
        input_shape=(1, 32, 32),
        head_widths=(64,),
        branch_attach=2,
        branch_widths=(32,),
        preset="desk",
    )


def spec_by_name(name: str) -> ModelSpec:
    if name == "full":
        return full_spec()
    if name == "desk":
        return desk_spec()
    raise ValueError(f"unknown preset {name!r}; expected full or desk")


@dataclass
class ForwardContext:
    """Per-call switches: train vs infer, and what the pass may mutate."""

    training: bool
    rng: Optional[np.random.Generator] = None
    bn_update: bool = True
    dropout_active: bool = True


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.normal(0.0, std, size=shape)).astype(T.default_dtype())


class Conv3x3:
    def __init__(self, name: str, in_ch: int, out_ch: int, rng):
        self.name = name
        self.kernel = T.Tensor(_kaiming(rng, (out_ch, in_ch, 3, 3), in_ch * 9),
                               requires_grad=True)
        self.bias = T.Tensor(np.zeros(out_ch, dtype=T.default_dtype()), requires_grad=True)

    trainable = True

    def forward(self, x, ctx):
        return T.add_channel_bias(T.conv2d(x, self.kernel), self.bias)

    def params(self):
        return [(f"{self.name}.kernel", self.kernel), (f"{self.name}.bias", self.bias)]

    def stats(self):
        return []


class Dense:
    def __init__(self, name: str, in_dim: int, out_dim: int, rng):
        self.name = name
        self.weight = T.Tensor(_kaiming(rng, (in_dim, out_dim), in_dim), requires_grad=True)
        self.bias = T.Tensor(np.zeros(out_dim, dtype=T.default_dtype()), requires_grad=True)

    trainable = True

    def forward(self, x, ctx):
        return T.add_bias(T.matmul(x, self.weight), self.bias)

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def stats(self):
        return []


class BatchNorm:
    def __init__(self, name: str, features: int):
        self.name = name
        self.state = T.BatchNormState(features)

    trainable = False

    def forward(self, x, ctx):
        return T.batch_norm(x, self.state, training=ctx.training,
                            update_running=ctx.bn_update)

    def params(self):
        return [(f"{self.name}.gamma", self.state.gamma), (f"{self.name}.beta", self.state.beta)]

    def stats(self):
        return [(f"{self.name}.running_mean", self.state.running_mean),
                (f"{self.name}.running_var", self.state.running_var)]


class Relu:
    trainable = False

    def forward(self, x, ctx):
        return T.relu(x)

    def params(self):
        return []

    def stats(self):
        return []


class MaxPool:
    trainable = False

    def forward(self, x, ctx):
        return T.maxpool2d(x)

    def params(self):
        return []

    def stats(self):
        return []


class Flatten:
    trainable = False

    def forward(self, x, ctx):
        return T.flatten(x)

    def params(self):
        return []

    def stats(self):
        return []


class Dropout:
    def __init__(self, p: float = 0.5):
        self.p = p

    trainable = False

    def forward(self, x, ctx):
        return T.dropout(x, self.p, training=ctx.training and ctx.dropout_active,
                         rng=ctx.rng)

    def params(self):
        return []

    def stats(self):
        return []


class Network:
    """Trunk + fine head, with an optional coarse branch."""

    def __init__(self, spec: ModelSpec, hierarchy: ClassHierarchy,
                 trunk, head, branch, family: str):
        self.spec = spec
        self.hierarchy = hierarchy
        self.trunk = trunk  # list of (block_index, layer); pool closes each block
        self.head = head
        self.branch = branch  # None for the flat family
        self.family = family

    def forward(self, x: T.Tensor, ctx: ForwardContext):
        """Returns (coarse_logits or None, fine_logits)."""
        tap = None
        h = x
        for block_idx, layer in self.trunk:
            h = layer.forward(h, ctx)
            if isinstance(layer, MaxPool) and block_idx == self.spec.branch_attach:
                tap = h
        coarse = None
        if self.branch is not None:
            b = tap
            for layer in self.branch:
                b = layer.forward(b, ctx)
            coarse = b
        for layer in self.head:
            h = layer.forward(h, ctx)
        return coarse, h

    def _layer_groups(self):
        groups = [("trunk", [layer for _, layer in self.trunk]), ("head", self.head)]
        if self.branch is not None:
            groups.append(("branch", self.branch))
        return groups

    def params(self):
        out = []
        for prefix, layers in self._layer_groups():
            for layer in layers:
                out.extend((f"{prefix}.{n}", t) for n, t in layer.params())
        return out

    def stats(self):
        out = []
        for prefix, layers in self._layer_groups():
            for layer in layers:
                out.extend((f"{prefix}.{n}", a) for n, a in layer.stats())
        return out

    def branch_params(self):
        if self.branch is None:
            return []
        return [(n, t) for n, t in self.params() if n.startswith("branch.")]

    def trainable_layer_count(self) -> int:
        return sum(layer.trainable for _, layer in self.trunk) + sum(
            layer.trainable for layer in self.head) + (
            sum(layer.trainable for layer in self.branch) if self.branch else 0)

    def param_count(self) -> int:
        return sum(t.numel for _, t in self.params())

    def zero_grads(self):
        for _, t in self.params():
            t.grad = None


def _build_trunk(spec: ModelSpec, rng) -> list:
    layers = []
    in_ch = spec.input_shape[0]
    for bi, (count, filters) in enumerate(spec.blocks, start=1):
        for ci in range(1, count + 1):
            name = f"b{bi}.conv{ci}"
            layers.append((bi, Conv3x3(name, in_ch, filters, rng)))
            layers.append((bi, Relu()))
            layers.append((bi, BatchNorm(f"b{bi}.bn{ci}", filters)))
            in_ch = filters
        layers.append((bi, MaxPool()))
    return layers


def _build_fc_stack(prefix: str, in_dim: int, widths, out_dim: int, rng) -> list:
    layers = [Flatten()]
    dim = in_dim
    for i, width in enumerate(widths, start=1):
        layers.append(Dense(f"{prefix}fc{i}", dim, width, rng))
        layers.append(Relu())
        layers.append(BatchNorm(f"{prefix}bn{i}", width))
        layers.append(Dropout(0.5))
        dim = width
    layers.append(Dense(f"{prefix}out", dim, out_dim, rng))
    return layers


def _head_input_dim(spec: ModelSpec) -> int:
    h, w = spec.spatial_after(len(spec.blocks))
    return spec.blocks[-1][1] * h * w


def _branch_input_dim(spec: ModelSpec) -> int:
    h, w = spec.spatial_after(spec.branch_attach)
    return spec.blocks[spec.branch_attach - 1][1] * h * w


def build_flat(spec: ModelSpec, rng, hierarchy: Optional[ClassHierarchy] = None) -> Network:
    hierarchy = hierarchy or gi_tract_hierarchy()
    trunk = _build_trunk(spec, rng)
    head = _build_fc_stack("", _head_input_dim(spec), spec.head_widths,
                           hierarchy.n_fine, rng)
    return Network(spec, hierarchy, trunk, head, None, family="flat")


def build_hierarchical(spec: ModelSpec, rng,
                       hierarchy: Optional[ClassHierarchy] = None) -> Network:
    hierarchy = hierarchy or gi_tract_hierarchy()
    trunk = _build_trunk(spec, rng)
    head = _build_fc_stack("", _head_input_dim(spec), spec.head_widths,
                           hierarchy.n_fine, rng)
    branch = _build_fc_stack("", _branch_input_dim(spec), spec.branch_widths,
                             hierarchy.n_coarse, rng)
    return Network(spec, hierarchy, trunk, head, branch, family="hier")


def build_family(family: str, spec: ModelSpec, rng,
                 hierarchy: Optional[ClassHierarchy] = None) -> Network:
    if family == "flat":
        return build_flat(spec, rng, hierarchy)
    if family == "hier":
        return build_hierarchical(spec, rng, hierarchy)
    raise ValueError(f"unknown model family {family!r}; expected flat or hier")


# ---------------------------------------------------------------------------
# checkpoint container: magic line, JSON header line, then raw arrays

def spec_hash(spec: ModelSpec, family: str) -> str:
    payload = json.dumps({"spec": spec.canonical(), "family": family},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def save_network(net: Network, path, config_hash: str = "") -> None:
    entries = [(n, t.data, "param") for n, t in net.params()]
    entries += [(n, a, "stat") for n, a in net.stats()]
    header = {
        "magic": CHECKPOINT_MAGIC,
        "family": net.family,
        "spec": net.spec.canonical(),
        "spec_hash": spec_hash(net.spec, net.family),
        "config_hash": config_hash,
        "dtype": str(entries[0][1].dtype),
        "tensors": [{"name": n, "shape": list(a.shape), "kind": k} for n, a, k in entries],
    }
    with open(path, "wb") as fh:
        fh.write((CHECKPOINT_MAGIC + "\n").encode())
        fh.write((json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode())
        for _, arr, _ in entries:
            fh.write(np.ascontiguousarray(arr).astype("<" + arr.dtype.str[1:]).tobytes())


def load_network(path, hierarchy: Optional[ClassHierarchy] = None,
                 expected_spec: Optional[ModelSpec] = None,
                 expected_config_hash: Optional[str] = None):
    """Rebuild the network a checkpoint describes.  Returns (network, header)."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode().strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        header = json.loads(fh.readline().decode())
        raw = fh.read()
    spec = ModelSpec(
        blocks=tuple(tuple(b) for b in header["spec"]["blocks"]),
        input_shape=tuple(header["spec"]["input_shape"]),
        head_widths=tuple(header["spec"]["head_widths"]),
        branch_attach=header["spec"]["branch_attach"],
        branch_widths=tuple(header["spec"]["branch_widths"]),
        preset=header["spec"]["preset"],
    )
    if expected_spec is not None and spec_hash(expected_spec, header["family"]) != header["spec_hash"]:
        raise ValueError(
            f"{path}: checkpoint spec hash {header['spec_hash']} does not match "
            f"the requested spec ({spec_hash(expected_spec, header['family'])})")
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        raise ValueError(
            f"{path}: checkpoint config hash {header['config_hash']!r} does not "
            f"match the active config ({expected_config_hash!r})")
    net = build_family(header["family"], spec, np.random.default_rng(0), hierarchy)
    dtype = np.dtype(header["dtype"])
    offset = 0
    slots = {n: t for n, t in net.params()}
    stat_slots = dict(net.stats())
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n_bytes = int(np.prod(shape)) * dtype.itemsize
        arr = np.frombuffer(raw[offset:offset + n_bytes],
                            dtype="<" + dtype.str[1:]).astype(dtype).reshape(shape)
        offset += n_bytes
        if entry["kind"] == "param":
            slots[entry["name"]].data = arr.copy()
        else:
            stat_slots[entry["name"]][...] = arr
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint payload")
    return net, header
