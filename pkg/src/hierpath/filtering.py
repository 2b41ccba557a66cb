"""Patch quality filtering: autoencoder embeddings clustered into two groups.

Background patches in stained slides are bright and near-uniform, tissue
patches textured and darker.  A small convolutional autoencoder maps each
patch to a compact embedding; 2-means splits the embeddings, and the
cluster whose members are brighter on average is dropped.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .dataset import make_batches
from .models import Conv3x3, Dense, ForwardContext
from .training import RmsPropState, rmsprop_step


class CaeModel:
    """Conv encoder (16/32/64 channels, pooling by 2 per stage) to a dense
    embedding, mirrored conv decoder with nearest-neighbor upsampling."""

    def __init__(self, input_hw: int, in_channels: int = 3, embed_dim: int = 64,
                 rng: Optional[np.random.Generator] = None):
        if input_hw % 8 != 0:
            raise ValueError(f"input size {input_hw} must be divisible by 8")
        if embed_dim < 2:
            raise ValueError(f"embedding dimension must be >= 2, got {embed_dim}")
        rng = rng or np.random.default_rng(0)
        self.input_hw = input_hw
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self.bottom = input_hw // 8
        widths = (16, 32, 64)
        self.enc_convs = []
        prev = in_channels
        for i, w in enumerate(widths, start=1):
            self.enc_convs.append(Conv3x3(f"enc.conv{i}", prev, w, rng))
            prev = w
        flat_dim = 64 * self.bottom * self.bottom
        self.enc_fc = Dense("enc.fc", flat_dim, embed_dim, rng)
        self.dec_fc = Dense("dec.fc", embed_dim, flat_dim, rng)
        self.dec_convs = []
        for i, (w_in, w_out) in enumerate(zip((64, 32, 16), (32, 16, in_channels)), start=1):
            self.dec_convs.append(Conv3x3(f"dec.conv{i}", w_in, w_out, rng))

    def params(self):
        out = []
        for layer in self.enc_convs + [self.enc_fc, self.dec_fc] + self.dec_convs:
            out.extend(layer.params())
        return out

    def zero_grads(self):
        for _, t in self.params():
            t.grad = None

    def encode(self, x: T.Tensor) -> T.Tensor:
        ctx = ForwardContext(training=False)
        h = x
        for conv in self.enc_convs:
            h = T.maxpool2d(T.relu(conv.forward(h, ctx)))
        return self.enc_fc.forward(T.flatten(h), ctx)

    def decode(self, z: T.Tensor) -> T.Tensor:
        ctx = ForwardContext(training=False)
        h = T.relu(self.dec_fc.forward(z, ctx))
        h = T.reshape(h, (z.data.shape[0], 64, self.bottom, self.bottom))
        for i, conv in enumerate(self.dec_convs):
            h = conv.forward(T.upsample2d(h), ctx)
            if i < len(self.dec_convs) - 1:
                h = T.relu(h)
        return h

    def reconstruct(self, x: T.Tensor) -> T.Tensor:
        return self.decode(self.encode(x))


def _mse(pred: T.Tensor, target: T.Tensor) -> T.Tensor:
    diff = T.subtract(pred, target)
    return T.mean_all(T.multiply(diff, diff))


def train_cae(patches: np.ndarray, epochs: int = 5,
              rng: Optional[np.random.Generator] = None,
              batch_size: int = 32, lr: float = 1e-3,
              embed_dim: int = 64):
    """Fit the autoencoder on [N,C,S,S] floats in [0,1].

    Every tenth patch is held out; returns (model, history) where history
    has the held-out MSE before and after training.
    """
    patches = np.asarray(patches, dtype=T.default_dtype())
    if patches.ndim != 4:
        raise ValueError(f"patches must be [N,C,S,S], got {patches.shape}")
    n = patches.shape[0]
    if n < 2 * batch_size:
        raise ValueError(f"need at least {2 * batch_size} patches, got {n}")
    rng = rng or np.random.default_rng(0)
    holdout_mask = np.arange(n) % 10 == 9
    train_x = patches[~holdout_mask]
    hold_x = patches[holdout_mask]
    model = CaeModel(patches.shape[2], in_channels=patches.shape[1],
                     embed_dim=embed_dim, rng=rng)

    def holdout_mse():
        total, count = 0.0, 0
        for start in range(0, hold_x.shape[0], batch_size):
            chunk = hold_x[start:start + batch_size]
            recon = model.reconstruct(T.Tensor(chunk)).data
            total += float(((recon - chunk) ** 2).sum())
            count += chunk.size
        return total / count

    initial = holdout_mse()
    state = RmsPropState()
    for epoch in range(epochs):
        # halve the step twice late in training so RMSprop settles instead
        # of oscillating around the optimum
        epoch_lr = lr * (0.5 ** ((epoch >= epochs // 2) + (epoch >= 3 * epochs // 4)))
        for batch in make_batches(train_x.shape[0], min(batch_size, train_x.shape[0]), rng):
            xb = T.Tensor(train_x[batch])
            with T.Tape() as tape:
                loss = _mse(model.reconstruct(xb), T.Tensor(train_x[batch]))
            model.zero_grads()
            T.backward(tape, loss)
            rmsprop_step(model.params(), state, epoch_lr)
    history = {"initial_holdout_mse": initial, "final_holdout_mse": holdout_mse()}
    return model, history


def embed_patches(model: CaeModel, patches: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Embeddings for [N,C,S,S] floats, as a [N,d] float64 array."""
    patches = np.asarray(patches, dtype=T.default_dtype())
    out = []
    for start in range(0, patches.shape[0], batch_size):
        z = model.encode(T.Tensor(patches[start:start + batch_size]))
        out.append(z.data.astype(np.float64))
    return np.concatenate(out, axis=0)


@dataclass
class ClusterAssignment:
    centroids: np.ndarray  # [2,d]
    cluster_ids: np.ndarray  # [N] in {0,1}
    useless_cluster: int  # -1 when clustering was degenerate

    @property
    def kept(self) -> np.ndarray:
        return self.cluster_ids != self.useless_cluster

    @property
    def labels(self) -> tuple:
        return tuple("useful" if k else "useless" for k in self.kept)


def filter_patches(embeddings: np.ndarray, mean_intensities: np.ndarray,
                   k: int = 2, rng: Optional[np.random.Generator] = None,
                   max_iterations: int = 100) -> ClusterAssignment:
    """2-means over embeddings; the brighter cluster is marked useless.

    Uses k-means++ seeding and Lloyd's iterations until assignments
    stabilize.  mean_intensities (one value per patch, any brightness
    scale) decides which cluster is background.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    intensities = np.asarray(mean_intensities, dtype=np.float64)
    if emb.ndim != 2:
        raise ValueError(f"embeddings must be [N,d], got {emb.shape}")
    if intensities.shape != (emb.shape[0],):
        raise ValueError("need one mean intensity per embedding")
    if k != 2:
        raise ValueError(f"exactly 2 clusters supported, got k={k}")
    n = emb.shape[0]
    if np.all(emb == emb[0]):
        warnings.warn("all embeddings identical; keeping every patch")
        return ClusterAssignment(np.stack([emb[0], emb[0]]),
                                 np.zeros(n, dtype=np.int64), -1)
    rng = rng or np.random.default_rng(0)

    # k-means++ for k=2: random first seed, second drawn ~ squared distance
    first = int(rng.integers(n))
    d2 = ((emb - emb[first]) ** 2).sum(axis=1)
    second = int(rng.choice(n, p=d2 / d2.sum()))
    centroids = np.stack([emb[first], emb[second]])

    assign = np.full(n, -1, dtype=np.int64)
    prev_objective = np.inf
    for _ in range(max_iterations):
        dists = ((emb[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        reseeded = False
        for c in range(2):
            if not np.any(new_assign == c):
                # a cluster emptied: restart it at the farthest point
                far = int(dists[:, 1 - c].argmax())
                centroids[c] = emb[far]
                new_assign[far] = c
                reseeded = True
        objective = float(((emb - centroids[new_assign]) ** 2).sum())
        if not reseeded and objective > prev_objective * (1 + 1e-12) + 1e-12:
            raise AssertionError(
                f"k-means objective increased: {prev_objective} -> {objective}")
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(2):
            centroids[c] = emb[assign == c].mean(axis=0)
        prev_objective = float(((emb - centroids[assign]) ** 2).sum())

    bright = [float(intensities[assign == c].mean()) for c in range(2)]
    useless = int(np.argmax(bright))
    return ClusterAssignment(centroids, assign, useless)
