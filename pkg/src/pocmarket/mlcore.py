"""Datasets, local training, fixed-point inference, and attack models.

Training runs in ordinary float64 (SGD on softmax cross-entropy); only
the published artifacts are quantized. Inference for any value that can
reach a verifier (accuracy claims, logits in transcripts) runs entirely
on raw fixed-point integers via the exact kernels, with argmax decisions
instead of softmax probabilities, so two parties evaluating the same
model on the same bytes always agree bit for bit.

Dataset features are snapped to the 2**-16 grid at creation time: the
float array is exactly representable and the raw integer view is just
features * 2**16. The serialized form (raw features + u16 labels) is
what gets content-addressed, committed, and embedded in transcripts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from pocmarket import _kernels, fxp
from pocmarket.errors import (
    Divergence,
    DomainError,
    EmptyInput,
    InsufficientData,
    ShapeMismatch,
)
from pocmarket.linalg import Layout, ModelWeights


@dataclass(eq=False)
class Dataset:
    """Feature matrix on the 2**-16 grid plus integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ShapeMismatch("features must be (n, d)")
        if labels.shape != (feats.shape[0],):
            raise ShapeMismatch("labels must be (n,)")
        if self.num_classes < 2 or self.num_classes > 0xFFFF:
            raise DomainError("num_classes out of range")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DomainError("label outside [0, num_classes)")
        raw = np.rint(feats * fxp.SCALE).astype(np.int64)
        feats = raw.astype(np.float64) / fxp.SCALE
        feats.setflags(write=False)
        labels.setflags(write=False)
        self.features = feats
        self.labels = labels

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def features_raw(self) -> np.ndarray:
        return np.rint(self.features * fxp.SCALE).astype(np.int64)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def serialize(self) -> bytes:
        head = struct.pack("<III", self.n, self.dim, self.num_classes)
        feats = self.features_raw.astype("<i8").tobytes()
        labels = self.labels.astype("<u2").tobytes()
        return head + feats + labels

    @classmethod
    def deserialize(cls, data: bytes) -> "Dataset":
        if len(data) < 12:
            raise DomainError("truncated dataset")
        n, d, k = struct.unpack_from("<III", data, 0)
        need = 12 + 8 * n * d + 2 * n
        if len(data) != need:
            raise DomainError("dataset length mismatch")
        raw = np.frombuffer(data, dtype="<i8", offset=12, count=n * d)
        labels = np.frombuffer(data, dtype="<u2", offset=12 + 8 * n * d, count=n)
        feats = raw.astype(np.float64).reshape(n, d) / fxp.SCALE
        return cls(feats, labels.astype(np.int64), k)


def make_blobs(
    n: int,
    dim: int,
    classes: int,
    rng: np.random.Generator,
    mean_scale: float = 2.0,
    noise: float = 1.0,
) -> Dataset:
    """Gaussian class clusters with equal per-class counts (round robin)."""
    means = rng.normal(0.0, mean_scale, size=(classes, dim))
    labels = np.arange(n, dtype=np.int64) % classes
    feats = means[labels] + rng.normal(0.0, noise, size=(n, dim))
    perm = rng.permutation(n)
    return Dataset(feats[perm], labels[perm], classes)


def load_idx(images_path: str, labels_path: str, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (the MNIST container format)."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", fh.read(16))
        if magic != 0x00000803:
            raise DomainError("bad image magic")
        pixels = np.frombuffer(fh.read(count * rows * cols), dtype=np.uint8)
    with open(labels_path, "rb") as fh:
        magic, lcount = struct.unpack(">II", fh.read(8))
        if magic != 0x00000801:
            raise DomainError("bad label magic")
        labels = np.frombuffer(fh.read(lcount), dtype=np.uint8)
    if count != lcount:
        raise ShapeMismatch("image/label count mismatch")
    feats = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(feats, labels.astype(np.int64), num_classes)


# -- model layouts --------------------------------------------------------------

def lr_layout(dim: int, classes: int) -> Layout:
    return (("linear.weight", (dim, classes)), ("linear.bias", (classes,)))


def mlp_layout(dim: int, hidden: int, classes: int) -> Layout:
    return (
        ("fc1.weight", (dim, hidden)),
        ("fc1.bias", (hidden,)),
        ("fc2.weight", (hidden, classes)),
        ("fc2.bias", (classes,)),
    )


def model_layout(kind: str, dim: int, classes: int, hidden: int = 32) -> Layout:
    if kind == "lr":
        return lr_layout(dim, classes)
    if kind == "mlp":
        return mlp_layout(dim, hidden, classes)
    raise DomainError(f"unknown model kind {kind!r}")


def init_weights(kind: str, dim: int, classes: int, hidden: int, rng) -> ModelWeights:
    """Seeded base model. MLP layers must start nonzero: an all-zero first
    layer has identically zero gradients through the ReLU and never trains."""
    layout = model_layout(kind, dim, classes, hidden)
    tensors = {}
    for name, shape in layout:
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            tensors[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
    return ModelWeights.from_real(layout, tensors)


@dataclass(frozen=True)
class TrainerConfig:
    model: str = "lr"
    hidden: int = 32
    learning_rate: float = 0.5
    epochs: int = 2
    batch_size: int = 32


def _check_model_vs_data(w: ModelWeights, ds: Dataset):
    first = w.layout[0]
    if first[1][0] != ds.dim:
        raise ShapeMismatch(f"model dim {first[1][0]} != data dim {ds.dim}")
    last_shape = w.layout[-2][1]
    if last_shape[-1] != ds.num_classes:
        raise ShapeMismatch(
            f"model classes {last_shape[-1]} != data classes {ds.num_classes}"
        )


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _float_params(w: ModelWeights) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in w.to_real().items()}


def train_local(
    w0: ModelWeights, ds: Dataset, cfg: TrainerConfig, rng: np.random.Generator
) -> ModelWeights:
    """Minibatch SGD on softmax cross-entropy, starting from w0."""
    if ds.n == 0:
        raise EmptyInput("cannot train on an empty shard")
    _check_model_vs_data(w0, ds)
    params = _float_params(w0)
    is_mlp = "fc1.weight" in params
    X, y = ds.features, ds.labels
    onehot = np.eye(ds.num_classes)[y]
    bs = max(1, min(cfg.batch_size, ds.n))
    lr = cfg.learning_rate
    for _ in range(cfg.epochs):
        perm = rng.permutation(ds.n)
        for start in range(0, ds.n, bs):
            idx = perm[start:start + bs]
            Xb, Yb = X[idx], onehot[idx]
            scale = 1.0 / len(idx)
            if is_mlp:
                W1, b1 = params["fc1.weight"], params["fc1.bias"]
                W2, b2 = params["fc2.weight"], params["fc2.bias"]
                Z = Xb @ W1 + b1
                H = np.maximum(Z, 0.0)
                delta = (_softmax(H @ W2 + b2) - Yb) * scale
                dW2 = H.T @ delta
                db2 = delta.sum(axis=0)
                dZ = (delta @ W2.T) * (Z > 0)
                W2 -= lr * dW2
                b2 -= lr * db2
                params["fc1.weight"] = W1 - lr * (Xb.T @ dZ)
                params["fc1.bias"] = b1 - lr * dZ.sum(axis=0)
            else:
                W, b = params["linear.weight"], params["linear.bias"]
                delta = (_softmax(Xb @ W + b) - Yb) * scale
                params["linear.weight"] = W - lr * (Xb.T @ delta)
                params["linear.bias"] = b - lr * delta.sum(axis=0)
    for arr in params.values():
        if not np.all(np.isfinite(arr)):
            raise Divergence("training produced non-finite weights")
    return ModelWeights.from_real(w0.layout, params)


def local_loss(w: ModelWeights, ds: Dataset) -> float:
    """Mean cross-entropy of the float view of w on ds."""
    if ds.n == 0:
        raise EmptyInput("loss of empty dataset")
    _check_model_vs_data(w, ds)
    params = w.to_real()
    if "fc1.weight" in params:
        H = np.maximum(ds.features @ params["fc1.weight"] + params["fc1.bias"], 0.0)
        logits = H @ params["fc2.weight"] + params["fc2.bias"]
    else:
        logits = ds.features @ params["linear.weight"] + params["linear.bias"]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(ds.n), ds.labels].mean())


# -- fixed-point inference -------------------------------------------------------

def forward_fixed(w: ModelWeights, features_raw: np.ndarray) -> dict[str, np.ndarray]:
    """Exact integer forward pass; returns every intermediate a verifier
    needs (pre-activation, post-activation, remainder witnesses)."""
    names = {name for name, _ in w.layout}
    out: dict[str, np.ndarray] = {}
    if "fc1.weight" in names:
        pre, pre_rem = _kernels.linear_floor(
            features_raw, w.get("fc1.weight"), w.get("fc1.bias")
        )
        post = np.maximum(pre, 0)
        logits, logits_rem = _kernels.linear_floor(
            post, w.get("fc2.weight"), w.get("fc2.bias")
        )
        out["hidden_pre"] = pre
        out["hidden_pre_rem"] = pre_rem
        out["hidden_post"] = post
    else:
        logits, logits_rem = _kernels.linear_floor(
            features_raw, w.get("linear.weight"), w.get("linear.bias")
        )
    out["logits"] = logits
    out["logits_rem"] = logits_rem
    return out


def accuracy_count(w: ModelWeights, ds: Dataset) -> tuple[int, int]:
    """Exact (correct, total) under integer argmax, first max wins ties."""
    if ds.n == 0:
        raise EmptyInput("accuracy of empty dataset")
    _check_model_vs_data(w, ds)
    logits = forward_fixed(w, ds.features_raw)["logits"]
    pred = np.argmax(logits, axis=1)
    return int((pred == ds.labels).sum()), ds.n


def accuracy(w: ModelWeights, ds: Dataset) -> float:
    correct, total = accuracy_count(w, ds)
    return correct / total


# -- attacks ---------------------------------------------------------------------

@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"          # none | byzantine | backdoor
    sigma: float = 1.0          # byzantine: stddev of the random weights
    beta: float = 10.0          # backdoor: scale factor on the local model

    def __post_init__(self):
        if self.kind not in ("none", "byzantine", "backdoor"):
            raise DomainError(f"unknown attack kind {self.kind!r}")


def poison_backdoor(ds: Dataset) -> Dataset:
    """Trigger rule: samples whose first feature exceeds the shard's 90th
    percentile get relabeled to class 0. Deterministic given the shard."""
    if ds.n < 2:
        raise InsufficientData("shard too small to poison")
    f0 = ds.features[:, 0]
    thr = np.sort(f0)[int(0.9 * (ds.n - 1))]
    labels = ds.labels.copy()
    labels[f0 > thr] = 0
    return Dataset(ds.features, labels, ds.num_classes)


def apply_attack(
    spec: AttackSpec,
    base: ModelWeights,
    ds: Dataset,
    cfg: TrainerConfig,
    rng: np.random.Generator,
) -> ModelWeights:
    """Produce the model a malicious trainer would submit this round."""
    if spec.kind == "none":
        return train_local(base, ds, cfg, rng)
    if spec.kind == "byzantine":
        junk = rng.normal(0.0, spec.sigma, size=base.n_params)
        return ModelWeights(base.layout, np.rint(junk * fxp.SCALE).astype(np.int64))
    # backdoor: train honestly on the poisoned shard, then scale
    local = train_local(base, poison_backdoor(ds), cfg, rng)
    beta = spec.beta
    if float(beta).is_integer():
        raws = local.raws * np.int64(int(beta))
    else:
        raws = np.rint(local.raws.astype(np.float64) * beta).astype(np.int64)
    return ModelWeights(base.layout, raws)


# -- partitioning -----------------------------------------------------------------

def partition(
    ds: Dataset,
    scheme: str,
    parts: int,
    rng: np.random.Generator,
    rare_classes: tuple[int, ...] = (0, 1),
    holder: int = 0,
) -> list[Dataset]:
    """Split a dataset into trainer shards.

    "iid": shuffle and deal round-robin. "rare": shard `holder` receives
    every sample of `rare_classes` and nothing else; remaining samples are
    dealt round-robin to the other shards.
    """
    if parts < 1:
        raise DomainError("parts must be >= 1")
    if scheme == "iid":
        perm = rng.permutation(ds.n)
        shards = [ds.subset(perm[i::parts]) for i in range(parts)]
    elif scheme == "rare":
        if parts < 2:
            raise DomainError("rare scheme needs >= 2 shards")
        rare_mask = np.isin(ds.labels, np.asarray(rare_classes, dtype=np.int64))
        rare_idx = np.flatnonzero(rare_mask)
        rest_idx = np.flatnonzero(~rare_mask)
        if rare_idx.size == 0:
            raise InsufficientData("no samples of the designated classes")
        rest_perm = rest_idx[rng.permutation(rest_idx.size)]
        others = [rest_perm[i::parts - 1] for i in range(parts - 1)]
        shards = []
        oi = 0
        for i in range(parts):
            if i == holder:
                shards.append(ds.subset(rare_idx))
            else:
                shards.append(ds.subset(others[oi]))
                oi += 1
    else:
        raise DomainError(f"unknown partition scheme {scheme!r}")
    if any(s.n == 0 for s in shards):
        raise InsufficientData("a shard came out empty")
    return shards


def split_owner_data(ds: Dataset, seed: bytes) -> tuple[Dataset, Dataset]:
    """Halve the owner's sample into validation and test splits.

    The permutation is seeded from the given bytes, so the contract and
    the aggregator derive the identical split independently.
    """
    if ds.n < 2:
        raise InsufficientData("owner dataset too small to split")
    entropy = list(struct.unpack("<8I", seed[:32].ljust(32, b"\0")))
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    perm = rng.permutation(ds.n)
    half = ds.n // 2
    return ds.subset(perm[:half]), ds.subset(perm[half:])
