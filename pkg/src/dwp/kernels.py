"""Source networks, kernel harvesting and pruning, and on-disk formats.

Kernel dataset file (little-endian)::

    "DWPK"  u32 version  u32 N  u16 H  u16 W      16-byte header
    u16 pad=0  6 reserved zero bytes              8 bytes
    N*H*W f32                                     row-major kernels

with provenance in a JSON sidecar ``<name>.meta.json``.

Checkpoint file (little-endian)::

    "DWPC"  u32 version  u32 blob count
    per blob: u16 name length, name (utf-8), u8 rank, rank * u32 dims, f32 data
    u32 length, JSON metadata
"""
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam
from .autodiff import functional as F
from .errors import DivergenceError, FormatError
from .layers import Network, NetworkSpec, LayerSpec, build_network, source_spec
from .rng import stream

log = logging.getLogger(__name__)

KERNEL_MAGIC = b"DWPK"
KERNEL_VERSION = 1
KERNEL_HEADER = struct.Struct("<4sIIHH")
KERNEL_DIMS_TAIL = struct.Struct("<H6x")
CKPT_MAGIC = b"DWPC"
CKPT_VERSION = 1


# -- deterministic training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 100
    lr: float = 1e-3
    lr_decay: bool = True
    l2: float = 0.0
    seed: int = 0


@dataclass
class TrainResult:
    model: Network
    step_losses: list[float] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)


def l2_penalty(model: Network):
    """Sum of squared conv kernels and linear weights (biases excluded)."""
    total = None
    for name, p in model.named_parameters():
        if name.endswith("bias") or not p.requires_grad:
            continue
        term = F.square(p).sum()
        total = term if total is None else total + term
    return total


def train_deterministic(train, model: Network, config: TrainConfig, test=None, callback=None) -> TrainResult:
    """Minimize mean cross-entropy ``+ l2 * ||W||^2`` with Adam and linear lr decay.

    Minibatch order comes from the ``(seed, "train", "order")`` stream, the
    same one the variational trainer uses. ``callback(step, model)`` runs
    after every update.
    """
    if config.l2 < 0:
        raise ValueError("l2 must be non-negative")
    x_all, y_all = train.images, train.labels
    n = len(y_all)
    steps_per_epoch = int(np.ceil(n / config.batch_size))
    horizon = steps_per_epoch * config.epochs if config.lr_decay else None
    opt = Adam(model.trainable_parameters(), lr=config.lr, decay_horizon=horizon)
    order_rng = stream(config.seed, "train", "order")
    result = TrainResult(model=model)
    step = 0
    for epoch in range(config.epochs):
        correct, total_loss = 0, 0.0
        for start_idx in _batches(n, config.batch_size, order_rng):
            xb, yb = x_all[start_idx], y_all[start_idx]
            opt.zero_grad()
            logits = model(xb)
            loss = F.cross_entropy(logits, yb)
            if config.l2:
                loss = loss + config.l2 * l2_penalty(model)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"train_deterministic step {step}", {"loss": float(loss.data)})
            loss.backward()
            opt.step()
            step += 1
            result.step_losses.append(float(loss.data))
            total_loss += float(loss.data) * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            if callback is not None:
                callback(step, model)
        row = {"epoch": epoch, "step": step, "loss": total_loss / n, "train_acc": correct / n}
        if test is not None:
            row["test_acc"] = evaluate_accuracy(model, test)
        result.trace.append(row)
        log.debug("deterministic epoch %d: %s", epoch, row)
    return result


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate_accuracy(model: Network, data, batch: int = 1000) -> float:
    from .autodiff import no_grad

    correct = 0
    with no_grad():
        for start in range(0, len(data.labels), batch):
            logits = model(data.images[start:start + batch]).data
            correct += int((logits.argmax(axis=1) == data.labels[start:start + batch]).sum())
    return correct / max(1, len(data.labels))


def train_source_model(train, l2: float = 1e-3, epochs: int = 10, seed: int = 0, width: float = 0.125,
                       batch_size: int = 100, lr: float = 1e-3, spec: NetworkSpec | None = None) -> Network:
    """Train one deterministic source network whose kernels feed the prior."""
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    spec = spec or source_spec(width, classes=train.classes, input_shape=train.images.shape[1:])
    model = build_network(spec, "deterministic", rng=stream(seed, "source", "init"))
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, l2=l2, seed=seed)
    return train_deterministic(train, model, cfg).model


# -- kernel datasets ---------------------------------------------------------------------------

@dataclass
class KernelDataset:
    kernels: np.ndarray  # (N, H, W) float32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kernels = np.ascontiguousarray(self.kernels, dtype=np.float32)
        if self.kernels.ndim != 3:
            raise ValueError(f"kernels must be (N, H, W), got shape {self.kernels.shape}")
        if len(self.kernels) < 1:
            raise ValueError("kernel dataset is empty")
        if not np.isfinite(self.kernels).all():
            raise ValueError("kernel dataset contains non-finite values")

    def __len__(self) -> int:
        return len(self.kernels)

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[-1]


def harvest_kernels(models: list[Network], layer_index: int, model_ids: list | None = None) -> KernelDataset:
    """Flatten the ``layer_index``-th conv layer of each model over (model, filter, channel)."""
    if not models:
        raise ValueError("harvest_kernels: no models")
    chunks = []
    shape = None
    for m in models:
        w = m.conv_layers()[layer_index].kernels.data
        if shape is not None and w.shape[-2:] != shape:
            raise ValueError(f"harvest_kernels: kernel size {w.shape[-2:]} differs from {shape}")
        shape = w.shape[-2:]
        chunks.append(w.reshape(-1, *shape))
    meta = {
        "source_models": list(model_ids) if model_ids is not None else list(range(len(models))),
        "layer_index": layer_index,
        "pruning": None,
    }
    return KernelDataset(np.concatenate(chunks), meta)


def kernel_norms(kernels: np.ndarray) -> np.ndarray:
    return np.sqrt((np.asarray(kernels, dtype=np.float64).reshape(len(kernels), -1) ** 2).sum(axis=1))


def prune_small_norm(dataset: KernelDataset, factor: float = 0.1, threshold: float | None = None) -> KernelDataset:
    """Drop kernels with L2 norm below ``factor * median norm`` (or an explicit ``threshold``)."""
    norms = kernel_norms(dataset.kernels)
    rule = "absolute" if threshold is not None else f"{factor} x median norm"
    if threshold is None:
        threshold = factor * float(np.median(norms))
    keep = norms >= threshold
    if not keep.any():
        raise ValueError(f"prune_small_norm: all {len(norms)} kernels fall below threshold {threshold:g}")
    meta = dict(dataset.meta, pruning={"rule": rule, "threshold": float(threshold),
                                       "kept": int(keep.sum()), "dropped": int((~keep).sum())})
    log.info("pruned %d of %d kernels below norm %.4g", int((~keep).sum()), len(norms), threshold)
    return KernelDataset(dataset.kernels[keep], meta)


# -- atomic file IO -----------------------------------------------------------------------------

def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def meta_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".meta.json")


def save_kernels(dataset: KernelDataset, path) -> None:
    path = Path(path)
    n, h, w = dataset.kernels.shape
    payload = (KERNEL_HEADER.pack(KERNEL_MAGIC, KERNEL_VERSION, n, h, w) + KERNEL_DIMS_TAIL.pack(0)
               + dataset.kernels.astype("<f4").tobytes())
    _atomic_write(path, payload)
    _atomic_write(meta_path(path), json.dumps(dataset.meta, indent=2, sort_keys=True).encode())


def load_kernels(path) -> KernelDataset:
    path = Path(path)
    raw = path.read_bytes()
    head = KERNEL_HEADER.size + KERNEL_DIMS_TAIL.size
    if len(raw) < head:
        raise FormatError(path, "truncated header")
    magic, version, n, h, w = KERNEL_HEADER.unpack_from(raw)
    if magic != KERNEL_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}")
    if version != KERNEL_VERSION:
        raise FormatError(path, f"unsupported version {version}")
    expected = head + n * h * w * 4
    if len(raw) != expected:
        raise FormatError(path, f"size {len(raw)} does not match header ({expected} bytes)")
    kernels = np.frombuffer(raw, dtype="<f4", offset=head).reshape(n, h, w).astype(np.float32)
    mp = meta_path(path)
    meta = json.loads(mp.read_text()) if mp.exists() else {}
    try:
        return KernelDataset(kernels, meta)
    except ValueError as exc:
        raise FormatError(path, str(exc)) from None


# -- checkpoints -------------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Named f32 arrays plus JSON metadata; ``state/``-prefixed blobs hold optimizer state."""

    blobs: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(ckpt.blobs))]
    for name, arr in ckpt.blobs.items():
        arr = np.asarray(arr, dtype="<f4")  # keeps rank-0 blobs rank-0
        nb = name.encode()
        if len(nb) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"checkpoint blob {name!r} name or rank too large")
        parts.append(struct.pack(f"<H{len(nb)}sB{arr.ndim}I", len(nb), nb, arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


def decode_checkpoint(raw: bytes, path="<bytes>") -> Checkpoint:
    def take(fmt, off):
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise FormatError(path, f"truncated at byte {off}")
        return struct.unpack_from(fmt, raw, off), off + size

    (magic, version, count), off = take("<4sII", 0)
    if magic != CKPT_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(path, f"unsupported version {version}")
    blobs = {}
    for _ in range(count):
        (nlen,), off = take("<H", off)
        (name,), off = take(f"<{nlen}s", off)
        (rank,), off = take("<B", off)
        dims, off = take(f"<{rank}I", off)
        size = int(np.prod(dims)) * 4
        if off + size > len(raw):
            raise FormatError(path, f"truncated blob {name.decode(errors='replace')!r}")
        blobs[name.decode()] = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=off).reshape(dims).astype(np.float32)
        off += size
    (mlen,), off = take("<I", off)
    if off + mlen != len(raw):
        raise FormatError(path, "metadata length does not match file size")
    try:
        meta = json.loads(raw[off:off + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(path, f"bad metadata: {exc}") from None
    return Checkpoint(blobs, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    _atomic_write(Path(path), encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), path)


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "layers": [vars(l) for l in spec.layers],
        "input_shape": list(spec.input_shape),
        "width_scale": spec.width_scale,
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(tuple(LayerSpec(**l) for l in d["layers"]), tuple(d["input_shape"]), d["width_scale"])


def network_checkpoint(model: Network, **meta) -> Checkpoint:
    return Checkpoint(model.state_dict(), {"kind": "network", "mode": model.mode,
                                           "spec": spec_to_dict(model.spec), **meta})


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    if ckpt.meta.get("kind") != "network":
        raise ValueError(f"checkpoint holds a {ckpt.meta.get('kind')!r}, not a network")
    model = build_network(spec_from_dict(ckpt.meta["spec"]), ckpt.meta["mode"])
    model.load_state_dict(ckpt.blobs)
    return model


def vae_checkpoint(vae, **meta) -> Checkpoint:
    return Checkpoint(vae.state_dict(), {"kind": "vae", "kernel_size": vae.kernel_size, "z_dim": vae.z_dim,
                                         "shift": vae.shift, "scale": vae.scale, **meta})


def vae_from_checkpoint(ckpt: Checkpoint):
    from .vae import build_vae

    if ckpt.meta.get("kind") != "vae":
        raise ValueError(f"checkpoint holds a {ckpt.meta.get('kind')!r}, not a vae")
    vae = build_vae(ckpt.meta["kernel_size"], ckpt.meta["z_dim"])
    vae.load_state_dict(ckpt.blobs)
    vae.shift, vae.scale = ckpt.meta["shift"], ckpt.meta["scale"]
    return vae
