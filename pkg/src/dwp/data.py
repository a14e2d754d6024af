"""Labeled image datasets: IDX ingestion and a synthetic stroke-glyph generator.

The generator draws an "alphabet" of class templates, each a few straight
strokes in the unit square, from an alphabet seed. Samples apply a random
affine jitter, stroke thickness and pixel noise to their class template.
Two alphabet seeds give two related but disjoint domains, which stand in
for a source domain (where prior kernels are learned) and a target domain.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .rng import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.classes)

    def balanced_subset(self, n: int, rng: np.random.Generator) -> "LabeledDataset":
        """``n`` examples with class counts as equal as possible, in shuffled order."""
        if n > len(self):
            raise ValueError(f"requested {n} examples from a dataset of {len(self)}")
        per_class = [rng.permutation(np.flatnonzero(self.labels == c)) for c in range(self.classes)]
        take, c = [], 0
        cursor = [0] * self.classes
        while len(take) < n:
            if cursor[c] < len(per_class[c]):
                take.append(per_class[c][cursor[c]])
                cursor[c] += 1
            c = (c + 1) % self.classes
        return self.subset(rng.permutation(np.asarray(take)))


# -- IDX ---------------------------------------------------------------------------------

def resolve_path(path) -> Path:
    """Return ``path`` if it exists, else try it relative to ``$DWP_DATA_DIR``."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    root = os.environ.get("DWP_DATA_DIR")
    if root and (Path(root) / p).exists():
        return Path(root) / p
    return p


def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise FileNotFoundError(f"no such data file: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(path, "truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(path, f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise FormatError(path, f"truncated payload: {len(raw) - header} of {count} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, classes: int = 10) -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzipped); pixels are scaled by 1/255."""
    images = _parse_idx(resolve_path(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(resolve_path(labels_path), IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError(labels_path, f"{len(images)} images but {len(labels)} labels")
    return LabeledDataset(images.astype(np.float32) / 255.0, labels.astype(np.int64), classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels ``(N,)`` in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# -- synthetic glyphs -------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n: int = 5000
    classes: int = 10
    alphabet: int = 0  # alphabet seed; different values give disjoint glyph sets
    size: int = 28
    strokes: tuple[int, int] = (2, 4)
    thickness: tuple[float, float] = (0.9, 1.8)
    max_rotation: float = 0.3  # radians
    max_shift: float = 2.5  # pixels
    scale: tuple[float, float] = (0.85, 1.1)
    noise: float = 0.15
    wobble: float = 0.1  # per-sample std of stroke endpoint displacement


def make_alphabet(spec: SynthSpec) -> list[np.ndarray]:
    """Class templates: per class an array of stroke segments ``(S, 2, 2)`` in [-1, 1] coordinates."""
    rng = stream(spec.alphabet, "synth", "alphabet")
    glyphs = []
    for _ in range(spec.classes):
        s = int(rng.integers(spec.strokes[0], spec.strokes[1] + 1))
        segs = []
        for i in range(s):
            # strokes continue from the previous endpoint half the time, giving connected shapes
            a = segs[-1][1] if i and rng.random() < 0.5 else rng.uniform(-0.7, 0.7, size=2)
            angle = rng.uniform(0, 2 * np.pi)
            length = rng.uniform(0.6, 1.3)
            b = np.clip(a + length * np.array([np.cos(angle), np.sin(angle)]), -0.85, 0.85)
            if np.hypot(*(b - a)) < 0.5:  # clipped into a dot; point it back inward
                b = np.clip(a - length * np.array([np.cos(angle), np.sin(angle)]), -0.85, 0.85)
            segs.append((a, b))
        glyphs.append(np.array(segs))
    return glyphs


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points ``px (P, 2)`` to segments ``a, b (N, S, 2)``; returns ``(N, S, P)``."""
    ab = b - a
    ap = px[None, None, :, :] - a[:, :, None, :]
    denom = np.maximum((ab ** 2).sum(-1), 1e-12)[:, :, None]
    t = np.clip((ap * ab[:, :, None, :]).sum(-1) / denom, 0.0, 1.0)
    closest = a[:, :, None, :] + t[..., None] * ab[:, :, None, :]
    return np.sqrt(((px[None, None] - closest) ** 2).sum(-1))


def synth_dataset(spec: SynthSpec, seed: int, chunk: int = 1000) -> LabeledDataset:
    """Render ``spec.n`` jittered noisy glyphs with uniformly distributed classes."""
    if spec.classes < 2:
        raise ValueError("synth_dataset: need at least 2 classes")
    glyphs = make_alphabet(spec)
    rng = stream(seed, "synth", "samples", spec.alphabet)
    labels = rng.permutation(np.arange(spec.n) % spec.classes)
    half = (spec.size - 1) / 2.0
    grid = np.stack(np.meshgrid(np.arange(spec.size), np.arange(spec.size), indexing="xy"), -1)
    px = (grid.reshape(-1, 2) - half) / half * 1.1  # pixel centers in glyph coordinates
    smax = max(len(g) for g in glyphs)
    images = np.empty((spec.n, spec.size * spec.size), dtype=np.float32)
    for start in range(0, spec.n, chunk):
        lab = labels[start:start + chunk]
        m = len(lab)
        seg = np.zeros((m, smax, 2, 2))
        valid = np.zeros((m, smax), dtype=bool)
        for i, c in enumerate(lab):
            g = glyphs[c]
            seg[i, :len(g)] = g
            valid[i, :len(g)] = True
        seg = seg + spec.wobble * rng.standard_normal(seg.shape)
        rot = rng.uniform(-spec.max_rotation, spec.max_rotation, m)
        sc = rng.uniform(*spec.scale, size=m)
        shear = rng.uniform(-0.15, 0.15, m)
        shift = rng.uniform(-spec.max_shift, spec.max_shift, size=(m, 2)) / half * 1.1
        cos, sin = np.cos(rot), np.sin(rot)
        mat = np.stack([np.stack([cos, -sin + shear], -1), np.stack([sin, cos], -1)], -2) * sc[:, None, None]
        seg = np.einsum("nij,nspj->nspi", mat, seg) + shift[:, None, None, :]
        d = _segment_distance(px, seg[:, :, 0], seg[:, :, 1])
        d = np.where(valid[:, :, None], d, np.inf).min(axis=1) * half / 1.1  # back to pixels
        thick = rng.uniform(*spec.thickness, size=(m, 1))
        ink = np.clip(thick + 0.5 - d, 0.0, 1.0)
        ink = ink + spec.noise * rng.standard_normal(ink.shape)
        images[start:start + m] = np.clip(ink, 0.0, 1.0)
    return LabeledDataset(images.reshape(spec.n, 1, spec.size, spec.size), labels, spec.classes)


def synth_splits(alphabet: int, n_train: int, n_test: int, seed: int, **kwargs) -> tuple[LabeledDataset, LabeledDataset]:
    """Independent train and test draws from the same alphabet."""
    train = synth_dataset(SynthSpec(n=n_train, alphabet=alphabet, **kwargs), seed)
    test = synth_dataset(SynthSpec(n=n_test, alphabet=alphabet, **kwargs), seed + 1_000_003)
    return train, test
