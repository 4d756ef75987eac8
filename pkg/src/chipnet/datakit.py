"""Datasets, deterministic batching, checkpoint and mask files."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .budgets import NetworkShape, all_budgets

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CHECKPOINT_MAGIC = b"CHIPNETCKPT\x00"
CHECKPOINT_VERSION = 1
MASK_FORMAT = "chipnet-mask"
MASK_VERSION = 1


class ParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


class CheckpointError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N,C,H,W] float32, normalized
    labels: np.ndarray  # [N] int64
    num_classes: int
    mean: np.ndarray  # per-channel statistics used for normalization
    std: np.ndarray
    split: str = "all"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def raw(self) -> np.ndarray:
        return self.images * _bcast(self.std, self.images) + _bcast(self.mean, self.images)

    def subset(self, index, split: str) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes, self.mean, self.std, split)

    def renormalized(self, mean: np.ndarray, std: np.ndarray) -> "Dataset":
        raw = self.raw()
        images = ((raw - _bcast(mean, raw)) / _bcast(std, raw)).astype(np.float32)
        return Dataset(images, self.labels, self.num_classes, np.asarray(mean, np.float32), np.asarray(std, np.float32), self.split)


def _bcast(v, like):
    return np.asarray(v, dtype=np.float32).reshape((1, -1) + (1,) * (like.ndim - 2))


def channel_stats(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axes = (0,) + tuple(range(2, raw.ndim))
    mean = raw.mean(axis=axes, dtype=np.float64)
    std = raw.std(axis=axes, dtype=np.float64)
    std = np.where(std > 1e-8, std, 1.0)
    return mean.astype(np.float32), std.astype(np.float32)


def _normalized(raw: np.ndarray, labels, num_classes, stats, split="all") -> Dataset:
    mean, std = stats if stats is not None else channel_stats(raw)
    mean, std = np.asarray(mean, np.float32).reshape(-1), np.asarray(std, np.float32).reshape(-1)
    images = ((raw - _bcast(mean, raw)) / _bcast(std, raw)).astype(np.float32)
    return Dataset(images, np.asarray(labels, dtype=np.int64), num_classes, mean, std, split)


def dataset_from_arrays(images, labels, num_classes: int | None = None, stats=None, split: str = "all") -> Dataset:
    """Wrap raw ``[N,C,H,W]`` (or ``[N,D]``) images and integer labels, normalizing per channel."""
    raw = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if raw.ndim not in (2, 4):
        raise ValueError(f"images must be [N,D] or [N,C,H,W], got shape {raw.shape}")
    num_classes = int(num_classes if num_classes is not None else (labels.max() + 1 if labels.size else 0))
    return _normalized(raw, labels, num_classes, stats, split)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_header(buf: bytes, magic: int, ndim: int, what: str) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise ParseError(f"{what}: header truncated, need {need} bytes, have {len(buf)}", len(buf))
    found = struct.unpack_from(">I", buf, 0)[0]
    if found != magic:
        raise ParseError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    return struct.unpack_from(">" + "I" * ndim, buf, 4)


def load_idx(images_path, labels_path, stats=None, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (unsigned bytes), scale to [0,1] and normalize.

    ``stats`` is an optional (mean, std) pair; by default the file's own
    per-channel statistics are used (std floored to 1 when constant).
    """
    ibuf = Path(images_path).read_bytes()
    lbuf = Path(labels_path).read_bytes()
    n, rows, cols = _read_header(ibuf, IDX_IMAGES_MAGIC, 3, "image file")
    expected = 16 + n * rows * cols
    if len(ibuf) != expected:
        raise ParseError(f"image file: payload size mismatch, expected {expected} bytes total, found {len(ibuf)}",
                         min(len(ibuf), expected))
    (m,) = _read_header(lbuf, IDX_LABELS_MAGIC, 1, "label file")
    if m != n:
        raise ParseError(f"label file holds {m} labels but image file holds {n} images", 4)
    if len(lbuf) != 8 + m:
        raise ParseError(f"label file: payload size mismatch, expected {8 + m} bytes total, found {len(lbuf)}",
                         min(len(lbuf), 8 + m))
    pixels = np.frombuffer(ibuf, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if m else 1)
    return _normalized(pixels.astype(np.float32) / 255.0, labels, max(k, 2), stats)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images [N,H,W] and labels [N] as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def synth_blobs(
    classes: int = 10,
    samples_per_class: int = 60,
    image_size: int = 16,
    noise_sigma: float = 0.1,
    seed: int = 0,
    channels: int = 1,
    stats=None,
) -> Dataset:
    """Gaussian bump at a class-specific location plus i.i.d. pixel noise.

    Bump locations are drawn without replacement from a grid of candidate
    centers, so classes never share a pattern.
    """
    if classes < 2:
        raise ValueError("synth_blobs needs at least 2 classes")
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.2, 0.8, 5) * (image_size - 1)
    centers = np.array([(a, b) for a in grid for b in grid])
    if classes > len(centers):
        raise ValueError(f"synth_blobs supports at most {len(centers)} classes")
    centers = centers[rng.choice(len(centers), size=classes, replace=False)]
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    width = image_size / 8.0
    patterns = np.exp(-((yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2)
                      / (2 * width ** 2))
    labels = np.repeat(np.arange(classes), samples_per_class)
    raw = np.repeat(patterns[labels][:, None], channels, axis=1)
    raw = raw + noise_sigma * rng.standard_normal(raw.shape)
    return _normalized(raw.astype(np.float32), labels, classes, stats)


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------


@dataclass
class DataSplit:
    train: Dataset
    val: Dataset
    batch_size: int
    seed: int

    def _bounds(self, n: int) -> list[tuple[int, int]]:
        starts = list(range(0, n, self.batch_size))
        bounds = [(s, min(s + self.batch_size, n)) for s in starts]
        # a trailing single sample cannot be batch-normalized; fold it into the previous batch
        if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
            bounds[-2] = (bounds[-2][0], n)
            bounds.pop()
        return bounds

    def train_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch, 1]).permutation(len(self.train))

    def train_batches(self, epoch: int):
        order = self.train_order(epoch)
        for a, b in self._bounds(len(order)):
            idx = order[a:b]
            yield self.train.images[idx], self.train.labels[idx]

    def val_batches(self):
        for a, b in self._bounds(len(self.val)):
            yield self.val.images[a:b], self.val.labels[a:b]


def split_and_batch(ds: Dataset, val_fraction: float = 0.2, batch_size: int = 32, seed: int = 0,
                    renormalize: bool = True) -> DataSplit:
    """Seeded disjoint train/val split; normalization statistics come from the train part."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    perm = np.random.default_rng([seed, 0]).permutation(len(ds))
    n_val = int(round(val_fraction * len(ds)))
    if n_val == 0 or n_val == len(ds):
        raise ValueError(f"val_fraction {val_fraction} leaves an empty split of {len(ds)} samples")
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    if batch_size > min(len(train_idx), len(val_idx)):
        raise ValueError(f"batch_size {batch_size} exceeds split sizes {len(train_idx)}/{len(val_idx)}")
    train, val = ds.subset(train_idx, "train"), ds.subset(val_idx, "val")
    if renormalize:
        mean, std = channel_stats(train.raw())
        train, val = train.renormalized(mean, std), val.renormalized(mean, std)
    return DataSplit(train, val, batch_size, seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict = field(default_factory=dict)
    shape: NetworkShape | None = None
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    continuation: dict = field(default_factory=dict)
    best: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def header(self) -> dict:
        return {
            "version": self.version,
            "config": self.config,
            "shape": self.shape.to_dict() if self.shape is not None else None,
            "continuation": self.continuation,
            "best": self.best,
            "meta": self.meta,
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if json.dumps(self.header(), sort_keys=True) != json.dumps(other.header(), sort_keys=True):
            return False
        if self.arrays.keys() != other.arrays.keys():
            return False
        return all(a.shape == other.arrays[k].shape and a.astype("<f4").tobytes() == other.arrays[k].astype("<f4").tobytes()
                   for k, a in self.arrays.items())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write magic, u64 header length, UTF-8 JSON header, then raw little-endian float32 arrays."""
    directory, blobs, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "dtype": "<f4", "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = ckpt.header()
    header["arrays"] = directory
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    if len(buf) < pos + 8:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if len(buf) < pos + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    pos += hlen
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('version')} != supported {CHECKPOINT_VERSION}")
    payload = memoryview(buf)[pos:]
    arrays = {}
    expected_end = 0
    for entry in header.get("arrays", []):
        try:
            shape, off, nbytes = tuple(entry["shape"]), int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: corrupt array directory entry {entry!r}") from exc
        if entry.get("dtype") != "<f4" or nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: array {entry.get('name')} directory size does not match its shape")
        if off + nbytes > len(payload):
            raise CheckpointError(f"{path}: size mismatch, array {entry['name']} needs bytes {off}..{off + nbytes} "
                                  f"but payload has {len(payload)}")
        arrays[entry["name"]] = np.frombuffer(payload[off:off + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
        expected_end = max(expected_end, off + nbytes)
    if expected_end != len(payload):
        raise CheckpointError(f"{path}: size mismatch, payload has {len(payload)} bytes, directory covers {expected_end}")
    return Checkpoint(
        config=header.get("config") or {},
        shape=NetworkShape.from_dict(header["shape"]) if header.get("shape") else None,
        arrays=arrays,
        continuation=header.get("continuation") or {},
        best=header.get("best") or {},
        meta=header.get("meta") or {},
        version=header["version"],
    )


# ---------------------------------------------------------------------------
# mask files
# ---------------------------------------------------------------------------


@dataclass
class MaskFile:
    bits: list[np.ndarray]
    shape: NetworkShape
    fingerprint: str
    budgets: dict[str, float]


def export_mask(ckpt: Checkpoint, path) -> dict:
    """Write the checkpoint's selected hard mask as a JSON document."""
    if "mask" not in ckpt.arrays or ckpt.shape is None:
        raise CheckpointError("checkpoint has no selected hard mask")
    return write_mask(ckpt.arrays["mask"], ckpt.shape, path)


def write_mask(bits, shape: NetworkShape, path) -> dict:
    flat = np.asarray(bits).reshape(-1).astype(np.uint8)
    if flat.size != shape.mask_count:
        raise ValueError(f"mask has {flat.size} bits, shape has {shape.mask_count} prunable channels")
    layers, off = [], 0
    for l in shape.prunable_layers:
        piece = flat[off:off + l.channels]
        layers.append({"index": l.index, "name": l.name, "channels": l.channels, "kept": int(piece.sum()),
                       "bits": "".join(str(int(b)) for b in piece)})
        off += l.channels
    doc = {
        "format": MASK_FORMAT,
        "version": MASK_VERSION,
        "fingerprint": shape.fingerprint(),
        "shape": shape.to_dict(),
        "layers": layers,
        "budgets": all_budgets(flat.astype(np.float64), shape),
    }
    Path(path).write_text(json.dumps(doc, indent=2))
    return doc


def import_mask(path, expected: NetworkShape | None = None) -> MaskFile:
    """Read a mask file, recomputing its budgets from the bits.

    With ``expected`` given, the stored fingerprint must match it.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"mask file is not valid JSON: {exc.msg}", exc.pos) from exc
    if doc.get("format") != MASK_FORMAT or doc.get("version") != MASK_VERSION:
        raise ParseError(f"unsupported mask file format {doc.get('format')!r} v{doc.get('version')}")
    shape = NetworkShape.from_dict(doc["shape"])
    if shape.fingerprint() != doc["fingerprint"]:
        raise ParseError("mask file fingerprint does not match its own shape table")
    if expected is not None and expected.fingerprint() != doc["fingerprint"]:
        raise ValueError(f"mask fingerprint {doc['fingerprint']} does not match network {expected.fingerprint()}")
    if len(doc["layers"]) != len(shape.prunable_layers):
        raise ParseError(f"mask file lists {len(doc['layers'])} layers, shape has {len(shape.prunable_layers)}")
    bits = []
    for entry, l in zip(doc["layers"], shape.prunable_layers):
        text = str(entry["bits"])
        if len(text) != l.channels or set(text) - {"0", "1"}:
            raise ParseError(f"layer {l.index}: bit string must hold {l.channels} 0/1 characters")
        bits.append(np.frombuffer(text.encode(), dtype=np.uint8) - ord("0"))
    flat = np.concatenate(bits) if bits else np.zeros(0, np.uint8)
    return MaskFile(bits, shape, doc["fingerprint"], all_budgets(flat.astype(np.float64), shape))
