"""Image and mask files, synthetic data, checkpoints and metrics CSV.

Checkpoint layout (all integers little-endian)::

    b"DWN1" | version: u32 | header length: u32 | header (UTF-8 JSON) | payload

The header holds the model config and a manifest of every tensor (name,
shape, dtype, offset, nbytes) plus the payload size and CRC32. The payload is
the raw tensors in manifest order.
"""
import csv
from dataclasses import dataclass, field
import json
import os
import struct
import zlib

import numpy as np

from .errors import ConfigurationError, FormatError
from .models import model_from_config

MAGIC = b"DWN1"
VERSION = 1
_PAYLOAD_DTYPE = "<f8"


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    images: list
    masks: list
    names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.names:
            self.names = [f"sample_{i:05d}" for i in range(len(self.images))]
        if not len(self.images) == len(self.masks) == len(self.names):
            raise ConfigurationError("images, masks and names must have equal lengths")
        for name, img, mask in zip(self.names, self.images, self.masks):
            if img.shape[:2] != mask.shape[:2]:
                raise ConfigurationError(f"{name}: image {img.shape} and mask {mask.shape} differ")

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        return Dataset([self.images[i] for i in idx], [self.masks[i] for i in idx],
                       [self.names[i] for i in idx])


def _sample_mask(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        kind = rng.integers(3)
        if kind == 0:
            r = rng.uniform(0.1, 0.25) * size
            mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif kind == 1:
            hy, hx = rng.uniform(0.08, 0.22, size=2) * size
            mask |= (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        else:
            # star-shaped blob with a smooth low-order radial profile
            r0 = rng.uniform(0.12, 0.25) * size
            theta = np.arctan2(yy - cy, xx - cx)
            radius = np.ones_like(theta)
            for k in (2, 3, 4):
                radius += rng.uniform(0.0, 0.25 / k * 2) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
            mask |= np.hypot(yy - cy, xx - cx) <= r0 * radius
    return mask


def synth_sample(seed, index, size=64, noise_sd=0.1, contrast=(0.25, 0.75)):
    """One (image, mask) pair, a pure function of (seed, index, parameters)."""
    rng = np.random.default_rng([seed, index])
    mask = _sample_mask(rng, size).astype(np.float64)
    low, high = contrast
    img = np.where(mask > 0, float(high), float(low))
    if noise_sd > 0:
        img = img + rng.normal(0.0, noise_sd, size=img.shape)
    return np.clip(img, 0.0, 1.0)[..., None], mask[..., None]


def synth_dataset(seed, n, size=64, noise_sd=0.1, contrast=(0.25, 0.75)):
    if size < 16 or size % 16:
        raise ConfigurationError(f"size must be a positive multiple of 16, got {size}")
    low, high = contrast
    if not 0 <= low < high <= 1:
        raise ConfigurationError(f"contrast must satisfy 0 <= low < high <= 1, got {contrast}")
    if noise_sd < 0 or n < 0:
        raise ConfigurationError("noise_sd and n must be non-negative")
    images, masks = [], []
    for i in range(n):
        img, mask = synth_sample(seed, i, size, noise_sd, contrast)
        images.append(img)
        masks.append(mask)
    return Dataset(images, masks, [f"sample_{i:05d}" for i in range(n)])


def disk_image(size=128, radius=None, contrast=(0.25, 0.75), noise_sd=0.0, seed=0):
    """A centred disk on a flat background; returns (image, mask)."""
    radius = size / 4 if radius is None else radius
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = ((yy - size / 2) ** 2 + (xx - size / 2) ** 2 <= radius ** 2).astype(np.float64)
    img = np.where(mask > 0, float(contrast[1]), float(contrast[0]))
    if noise_sd > 0:
        img = img + np.random.default_rng(seed).normal(0.0, noise_sd, size=img.shape)
    return np.clip(img, 0.0, 1.0)[..., None], mask[..., None]


def save_dataset_dir(data, directory, meta=None):
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name, img, mask in zip(data.names, data.images, data.masks):
        image_file, mask_file = f"{name}_image.pgm", f"{name}_mask.pgm"
        save_image(img, os.path.join(directory, image_file))
        save_image(mask, os.path.join(directory, mask_file))
        entries.append({"name": name, "image": image_file, "mask": mask_file})
    manifest = {"samples": entries, "generator": meta or {}}
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset_dir(directory):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"no manifest.json in {directory}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    images, masks, names = [], [], []
    for entry in manifest["samples"]:
        images.append(load_image(os.path.join(directory, entry["image"])))
        masks.append((load_image(os.path.join(directory, entry["mask"]))[..., :1] >= 0.5)
                     .astype(np.float64))
        names.append(entry["name"])
    return Dataset(images, masks, names)


# ---------------------------------------------------------------- netpbm

def _read_token(data, pos):
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"unexpected end of header at byte {start}")
    return data[start:pos], start, pos


def decode_netpbm(data, source="<bytes>"):
    magic, _, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{source}: unsupported magic {magic!r} at byte 0 (need P5 or P6)")
    channels = 1 if magic == b"P5" else 3
    values = []
    for label in ("width", "height", "maxval"):
        tok, start, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise FormatError(f"{source}: bad {label} {tok!r} at byte {start}")
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"{source}: unsupported maxval {maxval} at byte {start} (only 8-bit 255)")
    if width < 1 or height < 1:
        raise FormatError(f"{source}: empty image {width}x{height}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"{source}: missing whitespace after header at byte {pos}")
    pos += 1
    need = width * height * channels
    if len(data) - pos < need:
        raise FormatError(f"{source}: truncated payload at byte {len(data)}: "
                          f"expected {need} bytes from byte {pos}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(height, width, channels).astype(np.float64) / 255.0


def load_image(path):
    with open(path, "rb") as fh:
        return decode_netpbm(fh.read(), path)


def quantize(field):
    """Round-half-up to 8 bits after clamping to [0, 1]."""
    return np.floor(np.clip(np.asarray(field, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_netpbm(field):
    f = np.asarray(field, dtype=np.float64)
    if f.ndim == 2:
        f = f[..., None]
    if f.ndim != 3 or f.shape[-1] not in (1, 3):
        raise ConfigurationError(f"can only write 1- or 3-channel fields, got shape {f.shape}")
    h, w, c = f.shape
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + quantize(f).tobytes()


def save_image(field, path):
    with open(path, "wb") as fh:
        fh.write(encode_netpbm(field))


# ---------------------------------------------------------------- checkpoints

def encode_checkpoint(model):
    tensors = model.named_tensors()
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=_PAYLOAD_DTYPE).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": _PAYLOAD_DTYPE,
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"config": model.config_dict(), "tensors": manifest,
              "payload_bytes": len(payload), "payload_crc32": zlib.crc32(payload)}
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(text)) + text + payload


def decode_checkpoint(data, source="<bytes>"):
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError(f"{source}: not a DWN1 checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt header: {exc}") from None
    payload = data[12 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise FormatError(f"{source}: payload is {len(payload)} bytes, "
                          f"header declares {header['payload_bytes']}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise FormatError(f"{source}: payload CRC32 mismatch")
    model = model_from_config(header["config"])
    tensors = model.named_tensors()
    listed = [t["name"] for t in header["tensors"]]
    if listed != list(tensors):
        raise FormatError(f"{source}: tensor manifest does not match the model layout")
    for entry in header["tensors"]:
        target = tensors[entry["name"]]
        if tuple(entry["shape"]) != target.shape:
            raise FormatError(f"{source}: tensor {entry['name']} has shape {entry['shape']}, "
                              f"expected {list(target.shape)}")
        arr = np.frombuffer(payload, dtype=entry["dtype"], count=target.size, offset=entry["offset"])
        target[...] = arr.reshape(target.shape)
    return model


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), path)


def checkpoint_header(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a DWN1 checkpoint (bad magic)")
    _, hlen = struct.unpack_from("<II", data, 4)
    return json.loads(data[12:12 + hlen].decode("utf-8"))


# ---------------------------------------------------------------- CSV

METRICS_COLUMNS = ("epoch", "mean_loss", "accuracy_pct", "dice", "wall_seconds")
ENERGY_COLUMNS = ("step", "region_term", "gl_gradient_term", "double_well_term", "total")


def _fmt(x):
    return f"{x:.6g}"


def write_metrics_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in records:
            w.writerow([str(int(r.epoch)), _fmt(r.mean_loss), _fmt(r.accuracy_pct), _fmt(r.dice),
                        _fmt(r.wall_seconds)])


def read_metrics_csv(path):
    from .training import MetricsRecord

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(int(r["epoch"]), float(r["mean_loss"]), float(r["accuracy_pct"]),
                          float(r["dice"]), float(r["wall_seconds"])) for r in rows]


def write_energy_csv(trace, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENERGY_COLUMNS)
        for step, e in enumerate(trace):
            w.writerow([str(step), _fmt(e.region_term), _fmt(e.gl_gradient_term),
                        _fmt(e.double_well_term), _fmt(e.total)])
