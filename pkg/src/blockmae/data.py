"""Corpus ingestion, cropping augmentation, and patch tokenization.

Images travel as uint8 [H, W, 3] arrays until augmentation, which hands the
trainer float32 [3, S, S] values in [0, 1]. Patchification flattens each
p x p patch row-major with channels fastest, so patchify/unpatchify are
exact inverses by construction.
"""

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

# packed corpus header: magic, version, height, width, count (all u32 LE)
CORPUS_MAGIC = b"BIMC"
CORPUS_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


class CorpusError(ValueError):
    pass


@dataclass
class AugmentConfig:
    output_size: int = 64
    scale_range: tuple = (0.2, 1.0)
    ratio_range: tuple = (0.75, 4.0 / 3.0)
    hflip_prob: float = 0.0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi <= 1):
            raise CorpusError(f"scale_range {self.scale_range} outside (0, 1]")
        rlo, rhi = self.ratio_range
        if not (0 < rlo <= rhi):
            raise CorpusError(f"ratio_range {self.ratio_range} invalid")
        if self.output_size < 1:
            raise CorpusError("output_size must be positive")


@dataclass
class ImageBatch:
    """float32 [B, 3, S, S] pixel values in [0,1] plus per-sample provenance."""

    data: np.ndarray
    source_ids: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# corpus I/O
# ---------------------------------------------------------------------------

def write_corpus(images, path):
    """Pack fixed-size uint8 RGB images into one binary file."""
    images = list(images)
    if not images:
        raise CorpusError("refusing to write an empty corpus")
    h, w, c = images[0].shape
    if c != 3:
        raise CorpusError("corpus images must be RGB")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, h, w, len(images)))
        for img in images:
            if img.shape != (h, w, 3) or img.dtype != np.uint8:
                raise CorpusError(
                    f"all images must be uint8 [{h},{w},3], got {img.dtype} {img.shape}"
                )
            f.write(img.tobytes())
    return path


def _read_packed(path):
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise CorpusError(f"{path}: truncated header")
        magic, version, h, w, count = _HEADER.unpack(header)
        if magic != CORPUS_MAGIC:
            raise CorpusError(f"{path}: bad magic {magic!r}")
        if version != CORPUS_VERSION:
            raise CorpusError(f"{path}: unsupported version {version}")
        payload = f.read()
    expected = count * h * w * 3
    if len(payload) != expected:
        raise CorpusError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(count, h, w, 3)
    ids = [f"{Path(path).name}#{i}" for i in range(count)]
    return ids, [arr[i] for i in range(count)]


def _read_directory(path):
    path = Path(path)
    ids, images = [], []
    for item in sorted(path.iterdir()):
        if not item.is_file() or item.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        try:
            with Image.open(item) as im:
                images.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
            ids.append(item.name)
        except Exception as exc:  # unreadable file: skip, keep going
            log.warning("skipping unreadable image %s: %s", item, exc)
    return ids, images


def load_corpus_with_ids(path, fmt="auto"):
    """Decode a corpus; returns (source_ids, list of uint8 [H,W,3] images)."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus path does not exist: {path}")
    if fmt == "auto":
        fmt = "image-directory" if path.is_dir() else "packed-binary"
    if fmt == "image-directory":
        ids, images = _read_directory(path)
    elif fmt == "packed-binary":
        ids, images = _read_packed(path)
    else:
        raise CorpusError(f"unknown corpus format {fmt!r}")
    if not images:
        raise CorpusError(f"corpus at {path} contains no readable images")
    return ids, images


def load_corpus(path, fmt="auto"):
    return load_corpus_with_ids(path, fmt)[1]


def write_manifest(path, ids):
    """Newline-delimited `path<TAB>index` records for a loaded corpus."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for i, source in enumerate(ids):
            f.write(f"{source}\t{i}\n")
    return path


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def sample_crop_rect(height, width, cfg: AugmentConfig, rng):
    """Pick a crop rectangle; returns (top, left, crop_h, crop_w, used_fallback).

    Ten proposals with area fraction uniform on scale_range and aspect ratio
    log-uniform on ratio_range; if none fits, center-crop at the nearest
    in-range aspect ratio.
    """
    area = height * width
    log_lo, log_hi = np.log(cfg.ratio_range[0]), np.log(cfg.ratio_range[1])
    for _ in range(10):
        target_area = area * rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
        aspect = np.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(np.sqrt(target_area * aspect)))
        ch = int(round(np.sqrt(target_area / aspect)))
        if 0 < cw <= width and 0 < ch <= height:
            top = int(rng.integers(0, height - ch + 1))
            left = int(rng.integers(0, width - cw + 1))
            return top, left, ch, cw, False
    # fallback: clamp the whole image to the nearest allowed aspect ratio
    in_ratio = width / height
    if in_ratio < cfg.ratio_range[0]:
        cw = width
        ch = int(round(cw / cfg.ratio_range[0]))
    elif in_ratio > cfg.ratio_range[1]:
        ch = height
        cw = int(round(ch * cfg.ratio_range[1]))
    else:
        cw, ch = width, height
    top = (height - ch) // 2
    left = (width - cw) // 2
    return top, left, ch, cw, True


def resize_bilinear(img, out_h, out_w):
    """Bilinear resample with half-pixel centers and edge replication.

    img: float array [H, W, C]. Returns [out_h, out_w, C].
    """
    in_h, in_w = img.shape[:2]
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    wy = (ys - y0f).astype(img.dtype)[:, None, None]
    wx = (xs - x0f).astype(img.dtype)[None, :, None]
    y0 = np.clip(y0f.astype(np.int64), 0, in_h - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, in_h - 1)
    x0 = np.clip(x0f.astype(np.int64), 0, in_w - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, in_w - 1)
    top = img[y0[:, None], x0[None, :]] * (1 - wx) + img[y0[:, None], x1[None, :]] * wx
    bot = img[y1[:, None], x0[None, :]] * (1 - wx) + img[y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def random_resized_crop(image, cfg: AugmentConfig, rng):
    """uint8 [H, W, 3] -> float32 [3, S, S] in [0,1]."""
    h, w = image.shape[:2]
    top, left, ch, cw, _ = sample_crop_rect(h, w, cfg, rng)
    crop = image[top:top + ch, left:left + cw].astype(np.float32) / 255.0
    s = cfg.output_size
    if crop.shape[:2] != (s, s):
        crop = resize_bilinear(crop, s, s)
    if cfg.hflip_prob > 0.0 and rng.random() < cfg.hflip_prob:
        crop = crop[:, ::-1]
    return np.ascontiguousarray(crop.transpose(2, 0, 1), dtype=np.float32)


def make_batch(images, ids, indices, cfg: AugmentConfig, rng):
    """Augment the selected corpus entries into one training batch."""
    data = np.stack([random_resized_crop(images[i], cfg, rng) for i in indices])
    return ImageBatch(data=data, source_ids=[ids[i] for i in indices])


# ---------------------------------------------------------------------------
# patch tokens
# ---------------------------------------------------------------------------

def patchify(batch_data, p):
    """[B, 3, H, W] -> [B, N, p*p*3], row-major patches, channels fastest."""
    b, c, h, w = batch_data.shape
    if h % p or w % p:
        raise CorpusError(f"resolution {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = batch_data.reshape(b, c, gh, p, gw, p)
    x = x.transpose(0, 2, 4, 3, 5, 1)  # [B, gh, gw, p, p, 3]
    return np.ascontiguousarray(x.reshape(b, gh * gw, p * p * c))


def unpatchify(tokens, p, grid_h, grid_w):
    """Exact inverse of patchify."""
    b, n, d = tokens.shape
    c = d // (p * p)
    if n != grid_h * grid_w or d != p * p * c:
        raise CorpusError(f"token grid {tokens.shape} inconsistent with {grid_h}x{grid_w}, p={p}")
    x = tokens.reshape(b, grid_h, grid_w, p, p, c)
    x = x.transpose(0, 5, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(b, c, grid_h * p, grid_w * p))


def normalize_target(tokens, eps=1e-6):
    """Standardize each patch vector to mean 0 / unit variance.

    Returns (normalized, mean, var); mean/var are kept for un-normalizing
    predictions when rendering reconstructions.
    """
    mu = tokens.mean(axis=-1, keepdims=True)
    var = tokens.var(axis=-1, keepdims=True)  # population variance
    return (tokens - mu) / np.sqrt(var + eps), mu, var


def denormalize_target(tokens, mu, var, eps=1e-6):
    return tokens * np.sqrt(var + eps) + mu


def encode_png(image):
    """uint8 [H, W, 3] -> PNG bytes (for writing demo corpora)."""
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()
