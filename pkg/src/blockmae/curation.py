"""Two-stage corpus self-curation.

Every candidate image gets a reconstruction-difficulty score from a frozen
model (averaged over a few mask draws seeded by the image content, so
identical images always score identically), normalized to its percentile
rank in the pool. Curation then keeps an image iff its color-histogram
entropy clears a threshold AND its normalized loss beats a fresh uniform
draw. Both predicates are evaluated for every record, so their order never
matters and the accept bit is exactly reproducible from the manifest.
"""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import resize_bilinear
from .masking import MaskConfig, plan_from_mask, sample_block_mask
from .model import decode, encode
from .objective import masked_pixel_loss

log = logging.getLogger(__name__)

DEFAULT_ENTROPY_THRESHOLD = 3.0
DEFAULT_MASK_DRAWS = 4


class CurationError(ValueError):
    pass


@dataclass
class CurationRecord:
    source_id: str
    raw_loss: float = float("nan")
    norm_loss: float = float("nan")
    entropy_bits: float = float("nan")
    accepted: bool = False
    u_draw: float = float("nan")


def color_entropy(image):
    """Shannon entropy (bits) of per-channel 256-bin histograms, averaged.

    image: uint8 [H, W, 3]. Constant image -> 0; uniform noise -> close to 8.
    """
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise CurationError("color_entropy expects uint8 images")
    total = image.shape[0] * image.shape[1]
    bits = 0.0
    for c in range(3):
        counts = np.bincount(image[:, :, c].ravel(), minlength=256)
        p = counts[counts > 0] / total
        bits += float(-(p * np.log2(p)).sum())
    return bits / 3.0


def content_seed(image):
    """Deterministic mask seed from pixel content, so duplicates tie."""
    digest = hashlib.sha256(np.ascontiguousarray(image).tobytes()).digest()
    return int.from_bytes(digest[:8], "little")


def canonicalize(image, size):
    """Center square crop + bilinear resize to the model resolution."""
    h, w = image.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    crop = image[top:top + side, left:left + side].astype(np.float32) / 255.0
    if side != size:
        crop = resize_bilinear(crop, size, size)
    return np.ascontiguousarray(crop.transpose(2, 0, 1), dtype=np.float32)


def score_corpus(ids, images, cfg, params, mask_cfg: MaskConfig,
                 k_draws=DEFAULT_MASK_DRAWS, batch_size=64):
    """Reconstruction difficulty per image under a frozen model.

    Returns records with raw_loss filled (normalization and entropy happen
    in curate / attach_entropy). Per-image masks come from a content-derived
    seed: scoring is a pure function of the corpus and the model.
    """
    from .data import normalize_target, patchify

    if len(ids) != len(images):
        raise CurationError("ids and images differ in length")
    records = []
    for start in range(0, len(images), batch_size):
        chunk_ids = ids[start:start + batch_size]
        chunk = images[start:start + batch_size]
        batch = np.stack([canonicalize(img, cfg.input_size) for img in chunk])
        target, _, _ = normalize_target(patchify(batch, cfg.p))
        draws = []
        for img in chunk:
            rng = np.random.default_rng(content_seed(img))
            draws.append([sample_block_mask(mask_cfg, rng).mask[0] for _ in range(k_draws)])
        acc = np.zeros(len(chunk))
        for k in range(k_draws):
            plan = plan_from_mask(np.stack([d[k] for d in draws]))
            latent = encode(batch, plan, cfg, params)
            pred = decode(latent, plan, cfg, params)
            acc += masked_pixel_loss(pred, target, plan).per_sample
        for sid, loss in zip(chunk_ids, acc / k_draws):
            records.append(CurationRecord(source_id=sid, raw_loss=float(loss)))
    return records


def attach_entropy(records, ids, images):
    by_id = {sid: img for sid, img in zip(ids, images)}
    for rec in records:
        rec.entropy_bits = color_entropy(by_id[rec.source_id])
    return records


def normalize_losses(records):
    """Percentile-rank raw losses to [0,1] (empirical CDF, ties share rank).

    The pool maximum always maps to 1.0; a pool of identical losses maps
    everything to 1.0, so uniform pools are never starved by the sampler.
    """
    raw = np.array([r.raw_loss for r in records], dtype=np.float64)
    if np.isnan(raw).any():
        raise CurationError("records must be scored before normalization")
    ranks = rankdata(raw, method="max")
    norm = np.clip(ranks / len(records), 0.0, 1.0)
    for rec, v in zip(records, norm):
        rec.norm_loss = float(v)
    return records


def soft_sample(record: CurationRecord, rng):
    """Accept iff norm_loss >= u with u ~ U(0,1); u is recorded."""
    if np.isnan(record.norm_loss):
        raise CurationError(f"{record.source_id}: norm_loss not populated")
    record.u_draw = float(rng.random())
    return record.norm_loss >= record.u_draw


def curate(records, entropy_threshold=DEFAULT_ENTROPY_THRESHOLD, rng=None, seed=0):
    """Normalize losses, then keep records passing entropy AND soft sampling.

    Records are processed in sorted source_id order with one uniform draw
    each, so a fixed seed reproduces the identical decision sequence.
    Returns the accepted source_ids; records are updated in place.
    """
    if not records:
        raise CurationError("no records to curate")
    if rng is None:
        rng = np.random.default_rng(seed)
    normalize_losses(records)
    accepted = []
    n_entropy_fail = n_loss_fail = 0
    for rec in sorted(records, key=lambda r: r.source_id):
        if np.isnan(rec.entropy_bits):
            raise CurationError(f"{rec.source_id}: entropy_bits not populated")
        entropy_ok = rec.entropy_bits >= entropy_threshold
        loss_ok = soft_sample(rec, rng)
        rec.accepted = entropy_ok and loss_ok
        if not entropy_ok:
            n_entropy_fail += 1
        if not loss_ok:
            n_loss_fail += 1
        if rec.accepted:
            accepted.append(rec.source_id)
    if not accepted:
        raise CurationError(
            f"curation rejected all {len(records)} records "
            f"(entropy<{entropy_threshold}: {n_entropy_fail}, sampler: {n_loss_fail}); "
            "lower the entropy threshold or rescore"
        )
    return accepted


def write_curation_manifest(records, path):
    """`source_id<TAB>raw_loss<TAB>norm_loss<TAB>entropy_bits<TAB>accepted`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for rec in sorted(records, key=lambda r: r.source_id):
            f.write(
                f"{rec.source_id}\t{rec.raw_loss:.6f}\t{rec.norm_loss:.6f}"
                f"\t{rec.entropy_bits:.6f}\t{int(rec.accepted)}\n"
            )
    return path


def write_curation_summary(records, path, entropy_threshold):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = np.array([r.raw_loss for r in records])
    n_acc = sum(r.accepted for r in records)
    hist, edges = np.histogram(raw, bins=10)
    lines = [
        f"n_records={len(records)}",
        f"n_accepted={n_acc}",
        f"acceptance_rate={n_acc / len(records):.6f}",
        f"entropy_threshold={entropy_threshold:.6f}",
        f"raw_loss_min={raw.min():.6f}",
        f"raw_loss_mean={raw.mean():.6f}",
        f"raw_loss_max={raw.max():.6f}",
    ]
    for i, count in enumerate(hist):
        lines.append(f"loss_hist_{edges[i]:.4f}_{edges[i + 1]:.4f}={count}")
    path.write_text("\n".join(lines) + "\n")
    return path
