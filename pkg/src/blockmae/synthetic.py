"""Procedural labeled scenes for desk-scale experiments.

Each scene is a gradient background with one foreground figure drawn on it.
The figure kind is the classification label, and every scene carries a
strictly positive depth map (background plane far, figure near) so the same
corpus serves classification, depth-probe, and reconstruction demos.
"""

from pathlib import Path

import numpy as np

SHAPE_CLASSES = ("disk", "square", "stripes", "cross")


def _gradient_background(rng, size):
    c0 = rng.uniform(40, 215, size=3)
    c1 = rng.uniform(40, 215, size=3)
    axis = rng.integers(0, 3)  # vertical, horizontal, or diagonal ramp
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / (size - 1)
    ramp = {0: yy, 1: xx, 2: (yy + xx) / 2.0}[axis]
    return c0[None, None, :] + ramp[:, :, None] * (c1 - c0)[None, None, :]


def _figure_mask(rng, kind, size):
    """Boolean [S, S] footprint of the foreground figure."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    cy = rng.uniform(0.30, 0.70) * size
    cx = rng.uniform(0.30, 0.70) * size
    r = rng.uniform(0.14, 0.26) * size
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if kind == "stripes":
        period = max(4.0, rng.uniform(0.09, 0.16) * size)
        band = (np.abs(yy - cy) <= 1.6 * r) & (np.abs(xx - cx) <= 1.6 * r)
        phase = rng.uniform(0, period)
        return band & (((xx + phase) % period) < period / 2)
    if kind == "cross":
        arm = max(2.0, 0.36 * r)
        vert = (np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= 1.5 * r)
        horz = (np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= 1.5 * r)
        return vert | horz
    raise ValueError(f"unknown figure kind {kind!r}")


def make_scene(rng, size=64, label=None, noise_std=4.0):
    """Returns (image uint8 [S, S, 3], label int, depth float32 [S, S]).

    noise_std=0 renders a clean scene. With noise, near-flat patches
    normalize to unpredictable values, putting a floor under the masked
    reconstruction loss; clean scenes can be memorized to ~zero.
    """
    if label is None:
        label = int(rng.integers(0, len(SHAPE_CLASSES)))
    bg = _gradient_background(rng, size)
    mask = _figure_mask(rng, SHAPE_CLASSES[label], size)

    fig_color = rng.uniform(25, 230, size=3)
    img = bg.copy()
    img[mask] = fig_color
    if noise_std > 0:
        img += rng.normal(0.0, noise_std, size=img.shape)  # sensor-style noise
    img = np.clip(img, 0, 255).astype(np.uint8)

    depth = np.full((size, size), rng.uniform(3.0, 5.0), dtype=np.float32)
    yy = np.mgrid[0:size, 0:size][0].astype(np.float32) / (size - 1)
    depth += yy * rng.uniform(0.0, 1.5)  # background recedes downward
    depth[mask] = rng.uniform(0.8, 1.8)
    return img, label, depth


def make_dataset(rng, n, size=64, balanced=True):
    """n scenes; labels cycle through the classes when balanced."""
    images, labels, depths = [], [], []
    for i in range(n):
        label = i % len(SHAPE_CLASSES) if balanced else None
        img, lab, dep = make_scene(rng, size=size, label=label)
        images.append(img)
        labels.append(lab)
        depths.append(dep)
    return images, np.array(labels, dtype=np.int64), np.stack(depths)


def make_flat(rng, size=64):
    """Single-color image; near-zero reconstruction difficulty and entropy."""
    color = rng.integers(0, 256, size=3, dtype=np.uint8)
    return np.broadcast_to(color, (size, size, 3)).copy()


def make_noise(rng, size=64):
    """Uniform pixel noise; maximal color entropy."""
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def write_labels(path, ids, labels):
    """`source_id<TAB>label` per line, in the given order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for sid, lab in zip(ids, labels):
            f.write(f"{sid}\t{int(lab)}\n")
    return path


def read_labels(path):
    ids, labels = [], []
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        sid, lab = line.split("\t")
        ids.append(sid)
        labels.append(int(lab))
    return ids, np.array(labels, dtype=np.int64)


def write_depths(path, depths):
    """Depth maps as a [n, S, S] float32 .npy aligned with the corpus order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(depths, dtype=np.float32))
    return path
