"""Block-granular mask sampling and visible/masked token routing.

Masks are drawn over g x g patch blocks, so every masked patch belongs to a
fully masked block. The routing ops work on [B, N, D] tensors; token-state
bundles (class + patch tokens) pass through with class tokens untouched.
"""

from dataclasses import dataclass, replace

import numpy as np

from .tensor import ContractError, Tensor, add, concat_rows, gather_rows


class MaskingError(ValueError):
    """Mask configuration is degenerate or inconsistent."""


def round_half_up(x):
    return int(np.floor(x + 0.5))


@dataclass
class MaskConfig:
    ratio: float = 0.75
    granularity: int = 4
    grid_h: int = 8
    grid_w: int = 8

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise MaskingError(f"masking ratio {self.ratio} outside (0, 1)")
        if self.granularity < 1:
            raise MaskingError("granularity must be >= 1")
        if self.grid_h % self.granularity or self.grid_w % self.granularity:
            raise MaskingError(
                f"grid {self.grid_h}x{self.grid_w} not divisible by block size {self.granularity}"
            )

    @property
    def n_patches(self):
        return self.grid_h * self.grid_w

    @property
    def n_blocks(self):
        return (self.grid_h // self.granularity) * (self.grid_w // self.granularity)

    @property
    def n_masked_blocks(self):
        return round_half_up(self.ratio * self.n_blocks)

    @property
    def n_masked(self):
        return self.n_masked_blocks * self.granularity ** 2

    @property
    def n_visible(self):
        return self.n_patches - self.n_masked


@dataclass
class MaskPlan:
    """Per-sample masks plus the permutations that route tokens.

    mask: bool [B, N], True where masked. ids_shuffle puts each sample's
    visible indices first (ascending), masked after (ascending); ids_restore
    is its inverse. n_visible is constant across the batch because the
    masked-block count is exact.
    """

    mask: np.ndarray
    ids_shuffle: np.ndarray
    ids_restore: np.ndarray
    n_visible: int

    @property
    def batch(self):
        return self.mask.shape[0]

    @property
    def n_patches(self):
        return self.mask.shape[1]

    @property
    def n_masked(self):
        return self.n_patches - self.n_visible


def plan_from_mask(mask):
    """Build routing permutations for an explicit boolean mask [B, N]."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if not (counts == counts[0]).all():
        raise MaskingError("per-sample masked counts differ; cannot batch")
    ids_shuffle = np.argsort(mask, axis=1, kind="stable")  # False sorts first
    ids_restore = np.argsort(ids_shuffle, axis=1, kind="stable")
    return MaskPlan(
        mask=mask,
        ids_shuffle=ids_shuffle.astype(np.int64),
        ids_restore=ids_restore.astype(np.int64),
        n_visible=int(mask.shape[1] - counts[0]),
    )


def sample_block_mask(cfg: MaskConfig, rng, batch=1):
    """Mask exactly round(ratio * n_blocks) blocks per sample, uniformly."""
    k = cfg.n_masked_blocks
    if k == 0 or k == cfg.n_blocks:
        raise MaskingError(
            f"ratio {cfg.ratio} on {cfg.n_blocks} blocks masks {k} of them; "
            "nothing to reconstruct or nothing visible"
        )
    g = cfg.granularity
    bh, bw = cfg.grid_h // g, cfg.grid_w // g
    block_mask = np.zeros((batch, bh * bw), dtype=bool)
    for b in range(batch):
        block_mask[b, rng.permutation(bh * bw)[:k]] = True
    patch_mask = block_mask.reshape(batch, bh, bw)
    patch_mask = np.repeat(np.repeat(patch_mask, g, axis=1), g, axis=2)
    return plan_from_mask(patch_mask.reshape(batch, cfg.n_patches))


def gather_visible(tokens, plan: MaskPlan):
    """Keep only visible patch tokens, in shuffle (visible-first) order.

    Accepts a [B, N, D] tensor, or a token-state bundle whose class tokens
    pass through untouched.
    """
    if hasattr(tokens, "patches"):
        return replace(
            tokens,
            patches=gather_visible(tokens.patches, plan),
            layout="visible-only",
        )
    if tokens.shape[0] != plan.batch or tokens.shape[1] != plan.n_patches:
        raise ContractError(
            f"token shape {tokens.shape} does not match plan "
            f"[{plan.batch}, {plan.n_patches}]"
        )
    return gather_rows(tokens, plan.ids_shuffle[:, : plan.n_visible])


def scatter_restore(visible, plan: MaskPlan, mask_token):
    """Rebuild the full-length sequence in original patch order.

    visible: Tensor [B, n_visible, D]; masked slots are filled with the
    shared mask token (gradient flows to it through every filled slot).
    """
    if hasattr(visible, "patches"):
        return replace(
            visible,
            patches=scatter_restore(visible.patches, plan, mask_token),
            layout="decoder-full",
        )
    b, n_vis, dim = visible.shape
    if b != plan.batch or n_vis != plan.n_visible:
        raise ContractError(
            f"visible tokens {visible.shape} do not match plan n_visible={plan.n_visible}"
        )
    fill = add(Tensor(np.zeros((b, plan.n_masked, dim), dtype=visible.data.dtype)), mask_token)
    shuffled = concat_rows([visible, fill])
    return gather_rows(shuffled, plan.ids_restore)
