"""ViT encoder with multiple class tokens and a deep pixel decoder.

The encoder runs on class tokens plus (optionally masked) patch tokens; the
decoder rebuilds the full patch sequence around a shared mask token and
regresses pixel values per patch. Parameters live in a flat named store so
checkpointing and the optimizer can treat them uniformly.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import patchify
from .masking import gather_visible, scatter_restore
from .tensor import (
    ContractError,
    Tensor,
    add,
    concat_rows,
    expand_batch,
    narrow_rows,
)


@dataclass
class ModelConfig:
    input_size: int = 64
    p: int = 8
    enc_dim: int = 192
    enc_depth: int = 12
    enc_heads: int = 3
    dec_dim: int = 96
    dec_depth: int = 8
    dec_heads: int = 3
    n_cls: int = 8
    drop_path_rate: float = 0.0
    cls_in_decoder: bool = True
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.input_size % self.p:
            raise ContractError(f"input {self.input_size} not divisible by patch {self.p}")
        if self.enc_dim % self.enc_heads:
            raise ContractError("encoder width not divisible by head count")
        if self.dec_dim % self.dec_heads:
            raise ContractError("decoder width not divisible by head count")
        if self.n_cls < 1:
            raise ContractError("need at least one class token")
        if self.dec_depth < 1:
            raise ContractError("decoder needs at least one block")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ContractError("drop_path_rate outside [0, 1)")

    @property
    def grid(self):
        return self.input_size // self.p

    @property
    def n_patches(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.p * self.p * 3


@dataclass
class TokenStates:
    """Class tokens [B,C,D] and patch tokens [B,M,D] after some stage."""

    cls: Tensor
    patches: Tensor
    layout: str = "full"  # full | visible-only | decoder-full

    @property
    def seq_len(self):
        return self.cls.shape[1] + self.patches.shape[1]


def trunc_normal(rng, shape, std=0.02, clip=2.0):
    """Normal(0, std) with resampling outside +/- clip*std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > clip * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > clip * std
    return out


def xavier_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ModelParams:
    """Flat name -> Tensor store; iteration order is insertion order."""

    def __init__(self):
        self._store = {}

    def add(self, name, data):
        if name in self._store:
            raise ContractError(f"duplicate parameter name {name}")
        self._store[name] = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)

    def __getitem__(self, name):
        return self._store[name]

    def __contains__(self, name):
        return name in self._store

    def names(self):
        return list(self._store)

    def items(self):
        return self._store.items()

    def n_parameters(self):
        return sum(t.size for t in self._store.values())

    def zero_grads(self):
        for t in self._store.values():
            t.zero_grad()


def _add_block(params, prefix, dim, hidden, rng):
    params.add(f"{prefix}.ln1.g", np.ones(dim))
    params.add(f"{prefix}.ln1.b", np.zeros(dim))
    params.add(f"{prefix}.attn.qkv_w", xavier_uniform(rng, dim, 3 * dim))
    params.add(f"{prefix}.attn.qkv_b", np.zeros(3 * dim))
    params.add(f"{prefix}.attn.proj_w", xavier_uniform(rng, dim, dim))
    params.add(f"{prefix}.attn.proj_b", np.zeros(dim))
    params.add(f"{prefix}.ln2.g", np.ones(dim))
    params.add(f"{prefix}.ln2.b", np.zeros(dim))
    params.add(f"{prefix}.mlp.w1", xavier_uniform(rng, dim, hidden))
    params.add(f"{prefix}.mlp.b1", np.zeros(hidden))
    params.add(f"{prefix}.mlp.w2", xavier_uniform(rng, hidden, dim))
    params.add(f"{prefix}.mlp.b2", np.zeros(dim))


def init_params(cfg: ModelConfig, rng):
    """Fresh parameter store: xavier linears, trunc-normal tokens/positions."""
    params = ModelParams()
    params.add("patch_embed.w", xavier_uniform(rng, cfg.patch_dim, cfg.enc_dim))
    params.add("patch_embed.b", np.zeros(cfg.enc_dim))
    params.add("cls_tokens", trunc_normal(rng, (cfg.n_cls, cfg.enc_dim)))
    params.add("enc_pos", trunc_normal(rng, (cfg.n_patches, cfg.enc_dim)))
    for i in range(cfg.enc_depth):
        _add_block(params, f"enc.{i}", cfg.enc_dim, cfg.mlp_ratio * cfg.enc_dim, rng)
    params.add("enc_norm.g", np.ones(cfg.enc_dim))
    params.add("enc_norm.b", np.zeros(cfg.enc_dim))

    params.add("dec_embed.w", xavier_uniform(rng, cfg.enc_dim, cfg.dec_dim))
    params.add("dec_embed.b", np.zeros(cfg.dec_dim))
    params.add("mask_token", trunc_normal(rng, (cfg.dec_dim,)))
    params.add("dec_pos", trunc_normal(rng, (cfg.n_patches, cfg.dec_dim)))
    for i in range(cfg.dec_depth):
        _add_block(params, f"dec.{i}", cfg.dec_dim, cfg.mlp_ratio * cfg.dec_dim, rng)
    params.add("dec_norm.g", np.ones(cfg.dec_dim))
    params.add("dec_norm.b", np.zeros(cfg.dec_dim))
    params.add("head.w", xavier_uniform(rng, cfg.dec_dim, cfg.patch_dim))
    params.add("head.b", np.zeros(cfg.patch_dim))
    return params


def parameter_count(cfg: ModelConfig):
    """Closed-form total parameter count for a given configuration."""
    def block(d, hidden):
        # 2 norms, fused qkv, attn projection, 2-layer MLP
        return 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)

    d, k = cfg.enc_dim, cfg.dec_dim
    total = cfg.patch_dim * d + d                        # patch embed
    total += cfg.n_cls * d + cfg.n_patches * d           # class tokens, positions
    total += cfg.enc_depth * block(d, cfg.mlp_ratio * d)
    total += 2 * d                                       # final encoder norm
    total += d * k + k + k + cfg.n_patches * k           # decoder embed, mask token, positions
    total += cfg.dec_depth * block(k, cfg.mlp_ratio * k)
    total += 2 * k
    total += k * cfg.patch_dim + cfg.patch_dim           # pixel head
    return total


def _transformer_block(x, params, prefix, heads, dp_rate, rng, training):
    h = ops.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    a = ops.multi_head_self_attention(
        h,
        params[f"{prefix}.attn.qkv_w"],
        params[f"{prefix}.attn.qkv_b"],
        params[f"{prefix}.attn.proj_w"],
        params[f"{prefix}.attn.proj_b"],
        heads,
    )
    x = add(x, ops.drop_path(a, dp_rate, rng, training))
    h = ops.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    m = ops.mlp(
        h,
        params[f"{prefix}.mlp.w1"],
        params[f"{prefix}.mlp.b1"],
        params[f"{prefix}.mlp.w2"],
        params[f"{prefix}.mlp.b2"],
    )
    return add(x, ops.drop_path(m, dp_rate, rng, training))


def drop_path_schedule(cfg: ModelConfig):
    """Per-encoder-block stochastic-depth rates, 0 at the first block up to
    the configured rate at the last."""
    if cfg.enc_depth == 1:
        return [cfg.drop_path_rate]
    return list(np.linspace(0.0, cfg.drop_path_rate, cfg.enc_depth))


def _run_encoder_blocks(seq, cfg, params, rng, training, n_blocks):
    rates = drop_path_schedule(cfg)
    for i in range(n_blocks):
        seq = _transformer_block(seq, params, f"enc.{i}", cfg.enc_heads,
                                 rates[i], rng, training)
    return ops.layer_norm(seq, params["enc_norm.g"], params["enc_norm.b"])


def _embed(batch, cfg, params):
    data = getattr(batch, "data", batch)
    b, c, h, w = data.shape
    if h != cfg.input_size or w != cfg.input_size:
        raise ContractError(f"batch resolution {h}x{w} != configured {cfg.input_size}")
    tokens = Tensor(patchify(np.asarray(data, dtype=np.float32), cfg.p))
    x = ops.linear(tokens, params["patch_embed.w"], params["patch_embed.b"])
    return add(x, params["enc_pos"]), b


def encode(batch, plan, cfg: ModelConfig, params, rng=None, training=False):
    """Embed, mask (if a plan is given), prepend class tokens, run the encoder.

    Returns TokenStates with layout "visible-only" (plan) or "full" (no plan).
    The encoder only ever sees C + n_visible tokens in pre-training mode.
    """
    if training and cfg.drop_path_rate > 0.0 and rng is None:
        raise ContractError("training with drop-path needs an rng")
    x, b = _embed(batch, cfg, params)
    if plan is not None:
        if plan.n_patches != cfg.n_patches:
            raise ContractError(
                f"plan covers {plan.n_patches} patches, model has {cfg.n_patches}"
            )
        x = gather_visible(x, plan)
    cls = expand_batch(params["cls_tokens"], b)
    seq = concat_rows([cls, x])
    seq = _run_encoder_blocks(seq, cfg, params, rng, training, cfg.enc_depth)
    out_cls = narrow_rows(seq, 0, cfg.n_cls)
    out_patches = narrow_rows(seq, cfg.n_cls, seq.shape[1] - cfg.n_cls)
    return TokenStates(cls=out_cls, patches=out_patches,
                       layout="visible-only" if plan is not None else "full")


def decode(latent: TokenStates, plan, cfg: ModelConfig, params, rng=None, training=False):
    """Project to decoder width, restore masked slots, predict pixels.

    Class tokens join the decoder sequence when cfg.cls_in_decoder; their
    head outputs are discarded either way. Returns Tensor [B, N, p*p*3].

    dec_depth == 0 (reachable only by mutating a config after construction)
    skips the blocks and the final norm, leaving a purely affine map used by
    linearity tests.
    """
    if latent.layout != "visible-only":
        raise ContractError(f"decode expects visible-only latents, got {latent.layout}")
    patches = ops.linear(latent.patches, params["dec_embed.w"], params["dec_embed.b"])
    restored = scatter_restore(patches, plan, params["mask_token"])
    restored = add(restored, params["dec_pos"])
    if cfg.cls_in_decoder:
        cls = ops.linear(latent.cls, params["dec_embed.w"], params["dec_embed.b"])
        seq = concat_rows([cls, restored])
    else:
        seq = restored
    for i in range(cfg.dec_depth):
        seq = _transformer_block(seq, params, f"dec.{i}", cfg.dec_heads,
                                 0.0, rng, training)
    if cfg.dec_depth > 0:
        seq = ops.layer_norm(seq, params["dec_norm.g"], params["dec_norm.b"])
    if cfg.cls_in_decoder:
        seq = narrow_rows(seq, cfg.n_cls, cfg.n_patches)
    return ops.linear(seq, params["head.w"], params["head.b"])


def forward_features(batch, cfg: ModelConfig, params, block_index=None):
    """Unmasked forward stopped after block_index encoder blocks, normed.

    block_index = enc_depth reproduces encode() without a plan; smaller
    values expose intermediate representations for block-wise probing.
    """
    if block_index is None:
        block_index = cfg.enc_depth
    if not 1 <= block_index <= cfg.enc_depth:
        raise ContractError(f"block_index {block_index} outside 1..{cfg.enc_depth}")
    x, b = _embed(batch, cfg, params)
    cls = expand_batch(params["cls_tokens"], b)
    seq = concat_rows([cls, x])
    seq = _run_encoder_blocks(seq, cfg, params, None, False, block_index)
    return TokenStates(
        cls=narrow_rows(seq, 0, cfg.n_cls),
        patches=narrow_rows(seq, cfg.n_cls, cfg.n_patches),
        layout="full",
    )


def global_embedding(tokens: TokenStates):
    """Mean over the class tokens: the image-level feature vector [B, D]."""
    if tokens.layout == "decoder-full":
        raise ContractError("global embedding is defined on encoder outputs")
    return tokens.cls.data.mean(axis=1)


TINY = dict(input_size=64, p=8, enc_dim=192, enc_depth=12, enc_heads=3,
            dec_dim=96, dec_depth=8, dec_heads=3, n_cls=8)


def tiny_config(**overrides):
    """Desk-scale reference configuration (8x8 patch grid at 64 pixels)."""
    kw = dict(TINY)
    kw.update(overrides)
    return ModelConfig(**kw)
