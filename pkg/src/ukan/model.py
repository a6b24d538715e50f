"""The U-shaped KAN network.

Encoder: L conv-BN-ReLU-maxpool stages, then K tokenized KAN stages, each a
stride-2 patch-embedding conv followed by a token-mixing block
(KAN stack -> depthwise conv + BN + ReLU -> residual -> layer norm).
Decoder: the mirror image, K tokenized stages then L conv stages, each
upsampling 2x and fusing the matching encoder skip by concatenation plus a
3x3 conv; a 1x1 head produces the output map. Every encoder stage halves the
spatial resolution and every decoder stage doubles it.

The diffusion variant swaps the token-mixing block for a time-conditioned one
(no depthwise conv, no residual; a projected sinusoidal embedding of the
timestep is added after the layer norm) and predicts noise with as many output
channels as the input image.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .kan import KanStack, MlpStack, SplineSpec
from .module import Module
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, depthwise_conv3x3
from .tensor import Tensor, ShapeError, concat, maxpool2x2, upsample_bilinear2x


BLOCK_KINDS = ("kan", "mlp", "identity")

# channel ladders: conv stages C1..C3 and token dims D1 = 5*C3/4, D2 = 2*C3
PROFILES = {
    "small": ((64, 96, 128), (160, 256)),
    "base": ((128, 160, 256), (320, 512)),
    "large": ((256, 320, 512), (640, 1024)),
}


@dataclass(frozen=True)
class UkanConfig:
    """Architecture hyperparameters; defaults give the base profile."""
    in_channels: int = 3
    out_channels: int = 1
    conv_channels: tuple = (128, 160, 256)
    kan_dims: tuple = (320, 512)
    n_kan_layers: int = 3
    block_kinds: tuple | str = "kan"
    patch_stride: int = 2
    spline: SplineSpec = field(default_factory=SplineSpec)
    time_embed_dim: int = 128

    @property
    def n_conv_stages(self) -> int:
        return len(self.conv_channels)

    @property
    def n_tok_stages(self) -> int:
        return len(self.kan_dims)

    @property
    def downsample_factor(self) -> int:
        tok = self.n_tok_stages if self.patch_stride == 2 else 0
        return 2 ** (self.n_conv_stages + tok)

    def resolved_block_kinds(self) -> tuple:
        """One kind per tokenized block: encoder stages then decoder stages."""
        total = 2 * self.n_tok_stages
        kinds = ((self.block_kinds,) * total if isinstance(self.block_kinds, str)
                 else tuple(self.block_kinds))
        if len(kinds) != total:
            raise ValueError(f"block_kinds needs 1 or {total} entries, "
                             f"got {self.block_kinds!r}")
        for k in kinds:
            if k not in BLOCK_KINDS:
                raise ValueError(f"unknown block kind {k!r}; choose from {BLOCK_KINDS}")
        return kinds

    def validate(self) -> "UkanConfig":
        if self.n_conv_stages < 1 or self.n_tok_stages < 1:
            raise ValueError("need at least one conv stage and one tokenized stage")
        if self.patch_stride not in (1, 2):
            raise ValueError(f"patch_stride must be 1 or 2, got {self.patch_stride}")
        if self.n_kan_layers < 1:
            raise ValueError(f"n_kan_layers must be >= 1, got {self.n_kan_layers}")
        self.resolved_block_kinds()
        return self

    @classmethod
    def from_profile(cls, name: str, **overrides) -> "UkanConfig":
        conv, dims = PROFILES[name]
        return cls(conv_channels=conv, kan_dims=dims, **overrides).validate()

    def scaled(self, **overrides) -> "UkanConfig":
        return replace(self, **overrides).validate()


def tokens_from_map(x: Tensor) -> tuple:
    """(B,C,H,W) -> ((B, H*W, C) tokens, (H, W)); pure reshape, no projection."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(0, 2, 1), (h, w)


def map_from_tokens(tokens: Tensor, spatial: tuple) -> Tensor:
    """Inverse of tokens_from_map."""
    b, n, c = tokens.shape
    h, w = spatial
    if n != h * w:
        raise ShapeError(f"{n} tokens cannot fill a {h}x{w} map")
    return tokens.transpose(0, 2, 1).reshape(b, c, h, w)


class ConvBlock(Module):
    """3x3 conv (stride 1, padding 1) + batch norm + ReLU."""

    def __init__(self, in_channels, out_channels, rng=None):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size=3, stride=1,
                           padding=1, rng=rng)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x):
        return self.bn(self.conv(x)).relu()


class PatchEmbed(Module):
    """Strided 3x3 conv projection to token space; flattens the result."""

    def __init__(self, in_channels, dim, stride=2, rng=None):
        super().__init__()
        self.stride = stride
        self.proj = Conv2d(in_channels, dim, kernel_size=3, stride=stride,
                           padding=1, rng=rng)

    def forward(self, x) -> tuple:
        if self.stride == 2 and (x.shape[2] % 2 or x.shape[3] % 2):
            raise ShapeError(f"PatchEmbed: halving needs even spatial dims, "
                             f"got {x.shape[2]}x{x.shape[3]}")
        return tokens_from_map(self.proj(x))


def _make_stack(kind, dim, n_layers, spline, rng):
    if kind == "identity":
        return None
    dims = [dim] * (n_layers + 1)
    if kind == "kan":
        return KanStack(dims, spec=spline, rng=rng)
    return MlpStack(dims, rng=rng)


def _apply_stack(stack, tokens):
    if stack is None:
        return tokens
    b, n, d = tokens.shape
    return stack(tokens.reshape(b * n, d)).reshape(b, n, d)


class TokKanBlock(Module):
    """Token mixer: per-token KAN (or MLP) stack, depthwise conv path,
    residual with the original tokens, then layer norm."""

    def __init__(self, dim, n_layers=3, kind="kan", spline=SplineSpec(), rng=None):
        super().__init__()
        self.dim = dim
        self.kind = kind
        self.stack = _make_stack(kind, dim, n_layers, spline, rng)
        self.dwconv = depthwise_conv3x3(dim, rng=rng)
        self.bn = BatchNorm2d(dim)
        self.norm = LayerNorm(dim)

    def forward(self, tokens, spatial):
        y = _apply_stack(self.stack, tokens)
        m = self.bn(self.dwconv(map_from_tokens(y, spatial))).relu()
        y, _ = tokens_from_map(m)
        return self.norm(tokens + y)


class TimeConditionedBlock(Module):
    """Diffusion token mixer: KAN (or MLP) stack then layer norm, plus a
    per-block two-layer silu projection of the time embedding broadcast over
    tokens. No depthwise conv, no residual."""

    def __init__(self, dim, n_layers=3, kind="kan", spline=SplineSpec(),
                 time_dim=128, rng=None):
        super().__init__()
        self.dim = dim
        self.kind = kind
        self.stack = _make_stack(kind, dim, n_layers, spline, rng)
        self.norm = LayerNorm(dim)
        self.time_in = Linear(time_dim, dim, rng=rng)
        self.time_out = Linear(dim, dim, rng=rng)

    def forward(self, tokens, temb):
        y = self.norm(_apply_stack(self.stack, tokens))
        t = self.time_out(self.time_in(temb).silu())
        return y + t.reshape(t.shape[0], 1, self.dim)


def sinusoidal_time_embedding(t, dim: int) -> Tensor:
    """Classic sin/cos embedding of integer timesteps; not differentiable."""
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    tv = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = tv[:, None] * freqs[None, :]
    return Tensor(np.concatenate([np.sin(ang), np.cos(ang)], axis=1))


class _UkanBase(Module):
    """Shared encoder/decoder skeleton; subclasses choose the token block."""

    def __init__(self, cfg: UkanConfig, rng=None, time_conditioned=False):
        super().__init__()
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng()
        self.cfg = cfg
        self.time_conditioned = time_conditioned
        L, K = cfg.n_conv_stages, cfg.n_tok_stages
        conv_ch = list(cfg.conv_channels)
        kan_dims = list(cfg.kan_dims)
        kinds = cfg.resolved_block_kinds()

        def tok_block(dim, kind):
            if time_conditioned:
                return TimeConditionedBlock(dim, cfg.n_kan_layers, kind,
                                            cfg.spline, cfg.time_embed_dim, rng)
            return TokKanBlock(dim, cfg.n_kan_layers, kind, cfg.spline, rng)

        chans = [cfg.in_channels] + conv_ch
        self.enc_conv = [ConvBlock(chans[i], chans[i + 1], rng=rng)
                         for i in range(L)]
        dims = [conv_ch[-1]] + kan_dims
        self.embeds = [PatchEmbed(dims[k], dims[k + 1], stride=cfg.patch_stride,
                                  rng=rng) for k in range(K)]
        self.enc_tok = [tok_block(kan_dims[k], kinds[k]) for k in range(K)]

        # decoder tokenized stages: skips Z_{K-1}..Z_1 then X_L; the fused
        # channel count always lands on the skip's own width
        tok_targets = [kan_dims[k] for k in range(K - 2, -1, -1)] + [conv_ch[-1]]
        cur = kan_dims[-1]
        self.dec_fuse = []
        self.dec_tok = []
        for i, target in enumerate(tok_targets):
            self.dec_fuse.append(Conv2d(cur + target, target, kernel_size=3,
                                        stride=1, padding=1, rng=rng))
            self.dec_tok.append(tok_block(target, kinds[K + i]))
            cur = target
        # decoder conv stages concatenate the pre-pool encoder features, so a
        # full-resolution path survives down to the head
        self.dec_conv = []
        for ell in range(L, 0, -1):
            skip_ch = conv_ch[ell - 1]
            target = conv_ch[max(ell - 2, 0)]
            self.dec_conv.append(ConvBlock(cur + skip_ch, target, rng=rng))
            cur = target
        self.head = Conv2d(conv_ch[0], cfg.out_channels, kernel_size=1, rng=rng)
        self.last_ladder = None

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (B, {self.cfg.in_channels}, H, W), "
                             f"got {x.shape}")
        f = self.cfg.downsample_factor
        if x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(f"spatial dims {x.shape[2]}x{x.shape[3]} must be "
                             f"divisible by {f} "
                             f"({self.cfg.n_conv_stages} conv + "
                             f"{self.cfg.n_tok_stages} tokenized stages)")

    def _forward(self, x, temb=None):
        self._check_input(x)
        ladder_enc, ladder_dec = [], []

        pre_pool = []
        h = x
        for block in self.enc_conv:
            full = block(h)
            pre_pool.append(full)
            h = maxpool2x2(full)
            ladder_enc.append(h.shape[2])
        pooled_last = h
        tok_skips = []
        for embed, block in zip(self.embeds, self.enc_tok):
            tokens, spatial = embed(h)
            tokens = (block(tokens, temb) if self.time_conditioned
                      else block(tokens, spatial))
            h = map_from_tokens(tokens, spatial)
            tok_skips.append(h)
            ladder_enc.append(h.shape[2])

        skips = tok_skips[-2::-1] + [pooled_last]
        for fuse, block, skip in zip(self.dec_fuse, self.dec_tok, skips):
            if self.cfg.patch_stride == 2:
                h = upsample_bilinear2x(h)
            h = fuse(concat([h, skip], axis=1))
            tokens, spatial = tokens_from_map(h)
            tokens = (block(tokens, temb) if self.time_conditioned
                      else block(tokens, spatial))
            h = map_from_tokens(tokens, spatial)
            ladder_dec.append(h.shape[2])
        for block, skip in zip(self.dec_conv, pre_pool[::-1]):
            h = upsample_bilinear2x(h)
            h = block(concat([h, skip], axis=1))
            ladder_dec.append(h.shape[2])

        self.last_ladder = {"encoder": ladder_enc, "decoder": ladder_dec}
        return self.head(h)


class Ukan(_UkanBase):
    """Segmentation network: image in, per-pixel logits out."""

    def __init__(self, cfg: UkanConfig = UkanConfig(), rng=None):
        super().__init__(cfg, rng=rng, time_conditioned=False)

    def forward(self, x: Tensor) -> Tensor:
        return self._forward(x)


class DiffusionUkan(_UkanBase):
    """Noise predictor: noisy image plus timestep in, predicted noise out."""

    def __init__(self, cfg: UkanConfig = UkanConfig(), rng=None):
        cfg = replace(cfg, out_channels=cfg.in_channels)
        super().__init__(cfg, rng=rng, time_conditioned=True)

    def forward(self, x: Tensor, t) -> Tensor:
        temb = sinusoidal_time_embedding(t, self.cfg.time_embed_dim)
        if temb.shape[0] != x.shape[0]:
            raise ShapeError(f"{temb.shape[0]} timesteps for batch {x.shape[0]}")
        return self._forward(x, temb)
