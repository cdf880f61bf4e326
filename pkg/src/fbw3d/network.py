"""Multi-scale feature fusion network for paired head/abdomen volumes.

A shared 3D residual backbone taps features at strides 4/8/16/32 with
channel widths 64/128/256/512 (times a width multiplier for desk-scale
runs). The four scales are projected to a common channel width, downsampled
to the stride-32 grid, and concatenated; channel attention gates the fused
map; six causal state-space blocks, one per scan orientation, provide
spatial attention whose outputs are averaged. Global average pooling yields
a per-site embedding, and a single affine + sigmoid head maps the
concatenated head/abdomen embeddings to a normalized weight in (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    width_multiplier: float = 1.0
    input_channels: int = 5

    def __post_init__(self):
        if not 0 < self.width_multiplier <= 1:
            raise ValueError(f"width_multiplier must be in (0, 1], got {self.width_multiplier}")

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width_multiplier)))

    @property
    def scaled_stages(self) -> tuple[int, ...]:
        return tuple(self.scaled(c) for c in self.stage_channels)


@dataclass(frozen=True)
class SSMBlockConfig:
    state_dim: int = 16
    expand: int = 2
    conv_width: int = 4

    def __post_init__(self):
        if min(self.state_dim, self.expand, self.conv_width) < 1:
            raise ValueError("SSM block dimensions must be positive integers")


@dataclass(frozen=True)
class ArchToggles:
    """Which architectural pieces are active; all on reproduces the full model."""

    weight_sharing: bool = True
    feature_fusion: bool = True
    channel_attention: bool = True
    spatial_attention: bool = True
    head_input: bool = True
    abdomen_input: bool = True

    def __post_init__(self):
        if not (self.head_input or self.abdomen_input):
            raise ValueError("at least one of head_input/abdomen_input must be enabled")


def _check_dims(shape: tuple[int, ...]) -> None:
    for name, n in zip("DHW", shape[-3:]):
        if n % 32 != 0:
            raise ValueError(f"input axis {name}={n} is not divisible by 32")


class BasicBlock3d(nn.Module):
    """Two 3x3x3 convs with batch norm and a (possibly projected) residual."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm3d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Backbone3d(nn.Module):
    """Residual volumetric backbone exposing four stride-4/8/16/32 taps.

    The stem is a stride-2 convolution followed by stride-2 pooling on all
    three axes, so the four stages sit at uniform strides 4, 8, 16, 32.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.scaled_stages
        self.stem = nn.Sequential(
            nn.Conv3d(cfg.input_channels, c1, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm3d(c1),
            nn.ReLU(inplace=True),
            nn.MaxPool3d(3, stride=2, padding=1),
        )
        self.stage1 = nn.Sequential(BasicBlock3d(c1, c1), BasicBlock3d(c1, c1))
        self.stage2 = nn.Sequential(BasicBlock3d(c1, c2, 2), BasicBlock3d(c2, c2))
        self.stage3 = nn.Sequential(BasicBlock3d(c2, c3, 2), BasicBlock3d(c3, c3))
        self.stage4 = nn.Sequential(BasicBlock3d(c3, c4, 2), BasicBlock3d(c4, c4))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        _check_dims(tuple(x.shape))
        z = self.stem(x)
        z1 = self.stage1(z)
        z2 = self.stage2(z1)
        z3 = self.stage3(z2)
        z4 = self.stage4(z3)
        return z1, z2, z3, z4


class MultiScaleFusion(nn.Module):
    """Project each scale to a common width and align to the stride-32 grid.

    1x1x1 projections bring every tap to ``proj_channels``; plain
    convolutions with kernel = stride in {8, 4, 2, 1} downsample; the four
    aligned maps are concatenated channel-wise.
    """

    STRIDES = (8, 4, 2, 1)

    def __init__(self, cfg: BackboneConfig, proj_channels: int | None = None):
        super().__init__()
        if proj_channels is None:
            proj_channels = cfg.scaled(128)
        stages = cfg.scaled_stages
        self.proj = nn.ModuleList(
            nn.Conv3d(c, proj_channels, 1) for c in stages
        )
        self.down = nn.ModuleList(
            nn.Conv3d(proj_channels, proj_channels, k, stride=k) if k > 1 else nn.Identity()
            for k in self.STRIDES
        )
        self.out_channels = 4 * proj_channels

    def forward(self, features: tuple[torch.Tensor, ...]) -> torch.Tensor:
        ref = features[-1].shape[-3:]
        for i, (feat, k) in enumerate(zip(features, self.STRIDES)):
            expect = tuple(r * k for r in ref)
            if tuple(feat.shape[-3:]) != expect:
                raise ValueError(
                    f"scale {i + 1} has spatial shape {tuple(feat.shape[-3:])}, "
                    f"expected {expect}"
                )
        aligned = [
            down(proj(feat))
            for feat, proj, down in zip(features, self.proj, self.down)
        ]
        return torch.cat(aligned, dim=1)


class ChannelAttention(nn.Module):
    """Per-channel sigmoid gate from spatially pooled features (reduction 16)."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels),
        )

    def gates(self, z: torch.Tensor) -> torch.Tensor:
        pooled = z.mean(dim=(-3, -2, -1))
        return torch.sigmoid(self.mlp(pooled))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        g = self.gates(z)
        return z * g[:, :, None, None, None]


# Scan orientations: odd k is a forward raster with one axis fastest,
# even k is the full reversal of the preceding odd one.
#   k=1/2: W fastest (D, H, W);  k=3/4: H fastest (D, W, H);
#   k=5/6: D fastest (H, W, D).
_SCAN_PERMS = {1: (0, 1, 2), 3: (0, 2, 1), 5: (1, 2, 0)}


def flatten_scan(z: torch.Tensor, k: int) -> torch.Tensor:
    """Flatten (..., C, D, H, W) to (..., C, L) in scan order k in 1..6."""
    if k not in range(1, 7):
        raise ValueError(f"scan order k must be in 1..6, got {k}")
    base = k if k % 2 == 1 else k - 1
    perm = _SCAN_PERMS[base]
    nd = z.dim()
    axes = tuple(range(nd - 3))
    spatial = tuple(nd - 3 + p for p in perm)
    seq = z.permute(*axes, *spatial).reshape(*z.shape[:-3], -1)
    if k % 2 == 0:
        seq = seq.flip(-1)
    return seq


def unflatten_scan(seq: torch.Tensor, k: int, dims: tuple[int, int, int]) -> torch.Tensor:
    """Inverse of :func:`flatten_scan` for a (D, H, W) spatial grid."""
    if k not in range(1, 7):
        raise ValueError(f"scan order k must be in 1..6, got {k}")
    if k % 2 == 0:
        seq = seq.flip(-1)
    base = k if k % 2 == 1 else k - 1
    perm = _SCAN_PERMS[base]
    permuted_dims = tuple(dims[p] for p in perm)
    z = seq.reshape(*seq.shape[:-1], *permuted_dims)
    nd = z.dim()
    axes = tuple(range(nd - 3))
    inverse = [0, 0, 0]
    for pos, p in enumerate(perm):
        inverse[p] = pos
    spatial = tuple(nd - 3 + i for i in inverse)
    return z.permute(*axes, *spatial).contiguous()


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        rms = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return x * rms * self.weight


class SSMBlock(nn.Module):
    """Causal selective state-space block over a token sequence.

    Pre-norm residual wrapper around: input projection to an expanded
    width, short causal depthwise convolution, input-dependent
    discretization of a diagonal state-space recurrence, multiplicative
    gate, output projection. Token t of the output depends only on input
    tokens <= t.
    """

    def __init__(self, dim: int, cfg: SSMBlockConfig = SSMBlockConfig()):
        super().__init__()
        self.dim = dim
        self.cfg = cfg
        d_inner = cfg.expand * dim
        self.d_inner = d_inner
        self.dt_rank = max(1, math.ceil(dim / 16))
        self.norm = RMSNorm(dim)
        self.in_proj = nn.Linear(dim, 2 * d_inner, bias=False)
        self.conv = nn.Conv1d(
            d_inner, d_inner, cfg.conv_width,
            groups=d_inner, padding=cfg.conv_width - 1,
        )
        self.x_proj = nn.Linear(d_inner, self.dt_rank + 2 * cfg.state_dim, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, d_inner)
        a = torch.arange(1, cfg.state_dim + 1, dtype=torch.float32)
        self.A_log = nn.Parameter(torch.log(a).repeat(d_inner, 1))
        self.D = nn.Parameter(torch.ones(d_inner))
        self.out_proj = nn.Linear(d_inner, dim, bias=False)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        """seq: (B, C, L) -> (B, C, L)."""
        if seq.shape[-2] != self.dim:
            raise ValueError(f"token dim {seq.shape[-2]} != block dim {self.dim}")
        x_in = seq.transpose(-1, -2)  # (B, L, C)
        x = self.norm(x_in)
        xz = self.in_proj(x)
        x, z = xz.chunk(2, dim=-1)
        L = x.shape[-2]
        x = self.conv(x.transpose(-1, -2))[..., :L].transpose(-1, -2)
        x = F.silu(x)
        y = self._selective_scan(x)
        y = y * F.silu(z)
        out = x_in + self.out_proj(y)
        return out.transpose(-1, -2)

    def _selective_scan(self, u: torch.Tensor) -> torch.Tensor:
        # u: (B, L, d_inner)
        n = self.cfg.state_dim
        dbc = self.x_proj(u)
        dt, b, c = torch.split(dbc, [self.dt_rank, n, n], dim=-1)
        dt = F.softplus(self.dt_proj(dt))  # (B, L, d_inner)
        A = -torch.exp(self.A_log)  # (d_inner, n)
        dA = torch.exp(dt.unsqueeze(-1) * A)  # (B, L, d_inner, n)
        dBu = dt.unsqueeze(-1) * b.unsqueeze(-2) * u.unsqueeze(-1)
        h = torch.zeros(
            *u.shape[:-2], self.d_inner, n, dtype=u.dtype, device=u.device
        )
        ys = []
        for t in range(u.shape[-2]):
            h = dA[..., t, :, :] * h + dBu[..., t, :, :]
            ys.append((h * c[..., t, None, :]).sum(-1))
        y = torch.stack(ys, dim=-2)
        return y + self.D * u


class SpatialAttention(nn.Module):
    """Six scan orientations, one causal SSM block each, outputs averaged."""

    def __init__(self, dim: int, cfg: SSMBlockConfig = SSMBlockConfig()):
        super().__init__()
        self.blocks = nn.ModuleList(SSMBlock(dim, cfg) for _ in range(6))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        dims = tuple(z.shape[-3:])
        acc = None
        for k, block in zip(range(1, 7), self.blocks):
            out = unflatten_scan(block(flatten_scan(z, k)), k, dims)
            acc = out if acc is None else acc + out
        return acc / 6.0


class SiteEncoder(nn.Module):
    """ModelInput volume -> pooled embedding for one site."""

    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        ssm_cfg: SSMBlockConfig = SSMBlockConfig(),
        use_fusion: bool = True,
        use_channel_attention: bool = True,
        use_spatial_attention: bool = True,
    ):
        super().__init__()
        self.backbone = Backbone3d(backbone_cfg)
        self.use_fusion = use_fusion
        if use_fusion:
            self.fusion = MultiScaleFusion(backbone_cfg)
            fused_ch = self.fusion.out_channels
        else:
            self.fusion = None
            fused_ch = backbone_cfg.scaled_stages[-1]
        self.embedding_dim = fused_ch
        self.channel_attention = (
            ChannelAttention(fused_ch) if use_channel_attention else None
        )
        self.spatial_attention = (
            SpatialAttention(fused_ch, ssm_cfg) if use_spatial_attention else None
        )

    def fused_map(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.backbone(x)
        z = self.fusion(feats) if self.fusion is not None else feats[-1]
        if self.channel_attention is not None:
            z = self.channel_attention(z)
        if self.spatial_attention is not None:
            z = self.spatial_attention(z)
        return z

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fused_map(x).mean(dim=(-3, -2, -1))


class PairModel(nn.Module):
    """Full predictor: one (or two) site encoders plus the affine+sigmoid head.

    ``encode_head``/``encode_abd`` count encoder invocations in
    ``encoder_passes`` so the factorized N x N pair evaluation (2N encoder
    passes, N^2 affine evaluations) can be asserted.
    """

    def __init__(
        self,
        backbone_cfg: BackboneConfig = BackboneConfig(),
        ssm_cfg: SSMBlockConfig = SSMBlockConfig(),
        toggles: ArchToggles = ArchToggles(),
    ):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.ssm_cfg = ssm_cfg
        self.toggles = toggles

        def make_encoder():
            return SiteEncoder(
                backbone_cfg,
                ssm_cfg,
                use_fusion=toggles.feature_fusion,
                use_channel_attention=toggles.channel_attention,
                use_spatial_attention=toggles.spatial_attention,
            )

        self.encoder = make_encoder()
        self.encoder_abd = None if toggles.weight_sharing else make_encoder()
        self.embedding_dim = self.encoder.embedding_dim
        self.head = nn.Linear(2 * self.embedding_dim, 1)
        self.encoder_passes = 0

    def _encode(self, x: torch.Tensor, encoder: SiteEncoder, enabled: bool) -> torch.Tensor:
        if not enabled:
            batch = x.shape[0] if x.dim() == 5 else 1
            p = next(self.parameters())
            return torch.zeros(batch, self.embedding_dim, dtype=p.dtype, device=p.device)
        squeeze = x.dim() == 4
        if squeeze:
            x = x.unsqueeze(0)
        self.encoder_passes += x.shape[0]
        e = encoder(x)
        return e

    def encode_head(self, x: torch.Tensor) -> torch.Tensor:
        return self._encode(x, self.encoder, self.toggles.head_input)

    def encode_abd(self, x: torch.Tensor) -> torch.Tensor:
        enc = self.encoder_abd if self.encoder_abd is not None else self.encoder
        return self._encode(x, enc, self.toggles.abdomen_input)

    def predict_from_embeddings(
        self, e_head: torch.Tensor, e_abd: torch.Tensor
    ) -> torch.Tensor:
        logits = self.head(torch.cat([e_head, e_abd], dim=-1)).squeeze(-1)
        return torch.sigmoid(logits)

    def prediction_matrix(
        self, e_head: torch.Tensor, e_abd: torch.Tensor
    ) -> torch.Tensor:
        """N x N predictions: entry (i, j) pairs head i with abdomen j."""
        if e_head.shape != e_abd.shape:
            raise ValueError(
                f"embedding shapes differ: {tuple(e_head.shape)} vs {tuple(e_abd.shape)}"
            )
        w = self.head.weight.squeeze(0)
        w_h, w_a = w[: self.embedding_dim], w[self.embedding_dim :]
        logits = (
            e_head @ w_h[:, None] + (e_abd @ w_a[:, None]).T + self.head.bias
        )
        return torch.sigmoid(logits)

    def forward(self, head_vol: torch.Tensor, abd_vol: torch.Tensor) -> torch.Tensor:
        """Monolithic forward of one (or a batch of) head/abdomen pair(s)."""
        e_h = self.encode_head(head_vol)
        e_a = self.encode_abd(abd_vol)
        return self.predict_from_embeddings(e_h, e_a)


def build_model(
    width_multiplier: float = 1.0,
    toggles: ArchToggles = ArchToggles(),
    ssm_cfg: SSMBlockConfig = SSMBlockConfig(),
    seed: int | None = None,
) -> PairModel:
    if seed is not None:
        torch.manual_seed(seed)
    cfg = BackboneConfig(width_multiplier=width_multiplier)
    return PairModel(cfg, ssm_cfg, toggles)
