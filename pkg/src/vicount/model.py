"""The counting network: shared-weight multi-scale features, cross-frame
attention, density decoders, and the flow decoder driven by the
global-minus-shared difference.

For a frame pair the model predicts six nonnegative maps at input
resolution: global and shared density for each frame, outflow for the
earlier frame and inflow for the later one. Outflow/inflow come from a small
convolutional refiner applied to the (unclipped) global-shared difference;
the "direct" variant instead decodes them straight from the cross-frame
features and produces no shared maps.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, ShapeError

VARIANTS = ("multiscale", "shallow", "direct")
POSITIONAL_ENCODINGS = ("none", "conditional")
BACKBONES = ("small", "vgg16")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are the desk-scale build."""

    n_levels: int = 3        # pyramid levels; level i sits at stride 2^(i+1)
    n_blocks: int = 2        # cross-frame blocks per attention unit
    n_heads: int = 4
    channels: int = 32       # shared feature width (128 at full scale)
    mlp_ratio: int = 4
    backbone: str = "small"
    backbone_width: int = 16
    variant: str = "multiscale"
    positional_encoding: str = "none"
    mca_residual: bool = True  # False keeps cross-attention non-residual
    pretrained_backbone: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.positional_encoding not in POSITIONAL_ENCODINGS:
            raise ConfigError(
                f"positional_encoding must be one of {POSITIONAL_ENCODINGS}, "
                f"got {self.positional_encoding!r}"
            )
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.channels % self.n_heads != 0:
            raise ConfigError(
                f"channels {self.channels} not divisible by n_heads {self.n_heads}"
            )
        if self.n_levels < 1 or self.n_blocks < 1:
            raise ConfigError("n_levels and n_blocks must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.channels // self.n_heads

    @property
    def pad_multiple(self) -> int:
        return 2 ** (self.n_levels + 1)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def to_tokens(feat: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C), row-major over pixels."""
    return feat.flatten(2).transpose(1, 2)


def to_map(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, n, c = tokens.shape
    if n != h * w:
        raise ShapeError(f"{n} tokens cannot fill a {h}x{w} map")
    return tokens.transpose(1, 2).reshape(b, c, h, w)


class MultiHeadAttention(nn.Module):
    """Projected multi-head scaled-dot-product attention, heads concatenated.

    Query/key/value projections are bias-free matrices; there is no output
    projection here (blocks own theirs), so the forward result is exactly
    concat_h(softmax(Q_h K_h^T / sqrt(D)) V_h).
    """

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ConfigError(f"width {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.query_proj = nn.Linear(dim, dim, bias=False)
        self.key_proj = nn.Linear(dim, dim, bias=False)
        self.value_proj = nn.Linear(dim, dim, bias=False)

    def forward(self, query_tokens, kv_tokens, return_weights: bool = False):
        b, nq, c = query_tokens.shape
        nk = kv_tokens.shape[1]
        if kv_tokens.shape[-1] != c:
            raise ShapeError(f"kv width {kv_tokens.shape[-1]} != query width {c}")
        h, d = self.n_heads, self.head_dim
        q = self.query_proj(query_tokens).reshape(b, nq, h, d).transpose(1, 2)
        k = self.key_proj(kv_tokens).reshape(b, nk, h, d).transpose(1, 2)
        v = self.value_proj(kv_tokens).reshape(b, nk, h, d).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d)
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, nq, c)
        if return_weights:
            return out, weights
        return out


class TokenMLP(nn.Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class CrossFrameBlock(nn.Module):
    """Pre-norm block: self-attention, cross-frame attention, MLP.

    Self-attention and MLP are residual; the cross-attention path is
    residual by default (mca_residual) so that zero output projections make
    the whole block an identity, or replaces its input when disabled.
    """

    def __init__(self, dim: int, n_heads: int, mlp_ratio: int = 4,
                 mca_residual: bool = True):
        super().__init__()
        self.mca_residual = mca_residual
        self.norm_self = nn.LayerNorm(dim)
        self.norm_cross = nn.LayerNorm(dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads)
        self.self_out = nn.Linear(dim, dim)
        self.cross_attn = MultiHeadAttention(dim, n_heads)
        self.cross_out = nn.Linear(dim, dim)
        self.mlp = TokenMLP(dim, mlp_ratio)

    def forward(self, x, kv):
        normed = self.norm_self(x)
        x = x + self.self_out(self.self_attn(normed, normed))
        cross = self.cross_out(self.cross_attn(self.norm_cross(x), kv))
        x = x + cross if self.mca_residual else cross
        return x + self.mlp(self.norm_mlp(x))


class ConditionalPositionalEncoding(nn.Module):
    """Depthwise-convolution positional term; tolerates any input size."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)

    def forward(self, feat):
        return feat + self.proj(feat)


class CrossFrameUnit(nn.Module):
    """A stack of cross-frame blocks attending to one kv token set."""

    def __init__(self, dim, n_blocks, n_heads, mlp_ratio, mca_residual):
        super().__init__()
        self.blocks = nn.ModuleList(
            CrossFrameBlock(dim, n_heads, mlp_ratio, mca_residual)
            for _ in range(n_blocks)
        )

    def forward(self, x, kv):
        for block in self.blocks:
            x = block(x, kv)
        return x


class MultiScaleCrossFrame(nn.Module):
    """Per-scale cross-frame attention, chained across the pyramid.

    Unit 1 consumes the largest level directly; unit i fuses the previous
    unit's output (resized) with level i through a 1x1 conv before attending
    to the other frame's level-i tokens. The result lives at the smallest
    pyramid scale.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.channels
        self.units = nn.ModuleList(
            CrossFrameUnit(c, config.n_blocks, config.n_heads,
                           config.mlp_ratio, config.mca_residual)
            for _ in range(config.n_levels)
        )
        self.fuse = nn.ModuleList(
            nn.Conv2d(2 * c, c, 1) for _ in range(config.n_levels - 1)
        )
        self.pos_enc = None
        if config.positional_encoding == "conditional":
            self.pos_enc = nn.ModuleList(
                ConditionalPositionalEncoding(c) for _ in range(config.n_levels)
            )

    def forward(self, pyramid_q, pyramid_kv):
        if len(pyramid_q) != len(self.units) or len(pyramid_kv) != len(self.units):
            raise ConfigError(
                f"expected {len(self.units)} pyramid levels, got "
                f"{len(pyramid_q)}/{len(pyramid_kv)}"
            )
        out_map = None
        for i, unit in enumerate(self.units):
            level_q, level_kv = pyramid_q[i], pyramid_kv[i]
            if i == 0:
                x_map = level_q
            else:
                prev = F.interpolate(out_map, size=level_q.shape[-2:],
                                     mode="bilinear", align_corners=False)
                x_map = self.fuse[i - 1](torch.cat([prev, level_q], dim=1))
            if self.pos_enc is not None:
                x_map = self.pos_enc[i](x_map)
                level_kv = self.pos_enc[i](level_kv)
            h, w = level_q.shape[-2:]
            tokens = unit(to_tokens(x_map), to_tokens(level_kv))
            out_map = to_map(tokens, h, w)
        return out_map


class ShallowCrossFrame(nn.Module):
    """Ablation: one cross-frame stack on the fused global features.

    Depth is n_levels * n_blocks so the parameter count tracks the
    multi-scale build (which additionally owns only its small fusion convs).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.channels
        self.stack = CrossFrameUnit(
            c, config.n_levels * config.n_blocks, config.n_heads,
            config.mlp_ratio, config.mca_residual,
        )
        self.pos_enc = None
        if config.positional_encoding == "conditional":
            self.pos_enc = ConditionalPositionalEncoding(c)

    def forward(self, feat_q, feat_kv):
        if self.pos_enc is not None:
            feat_q = self.pos_enc(feat_q)
            feat_kv = self.pos_enc(feat_kv)
        h, w = feat_q.shape[-2:]
        tokens = self.stack(to_tokens(feat_q), to_tokens(feat_kv))
        return to_map(tokens, h, w)


def _norm_relu_conv(in_ch: int, out_ch: int, stride: int = 1) -> list:
    """conv (no bias) -> group norm (no affine) -> rectifier.

    The density paths regress sparse targets under an L1 objective whose
    pointwise median is the zero map; any uniform-shift parameter (conv
    bias, norm affine shift) lets the optimizer sink pre-activations below
    every rectifier and freeze there. Without those parameters the
    normalized features keep a positive tail by construction, so the dead
    state is unreachable.
    """
    groups = 8 if out_ch % 8 == 0 else 1
    return [
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(groups, out_ch, affine=False),
        nn.ReLU(),
    ]


class SmallBackbone(nn.Module):
    """Compact conv backbone for desk-scale runs; stage s halves resolution."""

    def __init__(self, width: int, n_levels: int):
        super().__init__()
        widths = [min(width * 2 ** s, width * 4) for s in range(n_levels + 1)]
        stages = []
        in_ch = 3
        for out_ch in widths:
            stages.append(nn.Sequential(
                *_norm_relu_conv(in_ch, out_ch, stride=2),
                *_norm_relu_conv(out_ch, out_ch),
            ))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        # stage 0 is the /2 stem; pyramid taps are stages 1..n_levels
        self.out_channels = widths[1:]

    def forward(self, images):
        feats = []
        x = images
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i >= 1:
                feats.append(x)
        return feats


# Conv widths of the VGG16 feature stack; "M" marks 2x max-pooling.
_VGG16_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
                 512, 512, 512, "M", 512, 512, 512)


class VGG16Backbone(nn.Module):
    """VGG16 feature layout with taps at strides 4, 8, and 16.

    Layer indices match torchvision's ``features`` numbering, so an
    ImageNet-pretrained state dict can be loaded from a local file.
    """

    TAPS = {15: 256, 22: 512, 29: 512}  # after relu3_3 / relu4_3 / relu5_3

    def __init__(self, n_levels: int, weights_path: str | None = None):
        super().__init__()
        if n_levels != 3:
            raise ConfigError("vgg16 backbone supports exactly 3 pyramid levels")
        layers = []
        in_ch = 3
        for item in _VGG16_LAYOUT:
            if item == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers.append(nn.Conv2d(in_ch, item, 3, padding=1))
                layers.append(nn.ReLU())
                in_ch = item
        self.features = nn.Sequential(*layers)
        self.out_channels = list(self.TAPS.values())
        if weights_path is not None:
            self._load_pretrained(weights_path)

    def _load_pretrained(self, path):
        if not Path(path).exists():
            raise ConfigError(f"pretrained backbone weights not found: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if k.startswith("features.")}
        missing, unexpected = self.load_state_dict(state, strict=False)
        missing = [k for k in missing if k.startswith("features.")]
        if missing:
            raise ConfigError(f"pretrained weights missing keys: {missing[:3]}...")

    def forward(self, images):
        feats = []
        x = images
        for idx, layer in enumerate(self.features):
            x = layer(x)
            if idx in self.TAPS:
                feats.append(x)
        return feats


class FeaturePyramidNeck(nn.Module):
    """Lateral 1x1 projections with top-down addition and 3x3 smoothing."""

    def __init__(self, in_channels, out_channels: int):
        super().__init__()
        self.laterals = nn.ModuleList(
            nn.Conv2d(ch, out_channels, 1) for ch in in_channels
        )
        self.smooth = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1)
            for _ in in_channels
        )

    def forward(self, feats):
        laterals = [lat(f) for lat, f in zip(self.laterals, feats)]
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(
                laterals[i + 1], size=laterals[i].shape[-2:],
                mode="nearest",
            )
        return [smooth(lat) for smooth, lat in zip(self.smooth, laterals)]


class GlobalFusion(nn.Module):
    """Fuse all pyramid levels at the smallest scale into one feature map."""

    def __init__(self, n_levels: int, channels: int):
        super().__init__()
        groups = 8 if channels % 8 == 0 else 1
        self.proj = nn.Conv2d(n_levels * channels, channels, 1, bias=False)
        self.norm = nn.GroupNorm(groups, channels, affine=False)

    def forward(self, pyramid):
        target = pyramid[-1].shape[-2:]
        resized = [
            F.interpolate(level, size=target, mode="bilinear", align_corners=False)
            if level.shape[-2:] != target else level
            for level in pyramid
        ]
        return F.relu(self.norm(self.proj(torch.cat(resized, dim=1))))


class DensityDecoder(nn.Module):
    """Alternating conv+rectifier and 2x nearest upsampling up to input size.

    Channel widths halve per stage from the feature width; the 1-channel
    bias-free head ends in a rectifier so predicted densities are
    nonnegative (and cannot sink uniformly dead, see _norm_relu_conv).
    """

    def __init__(self, channels: int, n_stages: int):
        super().__init__()
        stages = []
        in_ch = channels
        for s in range(n_stages):
            out_ch = max(channels >> (s + 1), 8)
            stages.append(nn.Sequential(
                *_norm_relu_conv(in_ch, out_ch),
                nn.Upsample(scale_factor=2, mode="nearest"),
            ))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv2d(in_ch, 1, 3, padding=1, bias=False)

    def forward(self, feat):
        return F.relu(self.head(self.stages(feat)))


class FlowRefiner(nn.Module):
    """The inflow-outflow decoder: 3x3 convs 1->16->16->1 with rectifiers.

    Consumes the raw (possibly negative) global-minus-shared difference and
    returns a nonnegative flow density map. Initialized as a near-identity
    on its first channel so it starts by passing the positive part of the
    difference through; a refiner that starts at zero never recovers, since
    the rectifiers block every gradient once all pre-activations go negative.
    """

    def __init__(self, hidden: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, hidden, 3, padding=1, bias=False), nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1, bias=False), nn.ReLU(),
            nn.Conv2d(hidden, 1, 3, padding=1, bias=False),
        )
        with torch.no_grad():
            for conv in (self.net[0], self.net[2], self.net[4]):
                conv.weight.mul_(0.01)
                conv.weight[0, 0, 1, 1] = 1.0

    def forward(self, difference):
        return F.relu(self.net(difference))


@dataclass
class ModelOutputs:
    """Six predicted maps, (B, 1, H, W) at input resolution; shared maps are
    None in the direct variant."""

    global_a: torch.Tensor
    global_b: torch.Tensor
    shared_a: torch.Tensor | None
    shared_b: torch.Tensor | None
    outflow_a: torch.Tensor
    inflow_b: torch.Tensor


def _make_backbone(config: ModelConfig):
    if config.backbone == "vgg16":
        return VGG16Backbone(config.n_levels, config.pretrained_backbone)
    return SmallBackbone(config.backbone_width, config.n_levels)


class VICModel(nn.Module):
    """Full pair-to-six-maps network; weights are shared across frames."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = _make_backbone(config)
        self.neck = FeaturePyramidNeck(self.backbone.out_channels, config.channels)
        self.global_fusion = GlobalFusion(config.n_levels, config.channels)
        if config.variant == "shallow":
            self.cross_frame = ShallowCrossFrame(config)
        else:
            self.cross_frame = MultiScaleCrossFrame(config)
        n_stages = config.n_levels + 1
        self.global_decoder = DensityDecoder(config.channels, n_stages)
        # In the direct variant this decoder maps cross-frame features
        # straight to outflow/inflow instead of to shared density.
        self.shared_decoder = DensityDecoder(config.channels, n_stages)
        self.flow_refiner = None if config.variant == "direct" else FlowRefiner()

    def _pad(self, images: torch.Tensor) -> torch.Tensor:
        m = self.config.pad_multiple
        h, w = images.shape[-2:]
        if h < m or w < m:
            raise ShapeError(f"input {h}x{w} smaller than the minimum {m}x{m}")
        pad_h = (m - h % m) % m
        pad_w = (m - w % m) % m
        if pad_h or pad_w:
            images = F.pad(images, (0, pad_w, 0, pad_h))
        return images

    def extract_pyramid(self, images: torch.Tensor):
        """Multi-scale features of one frame batch (B, 3, H, W).

        Inputs are zero-padded on the right/bottom to the pyramid's stride
        multiple; level i has width `channels` at stride 2^(i+1) of the
        padded size.
        """
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        return self.neck(self.backbone(self._pad(images)))

    def forward(self, images_a: torch.Tensor, images_b: torch.Tensor) -> ModelOutputs:
        if images_a.shape != images_b.shape:
            raise ShapeError(
                f"frame shapes differ: {tuple(images_a.shape)} vs {tuple(images_b.shape)}"
            )
        h, w = images_a.shape[-2:]
        pyr_a = self.extract_pyramid(images_a)
        pyr_b = self.extract_pyramid(images_b)

        global_feat_a = self.global_fusion(pyr_a)
        global_feat_b = self.global_fusion(pyr_b)
        if self.config.variant == "shallow":
            shared_feat_a = self.cross_frame(global_feat_a, global_feat_b)
            shared_feat_b = self.cross_frame(global_feat_b, global_feat_a)
        else:
            shared_feat_a = self.cross_frame(pyr_a, pyr_b)
            shared_feat_b = self.cross_frame(pyr_b, pyr_a)

        global_a = self.global_decoder(global_feat_a)
        global_b = self.global_decoder(global_feat_b)

        if self.config.variant == "direct":
            outflow_a = self.shared_decoder(shared_feat_a)
            inflow_b = self.shared_decoder(shared_feat_b)
            shared_a = shared_b = None
        else:
            shared_a = self.shared_decoder(shared_feat_a)
            shared_b = self.shared_decoder(shared_feat_b)
            outflow_a = self.flow_refiner(global_a - shared_a)
            inflow_b = self.flow_refiner(global_b - shared_b)

        def crop(t):
            return None if t is None else t[..., :h, :w]

        return ModelOutputs(
            global_a=crop(global_a), global_b=crop(global_b),
            shared_a=crop(shared_a), shared_b=crop(shared_b),
            outflow_a=crop(outflow_a), inflow_b=crop(inflow_b),
        )


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build_model(config: ModelConfig | None = None, seed: int | None = None) -> VICModel:
    """Construct a model, optionally with seeded weight initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return VICModel(config or ModelConfig())


def save_checkpoint(model: VICModel, directory) -> None:
    """Write config.json plus a flat named-parameter npz archive."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(
        json.dumps(asdict(model.config), indent=2) + "\n"
    )
    arrays = {name: tensor.detach().cpu().numpy()
              for name, tensor in model.state_dict().items()}
    np.savez(directory / "params.npz", **arrays)


def load_checkpoint(directory) -> VICModel:
    directory = Path(directory)
    config_path = directory / "config.json"
    params_path = directory / "params.npz"
    if not config_path.exists() or not params_path.exists():
        raise DataError(f"{directory}: not a checkpoint (need config.json + params.npz)")
    config = ModelConfig.from_dict(json.loads(config_path.read_text()))
    model = VICModel(config)
    with np.load(params_path) as archive:
        state = {name: torch.from_numpy(archive[name]) for name in archive.files}
    model.load_state_dict(state)
    model.eval()
    return model
