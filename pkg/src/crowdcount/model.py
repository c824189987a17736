"""The counting network: VGG16-style backbone with hierarchical attention.

Multi-scale taps are taken off the backbone at strides 4/8/16. The stride-4
features pass through a segmentation-supervised spatial attention module,
the deeper taps through channel attention modules, and all three branches
are reduced, upsampled to stride 4, concatenated and fused into a
single-channel density map at 1/4 input resolution.

A class-score head (used for weakly supervised adaptation) consumes the
72-channel pre-fusion concatenation and emits one score plane per density
class.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

NUM_DENSITY_CLASSES = 6

# VGG16 convolution widths per stage.
_VGG_STAGES = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))


@dataclass
class ModelConfig:
    """Architecture switches and widths.

    channel_scale shrinks every layer width proportionally for desk-scale
    runs; 1.0 reproduces the reference widths (conv3 256ch, conv4/5 512ch,
    branch output 24ch, fusion input 72ch).
    """

    enable_sam: bool = True
    enable_gam: bool = True
    enable_multiscale: bool = True
    sam_supervised: bool = True
    with_cam: bool = True
    channel_scale: float = 1.0
    input_size: int = 224
    sam_channels: tuple[int, ...] = (64, 64, 32)
    gam_bottleneck: int = 64
    branch_channels: tuple[int, int] = (64, 64)
    branch_out: int = 24
    fusion_channels: tuple[int, int] = (64, 64)
    cam_channels: tuple[int, ...] = (64, 64, 32)

    def __post_init__(self):
        if self.channel_scale <= 0:
            raise ValueError("channel_scale must be positive")
        if self.enable_sam and not self.enable_multiscale:
            raise ValueError("spatial attention requires the multi-scale configuration")
        if self.enable_gam and not self.enable_multiscale:
            raise ValueError("global attention requires the multi-scale configuration")

    def scaled(self, channels: int) -> int:
        return max(1, round(channels * self.channel_scale))


def ablation_config(name: str, **overrides) -> ModelConfig:
    """Named architecture variants used by the ablation study."""
    presets = {
        "vgg": dict(enable_multiscale=False, enable_sam=False, enable_gam=False),
        "ms": dict(enable_multiscale=True, enable_sam=False, enable_gam=False),
        "ms+sam-self": dict(
            enable_multiscale=True, enable_sam=True, sam_supervised=False, enable_gam=False
        ),
        "ms+sam": dict(enable_multiscale=True, enable_sam=True, enable_gam=False),
        "full": dict(enable_multiscale=True, enable_sam=True, enable_gam=True),
    }
    if name not in presets:
        raise ValueError(f"unknown ablation {name!r}, expected one of {sorted(presets)}")
    return ModelConfig(**{**presets[name], **overrides})


class VggBackbone(nn.Module):
    """Conv1-conv5 of VGG16, exposing the conv3/conv4/conv5 feature taps."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.stages = nn.ModuleList()
        in_ch = 3
        for widths in _VGG_STAGES:
            layers = []
            for w in widths:
                out_ch = config.scaled(w)
                layers += [nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(inplace=True)]
                in_ch = out_ch
            self.stages.append(nn.Sequential(*layers))
        self.pool = nn.MaxPool2d(2, 2)

    def forward(self, x):
        c1 = self.stages[0](x)
        c2 = self.stages[1](self.pool(c1))
        c3 = self.stages[2](self.pool(c2))  # stride 4
        c4 = self.stages[3](self.pool(c3))  # stride 8
        c5 = self.stages[4](self.pool(c4))  # stride 16
        return c3, c4, c5


class SpatialAttention(nn.Module):
    """Four 3x3 convs mapping stride-4 features to a single-plane logit map.

    The sigmoid of the logits is an attention map in [0, 1] used to gate the
    input features pixel-wise; the logits double as segmentation output.
    """

    def __init__(self, in_channels: int, hidden: tuple[int, ...]):
        super().__init__()
        layers = []
        ch = in_channels
        for h in hidden:
            layers += [nn.Conv2d(ch, h, 3, padding=1), nn.ReLU(inplace=True)]
            ch = h
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x, force_ones: bool = False):
        seg_logits = self.net(x)
        sa = torch.sigmoid(seg_logits)
        if force_ones:
            sa = torch.ones_like(sa)
        return sa, x * sa, seg_logits


class GlobalAttention(nn.Module):
    """Channel gate: spatial mean pool, FC bottleneck stack, sigmoid."""

    def __init__(self, channels: int, bottleneck: int):
        super().__init__()
        self.fc = nn.Sequential(
            nn.Linear(channels, bottleneck),
            nn.ReLU(inplace=True),
            nn.Linear(bottleneck, bottleneck),
            nn.ReLU(inplace=True),
            nn.Linear(bottleneck, channels),
        )

    def forward(self, x, force_ones: bool = False):
        pooled = x.mean(dim=(2, 3))
        sg = torch.sigmoid(self.fc(pooled))
        if force_ones:
            sg = torch.ones_like(sg)
        return sg, x * sg[:, :, None, None]


class BranchBlock(nn.Module):
    """1x1 / 3x3 / 1x1 conv reduction of one backbone tap to the fusion width."""

    def __init__(self, in_channels: int, hidden: tuple[int, int], out_channels: int):
        super().__init__()
        h1, h2 = hidden
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, h1, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(h1, h2, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(h2, out_channels, 1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x, target_hw=None):
        y = self.net(x)
        if target_hw is not None and y.shape[-2:] != tuple(target_hw):
            y = F.interpolate(y, size=tuple(target_hw), mode="bilinear", align_corners=False)
        return y


class FusionHead(nn.Module):
    """Fuse concatenated branch features into a non-negative density plane."""

    def __init__(self, in_channels: int, hidden: tuple[int, int]):
        super().__init__()
        h1, h2 = hidden
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, h1, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(h1, h2, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(h2, 1, 1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class ClassScoreHead(nn.Module):
    """Per-pixel density-class scores from the pre-fusion features.

    Four 3x3 convs; the last layer emits raw scores (no activation), one
    plane per class.
    """

    def __init__(self, in_channels: int, hidden: tuple[int, ...], num_classes: int):
        super().__init__()
        layers = []
        ch = in_channels
        for h in hidden:
            layers += [nn.Conv2d(ch, h, 3, padding=1), nn.ReLU(inplace=True)]
            ch = h
        layers.append(nn.Conv2d(ch, num_classes, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class NetOutput(NamedTuple):
    density: torch.Tensor          # (B, 1, H/4, W/4), non-negative
    seg_logits: torch.Tensor | None
    sa: torch.Tensor | None        # (B, 1, H/4, W/4) in [0, 1]
    sg4: torch.Tensor | None       # (B, C4) in [0, 1]
    sg5: torch.Tensor | None       # (B, C5) in [0, 1]


class CountingNetwork(nn.Module):
    """Full pipeline from RGB image to stride-4 density map.

    Parameters are partitioned into the named groups backbone / sam / gam /
    branch_blocks / fusion / cam so that adaptation can freeze groups
    selectively. ``force_sa`` / ``force_sg`` override the attention outputs
    with ones, which must reproduce the attention-disabled configurations.
    """

    GROUPS = ("backbone", "sam", "gam", "branch_blocks", "fusion", "cam")

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.scaled
        self.backbone = VggBackbone(config)
        c3, c45 = c(256), c(512)
        branch_hidden = (c(config.branch_channels[0]), c(config.branch_channels[1]))
        branch_out = c(config.branch_out)

        if config.enable_sam:
            self.sam = SpatialAttention(c3, tuple(c(h) for h in config.sam_channels))
        else:
            self.sam = None
        if config.enable_gam:
            bottleneck = c(config.gam_bottleneck)
            self.gam4 = GlobalAttention(c45, bottleneck)
            self.gam5 = GlobalAttention(c45, bottleneck)
        else:
            self.gam4 = self.gam5 = None

        if config.enable_multiscale:
            self.branch3 = BranchBlock(c3, branch_hidden, branch_out)
            self.branch4 = BranchBlock(c45, branch_hidden, branch_out)
            self.branch5 = BranchBlock(c45, branch_hidden, branch_out)
            fused_channels = 3 * branch_out
        else:
            self.branch3 = self.branch4 = None
            self.branch5 = BranchBlock(c45, branch_hidden, branch_out)
            fused_channels = branch_out
        self.fused_channels = fused_channels

        fusion_hidden = (c(config.fusion_channels[0]), c(config.fusion_channels[1]))
        self.fusion = FusionHead(fused_channels, fusion_hidden)

        if config.with_cam:
            self.cam = ClassScoreHead(
                fused_channels,
                tuple(c(h) for h in config.cam_channels),
                NUM_DENSITY_CLASSES,
            )
        else:
            self.cam = None

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} not divisible by 32; pad first")

    def attend(self, c3, c4, c5, force_sa: bool = False, force_sg: bool = False):
        """Apply the enabled attention gates to raw backbone taps."""
        sa = sg4 = sg5 = seg_logits = None
        if self.sam is not None:
            sa, c3, seg_logits = self.sam(c3, force_ones=force_sa)
        if self.gam4 is not None:
            sg4, c4 = self.gam4(c4, force_ones=force_sg)
            sg5, c5 = self.gam5(c5, force_ones=force_sg)
        if not self.config.enable_multiscale:
            return None, None, c5, sa, sg4, sg5, seg_logits
        return c3, c4, c5, sa, sg4, sg5, seg_logits

    def branch_inputs(self, x, force_sa: bool = False, force_sg: bool = False):
        """The (possibly attention-gated) features entering each branch block.

        Returns (feat3, feat4, feat5, sa, sg4, sg5, seg_logits); feat3/feat4
        are None in the single-scale configuration.
        """
        self._check_input(x)
        c3, c4, c5 = self.backbone(x)
        return self.attend(c3, c4, c5, force_sa=force_sa, force_sg=force_sg)

    def _fuse(self, f3, f4, f5, input_hw):
        target = (input_hw[0] // 4, input_hw[1] // 4)
        if not self.config.enable_multiscale:
            return self.branch5(f5, target_hw=target)
        b3 = self.branch3(f3, target_hw=target)
        b4 = self.branch4(f4, target_hw=target)
        b5 = self.branch5(f5, target_hw=target)
        return torch.cat([b3, b4, b5], dim=1)

    def fused_features(self, x, force_sa: bool = False, force_sg: bool = False):
        """Pre-fusion branch concatenation (the class-score head's input)."""
        f3, f4, f5, *_ = self.branch_inputs(x, force_sa=force_sa, force_sg=force_sg)
        return self._fuse(f3, f4, f5, x.shape[-2:])

    def class_scores(self, x):
        """Raw per-class score planes at stride 4 (requires the cam head)."""
        if self.cam is None:
            raise RuntimeError("model was built without the class-score head")
        return self.cam(self.fused_features(x))

    def forward(self, x, force_sa: bool = False, force_sg: bool = False) -> NetOutput:
        f3, f4, f5, sa, sg4, sg5, seg_logits = self.branch_inputs(
            x, force_sa=force_sa, force_sg=force_sg
        )
        fused = self._fuse(f3, f4, f5, x.shape[-2:])
        density = self.fusion(fused)
        return NetOutput(density, seg_logits, sa, sg4, sg5)

    def group_of(self, param_name: str) -> str:
        top = param_name.split(".", 1)[0]
        return {
            "backbone": "backbone",
            "sam": "sam",
            "gam4": "gam",
            "gam5": "gam",
            "branch3": "branch_blocks",
            "branch4": "branch_blocks",
            "branch5": "branch_blocks",
            "fusion": "fusion",
            "cam": "cam",
        }[top]

    def parameter_groups(self) -> dict[str, list[str]]:
        """Total, disjoint partition of parameter names into the named groups."""
        groups: dict[str, list[str]] = {g: [] for g in self.GROUPS}
        for name, _ in self.named_parameters():
            groups[self.group_of(name)].append(name)
        return groups

    def group_parameters(self, group: str):
        return [p for n, p in self.named_parameters() if self.group_of(n) == group]

    def group_checksums(self) -> dict[str, str]:
        """SHA-256 of each group's raw parameter bytes (freeze-contract probe)."""
        hashes = {g: hashlib.sha256() for g in self.GROUPS}
        for name, p in sorted(self.named_parameters()):
            h = hashes[self.group_of(name)]
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return {g: h.hexdigest() for g, h in hashes.items()}


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


def deterministic_requested() -> bool:
    """Whether HACCN_DETERMINISTIC=1 forces deterministic mode."""
    return os.environ.get("HACCN_DETERMINISTIC", "") == "1"


def apply_determinism() -> None:
    if deterministic_requested():
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def build_model(config: ModelConfig, seed: int = 0) -> CountingNetwork:
    """Deterministically initialized network (random init; no downloads)."""
    seed_everything(seed)
    model = CountingNetwork(config)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
    # Start the density head near zero with its ReLU active: a large first
    # prediction produces huge squared-error steps that can push the final
    # pre-activations all-negative and permanently kill the output.
    final = model.fusion.net[-2]
    with torch.no_grad():
        final.weight *= 0.01
        final.bias.fill_(0.01)
    return model


def save_checkpoint(path, model: CountingNetwork) -> None:
    """Single-file archive: config plus named parameter tensors."""
    torch.save(
        {"format": "crowdcount-checkpoint", "version": 1,
         "config": asdict(model.config), "state": model.state_dict()},
        path,
    )


def load_checkpoint(path) -> CountingNetwork:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "crowdcount-checkpoint":
        raise ValueError(f"{path}: not a model checkpoint")
    cfg_dict = dict(payload["config"])
    for k in ("sam_channels", "branch_channels", "fusion_channels", "cam_channels"):
        cfg_dict[k] = tuple(cfg_dict[k])
    config = ModelConfig(**cfg_dict)
    model = CountingNetwork(config)
    state = payload["state"]
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    got = {k: tuple(v.shape) for k, v in state.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        shapes = sorted(k for k in expected.keys() & got.keys() if expected[k] != got[k])
        raise ValueError(
            f"{path}: checkpoint does not match its config "
            f"(missing={missing}, unexpected={extra}, shape-mismatch={shapes})"
        )
    model.load_state_dict(state)
    return model
