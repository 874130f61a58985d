"""Training objective: smooth L1 plus a weighted three-stage perceptual term."""
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import vgg16

from .errors import ConfigError, DimensionError, ResourceError

EXTRACTOR_KINDS = ("fixed-random", "pretrained-vgg16")
VGG16_LAYERS = {"relu1_2": 3, "relu2_2": 8, "relu3_3": 15, "relu4_3": 22}
FIXED_RANDOM_LAYERS = ("stage1", "stage2", "stage3")
VGG16_WEIGHTS_FILE = "vgg16-397923af.pth"
CACHE_ENV = "WAVEREPROG_CACHE"


@dataclass
class LossConfig:
    lambda_p: float = 0.04
    perceptual_layers: tuple = None
    extractor_kind: str = "fixed-random"
    loss_normalization: str = "pixels"
    vgg_weights: str = None
    extractor_seed: int = 0

    def __post_init__(self):
        if self.extractor_kind not in EXTRACTOR_KINDS:
            raise ConfigError(
                f"extractor_kind must be one of {EXTRACTOR_KINDS}, got {self.extractor_kind!r}"
            )
        if self.perceptual_layers is None:
            self.perceptual_layers = (("relu1_2", "relu2_2", "relu3_3")
                                      if self.extractor_kind == "pretrained-vgg16"
                                      else FIXED_RANDOM_LAYERS)
        self.perceptual_layers = tuple(self.perceptual_layers)
        if self.lambda_p < 0:
            raise ConfigError(f"lambda_p must be >= 0, got {self.lambda_p}")
        if len(self.perceptual_layers) != 3:
            raise ConfigError(
                f"exactly three perceptual layers required, got {len(self.perceptual_layers)}"
            )
        if self.loss_normalization not in ("pixels", "elements"):
            raise ConfigError("loss_normalization must be 'pixels' or 'elements'")


@dataclass
class LossBreakdown:
    l_s: torch.Tensor
    l_p: torch.Tensor
    total: torch.Tensor


def _check_same(pred, target, what):
    if pred.shape != target.shape:
        raise DimensionError(f"{what}: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def smooth_l1(pred, target, normalization="pixels"):
    """Sum of the piecewise Huber term over channels, divided by the pixel count.

    With ``normalization="elements"`` the divisor also counts channels.
    """
    _check_same(pred, target, "smooth_l1")
    total = F.smooth_l1_loss(pred, target, reduction="sum", beta=1.0)
    n = pred.numel() if normalization == "elements" else pred.numel() // pred.shape[-3]
    return total / n


class FixedRandomExtractor(nn.Module):
    """Three frozen strided conv+ReLU stages with seeded weights.

    Used when pretrained VGG16 weights are not available; keeps tests hermetic.
    """

    def __init__(self, seed=0, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        chans = (3,) + tuple(widths)
        self.stages = nn.ModuleList()
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu", generator=gen)
                conv.bias.zero_()
            self.stages.append(conv)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        feats = []
        for conv in self.stages:
            x = torch.relu(conv(x))
            feats.append(x)
        return feats


class VGG16Extractor(nn.Module):
    _MEAN = (0.485, 0.456, 0.406)
    _STD = (0.229, 0.224, 0.225)

    def __init__(self, state_dict, layers=("relu1_2", "relu2_2", "relu3_3")):
        super().__init__()
        unknown = [name for name in layers if name not in VGG16_LAYERS]
        if unknown:
            raise ConfigError(f"unknown VGG16 layer {unknown[0]!r}; valid: {list(VGG16_LAYERS)}")
        net = vgg16(weights=None)
        net.load_state_dict(state_dict)
        self.cut = [VGG16_LAYERS[name] for name in layers]
        self.features = net.features[: max(self.cut) + 1]
        self.register_buffer("mean", torch.tensor(self._MEAN).view(3, 1, 1))
        self.register_buffer("std", torch.tensor(self._STD).view(3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.cut:
                feats.append(x)
        return feats


def _find_vgg_weights(explicit=None):
    candidates = []
    if explicit:
        candidates.append(Path(explicit))
    if os.environ.get(CACHE_ENV):
        candidates.append(Path(os.environ[CACHE_ENV]) / VGG16_WEIGHTS_FILE)
    candidates.append(Path(torch.hub.get_dir()) / "checkpoints" / VGG16_WEIGHTS_FILE)
    for path in candidates:
        if path.is_file():
            return path
    return None


def build_extractor(cfg: LossConfig):
    if cfg.extractor_kind == "fixed-random":
        return FixedRandomExtractor(cfg.extractor_seed)
    path = _find_vgg_weights(cfg.vgg_weights)
    if path is None:
        raise ResourceError(
            "pretrained VGG16 weights not found (looked at vgg_weights, "
            f"${CACHE_ENV}/{VGG16_WEIGHTS_FILE} and the torch hub cache); "
            "place the file there or set extractor_kind='fixed-random'"
        )
    return VGG16Extractor(torch.load(path, map_location="cpu", weights_only=True),
                          cfg.perceptual_layers)


def perceptual_loss(pred, target, extractor):
    """Sum over stages of the squared feature distance divided by C*H*W.

    Averaged over the batch when inputs are batched.
    """
    _check_same(pred, target, "perceptual_loss")
    fp, ft = extractor(pred), extractor(target)
    if len(fp) != 3:
        raise ConfigError(f"extractor must return 3 feature maps, got {len(fp)}")
    return sum(F.mse_loss(a, b, reduction="mean") for a, b in zip(fp, ft))


class TotalLoss(nn.Module):
    def __init__(self, cfg: LossConfig = None, extractor=None):
        super().__init__()
        self.cfg = cfg or LossConfig()
        self.extractor = extractor if extractor is not None else build_extractor(self.cfg)

    def forward(self, pred, target):
        return total_loss(pred, target, self.cfg, self.extractor)


def total_loss(pred, target, cfg: LossConfig, extractor=None):
    l_s = smooth_l1(pred, target, cfg.loss_normalization)
    l_p = perceptual_loss(pred, target, extractor if extractor is not None else build_extractor(cfg))
    return LossBreakdown(l_s, l_p, l_s + cfg.lambda_p * l_p)
