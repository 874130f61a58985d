"""Output transform: maps restored real/imaginary maps back to an image.

Pipeline, for restored maps ``r``, ``i`` and the degraded input ``x``::

    wave  = r + i
    fused = FC_9->3([r, i, wave])
    resid = fused + x
    agg   = FC_3->3(resid)
    h     = MLP_n(...MLP_1(agg))          each MLP: token-FC, GELU, token-FC
    g     = sigmoid(FC_3->3(h))
    out   = clamp(g * fused + (1 - g) * x, 0, 1)

``gate_source`` picks what the gate blends with ``x``: ``fused`` (default),
``residual`` or ``aggregate``.
"""
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError
from .wave_transforms import ChannelFC, channel_fc

GATE_SOURCES = ("fused", "residual", "aggregate")


def token_fc(x, weight):
    """Elementwise product with a learnable ``(C, H, W)`` spatial weight map."""
    if tuple(x.shape[-3:]) != tuple(weight.shape):
        raise DimensionError(
            f"token_fc: weight is {tuple(weight.shape)} but input is {tuple(x.shape[-3:])}; "
            "tile the input to the training patch size"
        )
    return weight * x


def recombine(real_r, imag_r):
    if real_r.shape != imag_r.shape:
        raise DimensionError(
            f"recombine: real {tuple(real_r.shape)} vs imag {tuple(imag_r.shape)}"
        )
    return real_r + imag_r


class TokenFC(nn.Module):
    def __init__(self, channels, height, width):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels, height, width))

    def forward(self, x, resize=False):
        w = self.weight
        if resize and tuple(x.shape[-2:]) != tuple(w.shape[-2:]):
            w = F.interpolate(w[None], size=x.shape[-2:], mode="bilinear",
                              align_corners=False)[0]
        return token_fc(x, w)


class TokenMLP(nn.Module):
    def __init__(self, channels, height, width):
        super().__init__()
        self.fc1 = TokenFC(channels, height, width)
        self.fc2 = TokenFC(channels, height, width)

    def forward(self, x, resize=False):
        return self.fc2(F.gelu(self.fc1(x, resize)), resize)


class OutputTransform(nn.Module):
    def __init__(self, patch_size, n_mlp=2, channels=3, bias=True, init="kaiming-uniform",
                 gate_source="fused", generator=None):
        super().__init__()
        if n_mlp < 1:
            raise ConfigError(f"n_mlp must be >= 1, got {n_mlp}")
        if gate_source not in GATE_SOURCES:
            raise ConfigError(f"gate_source must be one of {GATE_SOURCES}, got {gate_source!r}")
        h, w = (patch_size, patch_size) if isinstance(patch_size, int) else patch_size
        self.patch_size = (h, w)
        self.gate_source = gate_source
        self.fuse_fc = ChannelFC(3 * channels, channels, bias, init, generator)
        self.aggregate_fc = ChannelFC(channels, channels, bias, init, generator)
        self.mlps = nn.ModuleList(TokenMLP(channels, h, w) for _ in range(n_mlp))
        self.gate_fc = ChannelFC(channels, channels, bias, init, generator)

    @property
    def n_mlp(self):
        return len(self.mlps)

    def forward(self, real_r, imag_r, image, clamp=True, resize_tokens=False):
        return output_transform(real_r, imag_r, image, self, clamp, resize_tokens)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DimensionError as exc:
        raise DimensionError(f"output_transform[{name}]: {exc}") from exc


def output_transform(real_r, imag_r, input_image, params: OutputTransform, clamp=True,
                     resize_tokens=False):
    wave = _stage("recombine", recombine, real_r, imag_r)
    if input_image.shape != wave.shape:
        raise DimensionError(
            f"output_transform[residual]: input {tuple(input_image.shape)} vs "
            f"wave {tuple(wave.shape)}"
        )
    stacked = torch.cat([real_r, imag_r, wave], dim=-3)
    fused = _stage("fuse", channel_fc, stacked, params.fuse_fc.weight, params.fuse_fc.bias)
    resid = fused + input_image
    agg = _stage("aggregate", channel_fc, resid, params.aggregate_fc.weight,
                 params.aggregate_fc.bias)
    h = agg
    for k, mlp in enumerate(params.mlps):
        h = _stage(f"mlp{k}", mlp, h, resize_tokens)
    gate = torch.sigmoid(channel_fc(h, params.gate_fc.weight, params.gate_fc.bias))
    source = {"fused": fused, "residual": resid, "aggregate": agg}[params.gate_source]
    out = gate * source + (1 - gate) * input_image
    return out.clamp(0, 1) if clamp else out
