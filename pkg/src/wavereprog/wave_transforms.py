"""Input transform: per-pixel amplitude/phase estimation and Euler split.

An image ``x`` is mapped to a signed amplitude ``z = Wa x + ba`` and a phase
``theta = Wp x + bp`` (both per-pixel channel mixes), and then represented by
the pair ``(z cos theta, z sin theta)`` so that no complex arithmetic is needed
downstream. Negative amplitudes are left as they are: a sign flip is the same
as a half-turn of the phase, so no absolute value is taken.
"""
from dataclasses import dataclass

import torch
from torch import nn

from .errors import DimensionError
from .init import check_init_method, init_weight_


def channel_fc(x, weight, bias=None):
    """Apply ``weight @ x[p] + bias`` at every pixel ``p``.

    ``x`` is ``(..., C_in, H, W)``; ``weight`` is ``(C_out, C_in)``.
    """
    if x.dim() < 3:
        raise DimensionError(f"channel_fc expects (..., C, H, W), got shape {tuple(x.shape)}")
    c_in = x.shape[-3]
    if weight.shape[1] != c_in:
        raise DimensionError(
            f"channel_fc: weight expects {weight.shape[1]} input channels, got {c_in}"
        )
    out = torch.einsum("oc,...chw->...ohw", weight, x)
    if bias is not None:
        out = out + bias[:, None, None]
    return out


class ChannelFC(nn.Module):
    """Learnable per-pixel linear map across channels (a 1x1 receptive field)."""

    def __init__(self, in_channels, out_channels, bias=True, init="kaiming-uniform",
                 generator=None):
        super().__init__()
        check_init_method(init)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels))
        init_weight_(self.weight, init, generator)
        if bias:
            self.bias = nn.Parameter(torch.zeros(out_channels))
        else:
            self.register_parameter("bias", None)

    def forward(self, x):
        return channel_fc(x, self.weight, self.bias)

    def extra_repr(self):
        return f"{self.in_channels}, {self.out_channels}, bias={self.bias is not None}"


@dataclass(frozen=True)
class WaveRepresentation:
    real: torch.Tensor
    imag: torch.Tensor
    amplitude: torch.Tensor
    phase: torch.Tensor


def estimate_amplitude(image, w_amp: ChannelFC):
    return w_amp(image)


def estimate_phase(image, w_phase: ChannelFC):
    """Phase in radians; deliberately not wrapped into [-pi, pi)."""
    return w_phase(image)


def euler_decompose(amplitude, phase):
    if amplitude.shape != phase.shape:
        raise DimensionError(
            f"amplitude shape {tuple(amplitude.shape)} != phase shape {tuple(phase.shape)}"
        )
    return WaveRepresentation(
        real=amplitude * torch.cos(phase),
        imag=amplitude * torch.sin(phase),
        amplitude=amplitude,
        phase=phase,
    )


class InputTransform(nn.Module):
    """Maps a 3-channel image to its real/imaginary wave maps."""

    def __init__(self, channels=3, bias=True, init="kaiming-uniform", generator=None):
        super().__init__()
        self.amplitude_fc = ChannelFC(channels, channels, bias, init, generator)
        self.phase_fc = ChannelFC(channels, channels, bias, init, generator)

    def forward(self, image):
        if image.shape[-3] != self.amplitude_fc.in_channels:
            raise DimensionError(
                f"input transform expects {self.amplitude_fc.in_channels} channels, "
                f"got {image.shape[-3]}"
            )
        amplitude = estimate_amplitude(image, self.amplitude_fc)
        phase = estimate_phase(image, self.phase_fc)
        return euler_decompose(amplitude, phase)


def input_transform(image, params: InputTransform):
    return params(image)
