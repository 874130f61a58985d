"""Reprogrammed restoration model and patch-tiled inference."""
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneHandle, build_backbone, set_frozen
from .errors import ConfigError
from .output_transform import OutputTransform
from .wave_transforms import InputTransform

WAVE_COMPONENTS = ("both", "real", "imag", "amplitude", "phase", "amplitude-phase")

# (first slot, second slot) fed through the backbone; None means a zero map.
_SLOTS = {
    "both": ("real", "imag"),
    "real": ("real", None),
    "imag": (None, "imag"),
    "amplitude": ("amplitude", None),
    "phase": (None, "phase"),
    "amplitude-phase": ("amplitude", "phase"),
}


class ReprogramModel(nn.Module):
    """Input transform -> backbone (twice) -> output transform.

    Only the two transforms are trainable unless the backbone is unfrozen.
    """

    def __init__(self, backbone: BackboneHandle, patch_size=120, n_mlp=2,
                 wave_components="both", transform_init="kaiming-uniform", bias=True,
                 gate_source="fused", seed=0):
        super().__init__()
        if wave_components not in WAVE_COMPONENTS:
            raise ConfigError(
                f"wave_components must be one of {', '.join(WAVE_COMPONENTS)}, "
                f"got {wave_components!r}"
            )
        gen = torch.Generator().manual_seed(int(seed))
        self.backbone = backbone
        self.input_transform = InputTransform(3, bias, transform_init, gen)
        self.output_transform = OutputTransform(patch_size, n_mlp, 3, bias, transform_init,
                                                gate_source, gen)
        self.wave_components = wave_components
        self.settings = {
            "patch_size": patch_size,
            "n_mlp": n_mlp,
            "wave_components": wave_components,
            "transform_init": transform_init,
            "bias": bias,
            "gate_source": gate_source,
            "seed": seed,
        }

    @property
    def patch_size(self):
        return self.output_transform.patch_size

    def transform_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("backbone.")]

    def trainable_parameters(self):
        params = self.transform_parameters()
        if not self.backbone.frozen:
            params += list(self.backbone.parameters())
        return params

    def transform_state(self):
        return {k: v for k, v in self.state_dict().items() if not k.startswith("backbone.")}

    def restore_components(self, wave):
        first, second = _SLOTS[self.wave_components]
        maps = [getattr(wave, name) if name else None for name in (first, second)]
        present = [m for m in maps if m is not None]
        restored = self.backbone(torch.cat(present, dim=0))
        parts = iter(restored.split(wave.real.shape[0], dim=0))
        return [next(parts) if m is not None else torch.zeros_like(wave.real) for m in maps]

    def forward(self, image, clamp=True, resize_tokens=False):
        squeeze = image.dim() == 3
        if squeeze:
            image = image[None]
        wave = self.input_transform(image)
        real_r, imag_r = self.restore_components(wave)
        out = self.output_transform(real_r, imag_r, image, clamp, resize_tokens)
        return out[0] if squeeze else out


def build_model(backbone=None, *, backbone_name="res12", backbone_config=None,
                backbone_init="kaiming-uniform", backbone_seed=0, frozen=True, **settings):
    if backbone is None:
        backbone = build_backbone(backbone_name, backbone_config, backbone_init, backbone_seed)
    set_frozen(backbone, frozen)
    return ReprogramModel(backbone, **settings)


@torch.no_grad()
def close_gate(model: ReprogramModel, logit=-20.0):
    """Make the model pass its input through unchanged (gate ~ 0)."""
    model.output_transform.gate_fc.weight.zero_()
    model.output_transform.gate_fc.bias.fill_(logit)
    return model


def _tile_starts(n, p, stride):
    if n <= p:
        return [0]
    starts = list(range(0, n - p, stride))
    starts.append(n - p)
    return starts


def _ramp(p, overlap, dtype):
    i = torch.arange(p, dtype=dtype)
    r = torch.minimum((i + 1) / (overlap + 1), (p - i) / (overlap + 1))
    return r.clamp(max=1.0)


def _pad_to(x, h, w):
    """Reflect-pad (repeatedly, for very small inputs) on the bottom/right."""
    while x.shape[-2] < h or x.shape[-1] < w:
        ph = min(h - x.shape[-2], x.shape[-2] - 1)
        pw = min(w - x.shape[-1], x.shape[-1] - 1)
        if ph <= 0 and pw <= 0:
            return F.pad(x, (0, w - x.shape[-1], 0, h - x.shape[-2]), mode="replicate")
        x = F.pad(x, (0, max(pw, 0), 0, max(ph, 0)), mode="reflect")
    return x


@torch.no_grad()
def restore(model, image, tiling=True, overlap=16, tile_batch=16):
    """Run ``model`` on an arbitrarily sized image.

    Images are cut into overlapping patch-sized tiles whose outputs are blended
    with linear ramps; inputs smaller than a patch are reflect-padded and the
    result cropped back. With ``tiling=False`` the token weights are resized
    bilinearly to the image instead.
    """
    squeeze = image.dim() == 3
    x = image[None] if squeeze else image
    ph, pw = getattr(model, "patch_size", (None, None))
    if ph is None or tuple(x.shape[-2:]) == (ph, pw):
        out = model(x)
    elif not tiling:
        out = model(x, resize_tokens=True)
    else:
        out = torch.stack([_restore_tiled(model, xi, ph, pw, overlap, tile_batch) for xi in x])
    return out[0] if squeeze else out


def _restore_tiled(model, x, ph, pw, overlap, tile_batch):
    if not 0 <= overlap < min(ph, pw):
        raise ConfigError(f"tile overlap must be in [0, {min(ph, pw)}) for patch {ph}x{pw}, "
                          f"got {overlap}")
    H, W = x.shape[-2:]
    xp = _pad_to(x, max(H, ph), max(W, pw))
    Hp, Wp = xp.shape[-2:]
    ys = _tile_starts(Hp, ph, ph - overlap)
    xs = _tile_starts(Wp, pw, pw - overlap)
    coords = [(y, x0) for y in ys for x0 in xs]
    weight = _ramp(ph, overlap, x.dtype)[:, None] * _ramp(pw, overlap, x.dtype)[None, :]
    acc = torch.zeros_like(xp)
    norm = torch.zeros(Hp, Wp, dtype=x.dtype)
    for k in range(0, len(coords), tile_batch):
        chunk = coords[k:k + tile_batch]
        tiles = torch.stack([xp[:, y:y + ph, x0:x0 + pw] for y, x0 in chunk])
        outs = model(tiles)
        for (y, x0), o in zip(chunk, outs):
            acc[:, y:y + ph, x0:x0 + pw] += o * weight
            norm[y:y + ph, x0:x0 + pw] += weight
    return (acc / norm)[:, :H, :W]
