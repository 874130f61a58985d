"""Res12 restoration network and the handle used to reprogram it.

Layout (all convolutions 3x3, stride 1, padding 1, no normalization)::

    conv1 3->w0, ReLU
    conv2 w0->w1, ReLU
    conv3 w1->trunk                       (f)
    n_blocks x  h = h + conv(relu(conv(h)))     trunk->block->trunk
    conv4 trunk->trunk, + f               (long skip)
    conv5 trunk->w4, ReLU
    conv6 w4->3                           (+ input when global_residual)
"""
import hashlib
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .checkpoint import load_state_strict, read_checkpoint, write_checkpoint
from .errors import CheckpointSchemaError, ConfigError, DimensionError
from .init import INIT_METHODS, check_init_method, init_weight_

TRAINED = "trained"


@dataclass
class Res12Config:
    trunk_width: int = 64
    n_blocks: int = 12
    block_width: int = 32
    head_tail_widths: tuple = None
    global_residual: bool = True
    kernel: int = field(default=3, init=False)
    stride: int = field(default=1, init=False)
    padding: int = field(default=1, init=False)

    def __post_init__(self):
        if self.head_tail_widths is None:
            t = self.trunk_width
            self.head_tail_widths = (16, t, t, t, 32, 3)
        self.head_tail_widths = tuple(int(w) for w in self.head_tail_widths)
        self.validate()

    def validate(self):
        w = self.head_tail_widths
        if self.n_blocks < 1:
            raise ConfigError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if min(self.trunk_width, self.block_width, *w) < 1:
            raise ConfigError("all Res12 widths must be >= 1")
        if len(w) != 6:
            raise ConfigError(f"head_tail_widths needs 6 entries, got {len(w)}")
        if w[2] != self.trunk_width or w[3] != self.trunk_width:
            raise ConfigError("head_tail_widths[2] and [3] must equal trunk_width")
        if w[5] != 3:
            raise ConfigError("the last convolution must output 3 channels")

    def to_dict(self):
        d = asdict(self)
        for k in ("kernel", "stride", "padding"):
            d.pop(k)
        d["head_tail_widths"] = list(self.head_tail_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _conv(c_in, c_out):
    return nn.Conv2d(c_in, c_out, kernel_size=3, stride=1, padding=1)


class ResBlock(nn.Module):
    def __init__(self, width, inner):
        super().__init__()
        self.conv1 = _conv(width, inner)
        self.conv2 = _conv(inner, width)

    def forward(self, x):
        return x + self.conv2(torch.relu(self.conv1(x)))


class Res12(nn.Module):
    def __init__(self, cfg: Res12Config):
        super().__init__()
        self.cfg = cfg
        w = cfg.head_tail_widths
        self.conv1 = _conv(3, w[0])
        self.conv2 = _conv(w[0], w[1])
        self.conv3 = _conv(w[1], w[2])
        self.blocks = nn.Sequential(*[ResBlock(cfg.trunk_width, cfg.block_width)
                                      for _ in range(cfg.n_blocks)])
        self.conv4 = _conv(w[2], w[3])
        self.conv5 = _conv(w[3], w[4])
        self.conv6 = _conv(w[4], w[5])

    def forward(self, x):
        h = torch.relu(self.conv1(x))
        h = torch.relu(self.conv2(h))
        f = self.conv3(h)
        h = self.conv4(self.blocks(f)) + f
        h = torch.relu(self.conv5(h))
        out = self.conv6(h)
        if self.cfg.global_residual:
            out = out + x
        return out

    @property
    def receptive_radius(self):
        return 6 + 2 * self.cfg.n_blocks


def parameter_fingerprint(module: nn.Module):
    """SHA-256 over parameter names, shapes and float32 bytes."""
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        arr = p.detach().cpu().to(torch.float32).contiguous().numpy()
        h.update(name.encode())
        h.update(repr(tuple(arr.shape)).encode())
        h.update(arr.astype("<f4").tobytes())
    return h.hexdigest()


class BackboneHandle(nn.Module):
    """A restoration network plus its frozen flag and provenance.

    Anything that maps ``(B, 3, H, W)`` to ``(B, 3, H, W)`` can be wrapped,
    so alternate backbones plug into the same reprogramming pipeline.
    """

    def __init__(self, net: nn.Module, name="res12", config=None, init_method=TRAINED,
                 frozen=True):
        super().__init__()
        if init_method not in INIT_METHODS + (TRAINED,):
            raise ConfigError(f"unknown init_method {init_method!r}")
        self.net = net
        self.name = name
        self.config = config
        self.init_method = init_method
        self.frozen = False
        set_frozen(self, frozen)

    def forward(self, x):
        if x.shape[-3] != 3:
            raise DimensionError(f"backbone expects 3 channels, got {x.shape[-3]}")
        return self.net(x)

    @property
    def fingerprint(self):
        return parameter_fingerprint(self.net)

    def parameter_count(self):
        return sum(p.numel() for p in self.net.parameters())

    def describe(self):
        return {
            "name": self.name,
            "config": self.config.to_dict() if hasattr(self.config, "to_dict") else self.config,
            "init_method": self.init_method,
            "frozen": self.frozen,
        }


def set_frozen(handle: BackboneHandle, frozen: bool):
    handle.frozen = bool(frozen)
    for p in handle.net.parameters():
        p.requires_grad_(not handle.frozen)
    return handle


def forward(handle: BackboneHandle, x):
    return handle(x)


def build_res12(cfg: Res12Config = None, init_method="kaiming-uniform", seed=0, frozen=False):
    cfg = cfg or Res12Config()
    check_init_method(init_method)
    net = Res12(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            init_weight_(m.weight, init_method, gen)
            nn.init.zeros_(m.bias)
    return BackboneHandle(net, "res12", cfg, init_method, frozen)


_REGISTRY = {}


def register_backbone(name, factory):
    """Register ``factory(config=None, init_method=..., seed=...) -> nn.Module``."""
    _REGISTRY[name] = factory


def build_backbone(name="res12", config=None, init_method="kaiming-uniform", seed=0,
                   frozen=False):
    if name == "res12":
        if isinstance(config, dict):
            config = Res12Config.from_dict(config)
        return build_res12(config, init_method, seed, frozen)
    if name not in _REGISTRY:
        raise ConfigError(f"unknown backbone {name!r}; registered: res12, {', '.join(_REGISTRY)}")
    net = _REGISTRY[name](config=config, init_method=init_method, seed=seed)
    return BackboneHandle(net, name, config, init_method, frozen)


def load_backbone_state(handle: BackboneHandle, arrays: dict, prefix=""):
    """Copy ``arrays`` (name -> tensor) into ``handle.net`` with strict shape checks."""
    load_state_strict(handle.net, arrays, prefix)
    return handle


def load_pretrained(path, cfg: Res12Config = None, frozen=True):
    """Load a backbone from a checkpoint written by :func:`save_backbone` or training.

    ``cfg`` overrides the stored configuration; a mismatch raises a schema error
    naming the first offending array.
    """
    meta, arrays = read_checkpoint(path)
    info = meta.get("backbone")
    if info is None:
        raise CheckpointSchemaError(f"{path}: no backbone section in checkpoint metadata")
    name = info.get("name", "res12")
    config = cfg if cfg is not None else info.get("config")
    handle = build_backbone(name, config, init_method="kaiming-uniform", seed=0)
    load_backbone_state(handle, arrays, prefix="backbone.")
    handle.init_method = TRAINED
    return set_frozen(handle, frozen)


def save_backbone(handle: BackboneHandle, path, extra=None):
    meta = {"kind": "backbone", "backbone": handle.describe(),
            "backbone_fingerprint": handle.fingerprint}
    if extra:
        meta.update(extra)
    arrays = {"backbone." + k: v for k, v in handle.net.state_dict().items()}
    write_checkpoint(path, meta, arrays)
    return path
