"""Reprogramming frozen image-restoration networks with wave-function transforms."""
from .backbone import (BackboneHandle, Res12Config, build_backbone, build_res12,
                       load_pretrained, register_backbone, save_backbone, set_frozen)
from .degradations import (KINDS, DegradationSpec, PairManifest, degrade, load_manifest,
                           parse_spec, synth_dataset)
from .losses import LossBreakdown, LossConfig, perceptual_loss, smooth_l1, total_loss
from .model import ReprogramModel, build_model, close_gate, restore
from .output_transform import OutputTransform, output_transform, recombine, token_fc
from .training import TrainConfig, load_model, lr_at, save_model, train, train_backbone
from .wave_transforms import (ChannelFC, InputTransform, WaveRepresentation, channel_fc,
                              euler_decompose, input_transform)

from .config import load_config

__version__ = "0.1.0"
