"""Weight initializers selectable by name."""
import torch
from torch import nn

from .errors import ConfigError

INIT_METHODS = ("xavier-normal", "xavier-uniform", "kaiming-normal", "kaiming-uniform")


def check_init_method(name):
    if name not in INIT_METHODS:
        raise ConfigError(
            f"unknown init method {name!r}; valid names: {', '.join(INIT_METHODS)}"
        )
    return name


@torch.no_grad()
def init_weight_(weight, method, generator=None):
    """Fill ``weight`` in place. Kaiming variants use fan-in with ReLU gain."""
    check_init_method(method)
    if method == "xavier-normal":
        return nn.init.xavier_normal_(weight, generator=generator)
    if method == "xavier-uniform":
        return nn.init.xavier_uniform_(weight, generator=generator)
    if method == "kaiming-normal":
        return nn.init.kaiming_normal_(weight, nonlinearity="relu", generator=generator)
    return nn.init.kaiming_uniform_(weight, nonlinearity="relu", generator=generator)
