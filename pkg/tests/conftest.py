import numpy as np
import pytest
import torch

from wavereprog.backbone import Res12Config, build_res12
from wavereprog.degradations import parse_spec, synth_dataset, write_toy_images

torch.set_num_threads(1)

TINY = dict(trunk_width=8, n_blocks=2, block_width=4)


@pytest.fixture
def tiny_config():
    return Res12Config(**TINY)


@pytest.fixture
def tiny_backbone(tiny_config):
    return build_res12(tiny_config, "xavier-normal", seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_clean(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy") / "clean"
    write_toy_images(d, 6, 32, seed=3)
    return d


@pytest.fixture(scope="session")
def toy_sets(toy_clean, tmp_path_factory):
    """One manifest per degradation kind, 6 pairs of 32x32 images each."""
    root = tmp_path_factory.mktemp("sets")
    return {kind: synth_dataset(toy_clean, [parse_spec(kind)], root / kind, seed=7)
            for kind in ("lr", "rain", "noise", "blur", "haze")}


ACCEPTANCE_LINES = []


def record_acceptance(number, title, passed, detail, seconds):
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {title} | {detail} | {seconds:.1f}s"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
