"""Shared fixtures.  The trained GAN is cached on disk because training takes ~30 min."""

import hashlib
import logging
import os
from dataclasses import asdict
from pathlib import Path

import pytest
import torch

from ptychoprior.gan import (
    GanTrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_gan,
    training_set,
)

CACHE_DIR = Path(os.environ.get("PTYCHOPRIOR_CACHE", Path(__file__).parents[1] / ".cache"))
torch.set_num_threads(1)


def gan_checkpoint_path(cfg: GanTrainConfig = GanTrainConfig()) -> Path:
    """Path of the default-trained checkpoint, training it first when absent."""
    key = hashlib.sha256(repr(sorted(asdict(cfg).items())).encode()).hexdigest()[:12]
    path = CACHE_DIR / f"gan_{key}.ptyfz"
    if not path.exists():
        logging.getLogger(__name__).warning("training GAN into %s (about 30 min)", path)
        CACHE_DIR.mkdir(parents=True, exist_ok=True)
        result = train_gan(training_set(cfg), cfg)
        save_checkpoint(path, result.G, result.D)
    return path


@pytest.fixture(scope="session")
def trained_gan_path():
    return gan_checkpoint_path()


@pytest.fixture(scope="session")
def trained_gan(trained_gan_path):
    return load_checkpoint(trained_gan_path)


def pytest_terminal_summary(terminalreporter):
    from _report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
