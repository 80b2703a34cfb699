"""Small generator/discriminator pair trained on the procedural phantom family."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import nn
from .core import DimensionError, Rng
from .sim import Phantom, make_phantom_dataset

log = logging.getLogger(__name__)

LATENT_DIM = 64
GEN_CHANNELS = (32, 32, 16, 16, 8)
DISC_CHANNELS = (1, 8, 16, 32, 32)
# Keeps float32 outputs strictly inside (0, 1) even where the sigmoid saturates.
OUTPUT_MARGIN = 1e-6


class _Dense(torch.nn.Module):
    def __init__(self, n_in, n_out, gen, dtype):
        super().__init__()
        w = torch.randn(n_in, n_out, generator=gen, dtype=dtype) * math.sqrt(1.0 / n_in)
        self.weight = torch.nn.Parameter(w)
        self.bias = torch.nn.Parameter(torch.zeros(n_out, dtype=dtype))

    def forward(self, x):
        return nn.matmul(x, self.weight) + self.bias


class _Conv(torch.nn.Module):
    def __init__(self, c_in, c_out, gen, dtype, gain=2.0):
        super().__init__()
        w = torch.randn(c_out, c_in, 3, 3, generator=gen, dtype=dtype)
        self.weight = torch.nn.Parameter(w * math.sqrt(gain / (9 * c_in)))
        self.bias = torch.nn.Parameter(torch.zeros(c_out, dtype=dtype))

    def forward(self, x):
        return nn.conv2d(x, self.weight, self.bias)


class GeneratorNet(nn.LayeredNet):
    """Latent (k=64) -> phase image in (0, 1), 6 trainable layers.

    Layer 0 is the dense projection to a 32x8x8 map, layers 1-4 are
    upsample/conv/leaky-ReLU blocks and layer 5 is the output convolution.
    """

    def __init__(self, image_size: int = 128, latent_dim: int = LATENT_DIM, seed: int = 0,
                 dtype=torch.float32):
        super().__init__()
        if image_size % 16 or image_size < 16:
            raise DimensionError(f"generator image size must be a multiple of 16, got {image_size}")
        gen = torch.Generator().manual_seed(seed)
        self.image_size = image_size
        self.latent_dim = latent_dim
        self.base = image_size // 16
        c = GEN_CHANNELS
        layers = [_Dense(latent_dim, c[0] * self.base * self.base, gen, dtype)]
        layers += [_Conv(c[i], c[i + 1], gen, dtype) for i in range(4)]
        layers.append(_Conv(c[-1], 1, gen, dtype, gain=1.0))
        self.layers = torch.nn.ModuleList(layers)

    def forward(self, z):
        if z.shape[-1] != self.latent_dim:
            raise DimensionError(f"latent length {z.shape[-1]} != {self.latent_dim}")
        h = self.layers[0](z.reshape(-1, self.latent_dim))
        h = h.reshape(-1, GEN_CHANNELS[0], self.base, self.base)
        for block in self.layers[1:5]:
            h = nn.leaky_relu(block(nn.upsample_nearest(h)))
        return OUTPUT_MARGIN + (1.0 - 2.0 * OUTPUT_MARGIN) * nn.sigmoid(self.layers[5](h))

    def arch(self) -> str:
        return f"G(k={self.latent_dim},N={self.image_size},ch={'-'.join(map(str, GEN_CHANNELS))})"


class DiscriminatorNet(nn.LayeredNet):
    """(B, 1, N, N) image -> (B,) logits."""

    def __init__(self, image_size: int = 128, seed: int = 1, dtype=torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.image_size = image_size
        c = DISC_CHANNELS
        layers = [_Conv(c[i], c[i + 1], gen, dtype) for i in range(4)]
        side = image_size // 16
        layers.append(_Dense(c[-1] * side * side, 1, gen, dtype))
        self.layers = torch.nn.ModuleList(layers)

    def forward(self, x):
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise DimensionError(
                f"discriminator expects {self.image_size}x{self.image_size}, got {tuple(x.shape)}"
            )
        h = x.reshape(-1, 1, self.image_size, self.image_size)
        for block in self.layers[:4]:
            h = nn.avgpool(nn.leaky_relu(block(h)))
        return self.layers[4](h.flatten(1)).reshape(-1)

    def arch(self) -> str:
        return f"D(N={self.image_size},ch={'-'.join(map(str, DISC_CHANNELS))})"


def generate(G: GeneratorNet, z) -> np.ndarray:
    z = torch.as_tensor(z, dtype=next(G.parameters()).dtype)
    if z.numel() != G.latent_dim:
        raise DimensionError(f"latent length {z.numel()} != {G.latent_dim}")
    with torch.no_grad():
        return G(z.reshape(1, -1))[0, 0].double().numpy()


def discriminator_score(D: DiscriminatorNet, image) -> torch.Tensor:
    """Probability that ``image`` belongs to the training domain (differentiable)."""
    if not torch.is_tensor(image):
        image = torch.as_tensor(np.asarray(image), dtype=next(D.parameters()).dtype)
    return nn.sigmoid(D(image))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class GanTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    seed: int = 11
    dataset_size: int = 2000
    image_size: int = 128

    def __post_init__(self):
        for name in ("batch_size", "dataset_size", "image_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("epochs must be >= 0 and learning rates positive")


def training_set(cfg: GanTrainConfig) -> list[Phantom]:
    """The phantoms a default run trains on, drawn from ``Rng(cfg.seed)``."""
    return make_phantom_dataset(cfg.dataset_size, cfg.image_size, Rng(cfg.seed))


@dataclass
class GanTrainResult:
    G: GeneratorNet
    D: DiscriminatorNet
    log: list[tuple[int, float, float]] = field(default_factory=list)


class GanDivergedError(RuntimeError):
    pass


def train_gan(dataset: list[Phantom], cfg: GanTrainConfig) -> GanTrainResult:
    """Alternating non-saturating GAN updates (one D step, then one G step per batch)."""
    N = cfg.image_size
    images = np.stack([ph.phase for ph in dataset]).astype(np.float32)
    if images.shape[1:] != (N, N):
        raise DimensionError(f"dataset images {images.shape[1:]} != {(N, N)}")
    G = GeneratorNet(N, seed=cfg.seed)
    D = DiscriminatorNet(N, seed=cfg.seed + 1)
    opt_g = nn.Optimizer(G.parameters(), "adam", cfg.lr_g)
    opt_d = nn.Optimizer(D.parameters(), "adam", cfg.lr_d)
    rng = Rng(cfg.seed)
    zgen = torch.Generator().manual_seed(cfg.seed + 2)
    data = torch.from_numpy(images).unsqueeze(1)
    history = []
    step_no = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            real = data[order[start : start + cfg.batch_size]]
            z = torch.randn(cfg.batch_size, G.latent_dim, generator=zgen)

            fake = G(z)
            d_loss = F.softplus(-D(real)).mean() + F.softplus(D(fake.detach())).mean()
            opt_d.zero_grad()
            nn.backward(d_loss)
            opt_d.step()

            g_loss = F.softplus(-D(fake)).mean()
            opt_g.zero_grad()
            nn.backward(g_loss)
            opt_g.step()

            dl, gl = d_loss.item(), g_loss.item()
            if not (math.isfinite(dl) and math.isfinite(gl)):
                raise GanDivergedError(f"non-finite GAN loss at step {step_no}")
            history.append((step_no, dl, gl))
            step_no += 1
        if history:
            log.info("epoch %d  d_loss %.4f  g_loss %.4f", epoch, history[-1][1], history[-1][2])
    opt_d.zero_grad()
    opt_g.zero_grad()
    return GanTrainResult(G=G, D=D, log=history)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def arch_hash(G: GeneratorNet, D: DiscriminatorNet) -> str:
    return hashlib.sha256(f"{G.arch()};{D.arch()}".encode()).hexdigest()[:16]


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".arch")


def save_checkpoint(path, G: GeneratorNet, D: DiscriminatorNet) -> None:
    path = Path(path)
    named = {f"G.{k}": v for k, v in G.state_dict().items()}
    named.update({f"D.{k}": v for k, v in D.state_dict().items()})
    nn.save_tensors(path, named)
    _sidecar(path).write_text(
        f"arch_hash={arch_hash(G, D)}\nimage_size={G.image_size}\nlatent_dim={G.latent_dim}\n"
    )


class ArchitectureMismatch(ValueError):
    pass


def load_checkpoint(path, dtype=torch.float32) -> tuple[GeneratorNet, DiscriminatorNet]:
    path = Path(path)
    meta = dict(
        line.split("=", 1) for line in _sidecar(path).read_text().splitlines() if "=" in line
    )
    N = int(meta["image_size"])
    G = GeneratorNet(N, latent_dim=int(meta["latent_dim"]), dtype=dtype)
    D = DiscriminatorNet(N, dtype=dtype)
    if meta["arch_hash"] != arch_hash(G, D):
        raise ArchitectureMismatch(
            f"checkpoint architecture {meta['arch_hash']} != this build's {arch_hash(G, D)}"
        )
    tensors = load_tensors_for(path, dtype)
    G.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("G.")})
    D.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("D.")})
    return G, D


def load_tensors_for(path, dtype) -> dict[str, torch.Tensor]:
    return {k: v.to(dtype) for k, v in nn.load_tensors(path).items()}
