"""Object-only ePIE baseline with a known, fixed probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError, Rng, fft2, ifft2
from .sim import DiffractionStack, Probe

MODULUS_FLOOR = 1e-12


class DivergedError(RuntimeError):
    pass


@dataclass
class EpieConfig:
    alpha: float = 1.0
    iterations: int = 200
    init: str = "flat"  # "flat" or "random"
    seed: int = 0
    shuffle_positions: bool = True

    def __post_init__(self):
        if not 0 < self.alpha <= 2:
            raise ValueError(f"alpha must lie in (0, 2], got {self.alpha}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.init not in ("flat", "random"):
            raise ValueError(f"unknown init {self.init!r}")


def modulus_projection(Psi: np.ndarray, measured: np.ndarray) -> np.ndarray:
    """Replace the Fourier modulus of ``Psi`` by ``sqrt(measured)``, keep its phase."""
    mag = np.maximum(np.abs(Psi), MODULUS_FLOOR)
    return np.sqrt(np.maximum(measured, 0.0)) * Psi / mag


def _initial_object(N: int, cfg: EpieConfig, rng: Rng) -> np.ndarray:
    if cfg.init == "flat":
        return np.ones((N, N), dtype=np.complex128)
    return np.exp(1j * rng.uniform(0.0, 1.0, size=(N, N)))


def epie_reconstruct(
    stack: DiffractionStack, P: Probe, cfg: EpieConfig, x0: np.ndarray | None = None
) -> np.ndarray:
    pat = stack.pattern
    if len(pat.positions) == 0:
        raise DimensionError("empty scan pattern")
    probe = P.field
    M = probe.shape[0]
    if M != pat.probe_size or stack.frames.shape[1:] != (M, M):
        raise DimensionError(f"probe {probe.shape} inconsistent with frames {stack.frames.shape}")

    rng = Rng(cfg.seed)
    N = pat.object_size
    x = np.array(x0, dtype=np.complex128) if x0 is not None else _initial_object(N, cfg, rng)
    weight = cfg.alpha * np.conj(probe) / np.max(np.abs(probe) ** 2)
    order = np.arange(len(pat.positions))

    for epoch in range(cfg.iterations):
        if cfg.shuffle_positions:
            order = rng.permutation(len(pat.positions))
        for i in order:
            r, c = pat.positions[i]
            view = x[r : r + M, c : c + M]
            psi = probe * view
            psi_new = ifft2(modulus_projection(fft2(psi), stack.frames[i]))
            view += weight * (psi_new - psi)
        if not np.all(np.isfinite(x)):
            raise DivergedError(f"ePIE diverged at epoch {epoch}")
    return x


def l1_amplitude_loss(stack: DiffractionStack, P: Probe, x: np.ndarray) -> float:
    """Sum over positions of the L1 distance between measured and modeled intensities."""
    probe = P.field
    M = probe.shape[0]
    if x.shape != (stack.pattern.object_size,) * 2:
        raise DimensionError(f"object {x.shape} does not match pattern size")
    total = 0.0
    for d, (r, c) in zip(stack.frames, stack.pattern.positions):
        model = np.abs(fft2(probe * x[r : r + M, c : c + M])) ** 2
        total += float(np.sum(np.abs(d - model)))
    return total


def object_phase(x: np.ndarray) -> np.ndarray:
    """Phase image of ``x`` unwrapped around the phase of its mean."""
    ref = np.angle(np.mean(x))
    return np.angle(x * np.exp(-1j * ref)) + ref
