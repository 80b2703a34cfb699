"""Synthetic acquisitions: probes, phase phantoms, raster scans and noisy stacks."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.draw import polygon as _fill_polygon

from .core import (
    DimensionError,
    DomainError,
    Rng,
    as_complex_field,
    as_real_field,
    fft2,
    read_field,
    write_field,
)


@dataclass
class Probe:
    field: np.ndarray
    diameter_px: int

    @property
    def size(self) -> int:
        return self.field.shape[0]


@dataclass
class ScanPattern:
    positions: list[tuple[int, int]]
    step_px: int
    probe_size: int
    object_size: int

    @property
    def overlap(self) -> float:
        return (self.probe_size - self.step_px) / self.probe_size

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class NoiseModel:
    """Poisson noise whose relative std at the peak intensity equals ``sigma``."""

    sigma: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise DomainError(f"sigma must be nonnegative, got {self.sigma}")
        if self.sigma == 0:
            self.enabled = False

    @property
    def active(self) -> bool:
        return self.enabled and self.sigma > 0


@dataclass
class Phantom:
    phase: np.ndarray
    label: str = ""


@dataclass
class DiffractionStack:
    frames: np.ndarray  # (positions, M, M) float64
    pattern: ScanPattern
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int | None = None

    def __post_init__(self):
        if len(self.frames) != len(self.pattern.positions):
            raise DimensionError(
                f"{len(self.frames)} frames for {len(self.pattern.positions)} positions"
            )


def make_object(ph: Phantom) -> np.ndarray:
    phase = as_real_field(ph.phase)
    if phase.min() < 0 or phase.max() > 1:
        raise DomainError("phantom phase must lie in [0, 1]")
    return np.exp(1j * phase)


def make_probe(M: int, diameter_px: int, defocus: float = 0.0) -> Probe:
    """Disk probe with a 2 px raised-cosine edge and quadratic (defocus) phase.

    The amplitude is 1 for ``r <= R - 2``, falls as ``cos^2`` to 0 at ``r = R``
    (``R = diameter/2``, measured from the window center) and is 0 beyond.
    The field is scaled so that its total energy is 1.
    """
    if diameter_px > M or diameter_px < 1:
        raise DimensionError(f"probe diameter {diameter_px} does not fit a {M} px window")
    radius = diameter_px / 2.0
    edge = 2.0
    c = (M - 1) / 2.0
    yy, xx = np.mgrid[0:M, 0:M]
    r = np.hypot(yy - c, xx - c)
    t = np.clip((r - (radius - edge)) / edge, 0.0, 1.0)
    amp = np.cos(0.5 * np.pi * t) ** 2
    amp[r >= radius] = 0.0
    phase = defocus * (r / radius) ** 2
    P = amp * np.exp(1j * phase)
    P /= np.sqrt(np.sum(np.abs(P) ** 2))
    return Probe(field=P, diameter_px=diameter_px)


def make_raster(N: int, M: int, step_px: int) -> ScanPattern:
    if step_px < 1:
        raise DomainError(f"step must be >= 1, got {step_px}")
    if M > N:
        raise DimensionError(f"probe window {M} larger than object {N}")
    anchors = range(0, N - M + 1, step_px)
    positions = [(r, c) for r in anchors for c in anchors]
    if not positions:
        raise DimensionError("scan pattern has no valid position")
    return ScanPattern(positions=positions, step_px=step_px, probe_size=M, object_size=N)


def exit_wave(x: np.ndarray, P: Probe | np.ndarray, pos: tuple[int, int]) -> np.ndarray:
    probe = P.field if isinstance(P, Probe) else np.asarray(P)
    M = probe.shape[0]
    r, c = pos
    if r < 0 or c < 0 or r + M > x.shape[0] or c + M > x.shape[1]:
        raise DimensionError(f"window at {pos} of size {M} leaves the {x.shape} object")
    return probe * x[r : r + M, c : c + M]


def diffract(psi: np.ndarray) -> np.ndarray:
    return np.abs(fft2(psi)) ** 2


def add_poisson_noise(d: np.ndarray, noise: NoiseModel, rng: Rng, peak: float) -> np.ndarray:
    """Scaled Poisson sample of ``d`` with ``kappa = 1 / (sigma^2 * peak)``."""
    if not noise.active:
        return d
    if peak <= 0:
        raise DomainError(f"peak intensity must be positive, got {peak}")
    kappa = 1.0 / (noise.sigma**2 * peak)
    return rng.poisson(np.asarray(d) * kappa) / kappa


def simulate(ph: Phantom, P: Probe, pat: ScanPattern, noise: NoiseModel, rng: Rng) -> DiffractionStack:
    x = make_object(ph)
    if x.shape[0] != pat.object_size or P.size != pat.probe_size:
        raise DimensionError(
            f"object {x.shape} / probe {P.size} inconsistent with pattern "
            f"({pat.object_size}, {pat.probe_size})"
        )
    clean = np.stack([diffract(exit_wave(x, P, pos)) for pos in pat.positions])
    peak = float(clean.max())
    if noise.active:
        frames = np.stack(
            [add_poisson_noise(f, noise, rng.child(i), peak) for i, f in enumerate(clean)]
        )
    else:
        frames = clean
    return DiffractionStack(frames=frames, pattern=pat, noise=noise, seed=rng.seed)


# ---------------------------------------------------------------------------
# Procedural phantom family
# ---------------------------------------------------------------------------

# Family parameters, as fractions of N where lengths are concerned.  Features
# stay clear of the border so the zero-phase background is what the probe's
# unilluminated corners see.
BLOB_COUNT = (3, 8)
BLOB_CENTER = (0.2, 0.8)
BLOB_WIDTH = (0.04, 0.09)
BLOB_HEIGHT = (0.15, 0.5)
POLY_COUNT = (1, 3)
POLY_CENTER = (0.3, 0.7)
POLY_RADIUS = (0.06, 0.14)
POLY_VERTICES = (3, 6)
POLY_LEVEL = (0.3, 0.8)


def make_phantom(N: int, rng: Rng, label: str = "") -> Phantom:
    yy, xx = np.mgrid[0:N, 0:N].astype(np.float64)
    img = np.zeros((N, N))
    for _ in range(int(rng.integers(BLOB_COUNT[0], BLOB_COUNT[1] + 1))):
        cy, cx = rng.uniform(*BLOB_CENTER, size=2) * N
        w = rng.uniform(*BLOB_WIDTH) * N
        h = rng.uniform(*BLOB_HEIGHT)
        img += h * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
    for _ in range(int(rng.integers(POLY_COUNT[0], POLY_COUNT[1] + 1))):
        cy, cx = rng.uniform(*POLY_CENTER, size=2) * N
        radius = rng.uniform(*POLY_RADIUS) * N
        nv = int(rng.integers(POLY_VERTICES[0], POLY_VERTICES[1] + 1))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=nv))
        radii = radius * rng.uniform(0.7, 1.0, size=nv)
        rows, cols = _fill_polygon(
            cy + radii * np.sin(angles), cx + radii * np.cos(angles), shape=(N, N)
        )
        img[rows, cols] = rng.uniform(*POLY_LEVEL)
    return Phantom(phase=np.clip(img, 0.0, 1.0), label=label)


def make_phantom_dataset(count: int, N: int, rng: Rng) -> list[Phantom]:
    if count < 1:
        raise DomainError("count must be >= 1")
    return [make_phantom(N, rng.child(i), label=f"blob-{rng.seed}-{i}") for i in range(count)]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_stack(stack: DiffractionStack, P: Probe, ph: Phantom | None, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pat = stack.pattern
    meta = {
        "N": pat.object_size,
        "M": pat.probe_size,
        "step_px": pat.step_px,
        "sigma": stack.noise.sigma if stack.noise.active else 0.0,
        "seed": stack.seed if stack.seed is not None else "",
        "overlap": pat.overlap,
        "count": len(pat.positions),
        "probe_diam": P.diameter_px,
    }
    (out / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    for i, frame in enumerate(stack.frames):
        write_field(out / f"frame_{i:05d}.ptyf", frame)
    write_field(out / "probe.ptyf", P.field)
    if ph is not None:
        write_field(out / "phantom.ptyf", ph.phase)
    return out


def read_meta(path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def load_stack(path) -> tuple[DiffractionStack, Probe, Phantom | None]:
    path = Path(path)
    meta = read_meta(path / "meta.txt")
    N, M, step = int(meta["N"]), int(meta["M"]), int(meta["step_px"])
    pattern = make_raster(N, M, step)
    count = int(meta["count"])
    if count != len(pattern):
        raise DimensionError(f"meta count {count} != raster size {len(pattern)}")
    frames = np.stack([read_field(path / f"frame_{i:05d}.ptyf") for i in range(count)])
    probe_field = as_complex_field(read_field(path / "probe.ptyf"))
    probe = Probe(field=probe_field, diameter_px=int(meta.get("probe_diam", M)))
    seed = int(meta["seed"]) if meta.get("seed") else None
    stack = DiffractionStack(
        frames=frames, pattern=pattern, noise=NoiseModel(float(meta["sigma"])), seed=seed
    )
    phantom = None
    if (path / "phantom.ptyf").exists():
        phantom = Phantom(phase=read_field(path / "phantom.ptyf"), label=str(path))
    return stack, probe, phantom
