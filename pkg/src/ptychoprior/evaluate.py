"""Scoring, image dumps and the overlap/noise/regularization sweep harness."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .core import DimensionError, Rng, as_real_field
from .epie import EpieConfig, epie_reconstruct, object_phase
from .recon import ReconConfig, reconstruct
from .sim import NoiseModel, make_phantom_dataset, make_probe, make_raster, simulate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def kernel(self) -> np.ndarray:
        """Normalized 1D Gaussian; the 2D window is its outer product."""
        r = np.arange(self.window) - (self.window - 1) / 2.0
        g = np.exp(-(r**2) / (2 * self.sigma**2))
        return g / g.sum()

    def describe(self) -> str:
        return (f"ssim window={self.window} gaussian sigma={self.sigma} K1={self.k1} "
                f"K2={self.k2} L={self.dynamic_range} valid-mode phase-aligned")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")


def align_phase(recon, truth) -> np.ndarray:
    """Remove the global phase offset: ``recon - mean(recon - truth)``."""
    recon, truth = as_real_field(recon), as_real_field(truth)
    _same_shape(recon, truth)
    return recon - np.mean(recon - truth)


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    w = len(g)
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    lo = w // 2
    return out[lo : img.shape[0] - (w - 1 - lo), lo : img.shape[1] - (w - 1 - lo)]


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean local SSIM over all fully-contained Gaussian windows."""
    a, b = as_real_field(a), as_real_field(b)
    _same_shape(a, b)
    if min(a.shape) < cfg.window:
        raise DimensionError(f"image {a.shape} smaller than the {cfg.window}px window")
    g = cfg.kernel()
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def dump_image(f, path) -> None:
    """Write ``f`` (clamped to [0, 1]) as an 8-bit binary PGM, rounding half up."""
    f = np.clip(as_real_field(f), 0.0, 1.0)
    h, w = f.shape
    payload = np.floor(f * 255.0 + 0.5).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + payload.tobytes())


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

METHODS = ("epie", "proposed", "proposed_reg")
CSV_COLUMNS = ["overlap", "sigma", "method", "lambda1", "lambda2", "seed", "ssim",
               "wall_seconds", "status"]


@dataclass
class SweepSpec:
    overlaps: list[float] = field(default_factory=lambda: [0.75, 0.5, 0.25, 0.0, -0.5])
    sigmas: list[float] = field(default_factory=lambda: [0.0, 0.2, 0.5, 2.0, 5.0])
    methods: list[str] = field(default_factory=lambda: ["epie", "proposed", "proposed_reg"])
    seeds: list[int] = field(default_factory=lambda: [0])
    lambda1: list[float] = field(default_factory=lambda: [3e-3])
    lambda2: list[float] = field(default_factory=lambda: [1e-4])
    object_size: int = 128
    probe_size: int = 32
    probe_diam: int = 32
    defocus: float = 3.0
    phantom_seed: int = 9001
    epie_iters: int = 200
    latent_steps: int = 1000
    total_steps: int = 5600
    stage_len: int = 800
    workers: int = 1

    def __post_init__(self):
        for name in ("overlaps", "sigmas", "methods", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"sweep {name} must be nonempty")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")

    def step_for(self, overlap: float) -> int:
        step = round(self.probe_size * (1.0 - overlap))
        if step < 1:
            raise ValueError(f"overlap {overlap} gives no positive step")
        return step

    def cells(self):
        for overlap in self.overlaps:
            for sigma in self.sigmas:
                for method in self.methods:
                    grid = ([(l1, l2) for l1 in self.lambda1 for l2 in self.lambda2]
                            if method == "proposed_reg" else [(0.0, 0.0)])
                    for l1, l2 in grid:
                        for seed in self.seeds:
                            yield overlap, sigma, method, l1, l2, seed


_LIST_KEYS = {"overlaps": float, "sigmas": float, "methods": str, "seeds": int,
              "lambda1": float, "lambda2": float}


def parse_sweep_spec(text: str) -> SweepSpec:
    """Parse flat ``key=value`` lines; list values are comma separated."""
    kwargs = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in _LIST_KEYS:
            kwargs[key] = [_LIST_KEYS[key](v) for v in value.split(",") if v.strip()]
        elif key in SweepSpec.__dataclass_fields__:
            ftype = SweepSpec.__dataclass_fields__[key].type
            kwargs[key] = float(value) if ftype == "float" else int(value)
        else:
            raise ValueError(f"unknown sweep key {key!r}")
    return SweepSpec(**kwargs)


def _fmt(x: float) -> str:
    return repr(float(x))


def run_cell(spec: SweepSpec, cell, gan, out_dir: Path | None = None) -> dict:
    overlap, sigma, method, l1, l2, seed = cell
    row = {"overlap": _fmt(overlap), "sigma": _fmt(sigma), "method": method,
           "lambda1": _fmt(l1), "lambda2": _fmt(l2), "seed": str(seed)}
    start = time.perf_counter()
    try:
        N, M = spec.object_size, spec.probe_size
        phantom = make_phantom_dataset(seed + 1, N, Rng(spec.phantom_seed))[seed]
        probe = make_probe(M, spec.probe_diam, spec.defocus)
        pattern = make_raster(N, M, spec.step_for(overlap))
        stack = simulate(phantom, probe, pattern, NoiseModel(sigma), Rng(spec.phantom_seed).child(seed))
        if method == "epie":
            x = epie_reconstruct(stack, probe, EpieConfig(iterations=spec.epie_iters, seed=seed))
            phase = object_phase(x)
        else:
            cfg = ReconConfig(lambda1=l1, lambda2=l2, seed=seed, latent_steps=spec.latent_steps,
                              total_steps=spec.total_steps, steps_per_stage=spec.stage_len)
            phase = reconstruct(stack, probe, gan, cfg).phase
        aligned = align_phase(phase, phantom.phase)
        score = ssim(aligned, phantom.phase)
        row["ssim"] = _fmt(score)
        row["status"] = "ok"
        if out_dir is not None:
            tag = f"ov{overlap:+.2f}_s{sigma:g}_{method}_l{l1:g}_{l2:g}_seed{seed}"
            dump_image(aligned, out_dir / f"{tag}.pgm")
            dump_image(phantom.phase, out_dir / f"truth_seed{seed}.pgm")
    except Exception as exc:  # a failed cell must not abort the sweep
        log.exception("sweep cell %s failed", cell)
        row["ssim"] = "nan"
        row["status"] = f"error: {type(exc).__name__}: {exc}".replace(",", ";").replace("\n", " ")
    row["wall_seconds"] = f"{time.perf_counter() - start:.3f}"
    return row


def run_sweep(spec: SweepSpec, gan, out=None, timing: bool = True) -> list[dict]:
    """Run every cell; rows come back in spec order whatever the completion order."""
    out_dir = Path(out) if out is not None else None
    if out_dir is not None:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    cells = list(spec.cells())
    img_dir = out_dir / "images" if out_dir is not None else None
    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            rows = list(pool.map(lambda c: run_cell(spec, c, gan, img_dir), cells))
    else:
        rows = [run_cell(spec, c, gan, img_dir) for c in cells]
    if not timing:
        for row in rows:
            row["wall_seconds"] = "0"
    if out_dir is not None:
        write_csv(rows, out_dir / "results.csv")
    return rows


def write_csv(rows: list[dict], path, cfg: SsimConfig = SsimConfig()) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {cfg.describe()}\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _key(v) -> str:
    if isinstance(v, str):
        return v
    return str(v) if isinstance(v, int) else _fmt(v)


def median_ssim(rows, **match) -> float:
    vals = [float(r["ssim"]) for r in rows if all(r[k] == _key(v) for k, v in match.items())]
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.median(vals)) if vals else math.nan
