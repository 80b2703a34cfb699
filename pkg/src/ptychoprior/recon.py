"""Generator-prior reconstruction: latent fit, then progressive weight fine-tuning.

The unknown object is ``exp(j * G(z))`` with unit modulus.  The data terms
are evaluated per scan position and summed with a fixed pairwise reduction
tree, so serial and threaded evaluation give bit-identical results.
"""

from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import nn
from .core import DimensionError, Rng, write_field
from .gan import DiscriminatorNet, GeneratorNet, discriminator_score, load_checkpoint
from .sim import DiffractionStack, Probe

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
TV_EPS = 1e-12
DL_FLOOR = 1e-12
ALL_LAYERS_FROM_STAGE = 5
LOSS_KINDS = ("l1_intensity", "poisson_nll")


class ReconDivergedError(RuntimeError):
    pass


@dataclass
class ReconConfig:
    loss_kind: str = "poisson_nll"
    latent_loss_kind: str = "l1_intensity"
    lambda1: float = 0.0
    lambda2: float = 0.0
    latent_lr: float = 1.0
    latent_steps: int = 1000
    weight_lr: float = 1e-4
    steps_per_stage: int = 800
    direction: str = "shallow_first"
    total_steps: int = 5600
    seed: int = 5
    workers: int = 1
    chunk_size: int = 8
    abs_poisson: bool = False  # debug: wrap each Poisson summand in |.|

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularization weights must be nonnegative")
        for name in ("latent_steps", "steps_per_stage", "total_steps", "workers", "chunk_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for kind in (self.loss_kind, self.latent_loss_kind):
            if kind not in LOSS_KINDS:
                raise ValueError(f"unknown loss kind {kind!r}")
        if self.direction not in ("shallow_first", "deep_first"):
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass
class LatentFit:
    z: torch.Tensor
    loss: float
    initial_loss: float
    trace: list[float] = field(default_factory=list)
    restarts: int = 0


@dataclass
class ReconResult:
    phase: np.ndarray
    object: np.ndarray
    loss_trace: list[tuple[float, float, float, float]]
    stage_boundaries: list[int]
    z: torch.Tensor | None = None
    latent_phase: np.ndarray | None = None
    latent_trace: list[float] = field(default_factory=list)
    best_step: int = 0
    entry_loss: float = float("nan")
    best_loss: float = float("nan")
    generator: GeneratorNet | None = None


# ---------------------------------------------------------------------------
# Differentiable forward model and losses
# ---------------------------------------------------------------------------


def pairwise_sum(values: list[torch.Tensor]) -> torch.Tensor:
    """Sum scalars with a fixed balanced tree (adjacent pairs, odd tail carried)."""
    if not values:
        raise ValueError("nothing to sum")
    level = list(values)
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


class PtychoModel:
    """Precomputed probe, frames and gather indices for one diffraction stack."""

    def __init__(self, stack: DiffractionStack, P: Probe):
        pat = stack.pattern
        M = P.field.shape[0]
        if M != pat.probe_size or stack.frames.shape[1:] != (M, M):
            raise DimensionError(f"probe {P.field.shape} inconsistent with frames {stack.frames.shape}")
        self.N = pat.object_size
        self.M = M
        self.probe_re = torch.from_numpy(np.ascontiguousarray(P.field.real))
        self.probe_im = torch.from_numpy(np.ascontiguousarray(P.field.imag))
        self.frames = torch.from_numpy(np.ascontiguousarray(stack.frames, dtype=np.float64))
        offs = torch.arange(M)
        pos = torch.tensor(pat.positions, dtype=torch.long).reshape(-1, 2)
        self.rows = (pos[:, 0, None, None] + offs[None, :, None]).expand(-1, M, M)
        self.cols = (pos[:, 1, None, None] + offs[None, None, :]).expand(-1, M, M)
        self.count = len(pat.positions)

    def patches(self, phase: torch.Tensor) -> torch.Tensor:
        """All (count, M, M) windows in one gather, so its backward is a single scatter."""
        return phase[self.rows, self.cols]

    def intensities(self, patches: torch.Tensor, sl: slice) -> torch.Tensor:
        """|F(P * exp(j patch))|^2 for the positions in ``sl``."""
        patch = patches[sl]
        c, s = torch.cos(patch), torch.sin(patch)
        re = self.probe_re * c - self.probe_im * s
        im = self.probe_re * s + self.probe_im * c
        fre, fim = nn.fft2_pair(re, im)
        return fre * fre + fim * fim


def _check_phase(model: PtychoModel, phase: torch.Tensor) -> torch.Tensor:
    phase = phase.reshape(phase.shape[-2:]) if phase.dim() > 2 else phase
    if tuple(phase.shape) != (model.N, model.N):
        raise DimensionError(f"phase {tuple(phase.shape)} does not match object size {model.N}")
    return phase.double()


def _l1_terms(model, patches, sl):
    return (model.frames[sl] - model.intensities(patches, sl)).abs().sum(dim=(-2, -1))


def _poisson_terms(model, patches, sl, literal_abs=False):
    I = model.intensities(patches, sl)
    # The clamp leaves the value untouched (sqrt(1e-300) vanishes next to the
    # floor) but stops sqrt'(0) = inf from turning into 0 * inf = nan.
    modulus = torch.sqrt(torch.clamp(I, min=1e-300))
    g = I - 2.0 * model.frames[sl] * torch.log(modulus + LOG_FLOOR)
    if literal_abs:
        g = g.abs()
    return g.sum(dim=(-2, -1))


def _evaluate(model, phase, term_fn, chunk_size=8, workers=1) -> torch.Tensor:
    # Chunks read disjoint slices of one gathered tensor; their gradients add
    # exactly, so the result does not depend on thread scheduling.
    phase = model.patches(phase)
    chunks = [slice(i, min(i + chunk_size, model.count)) for i in range(0, model.count, chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda sl: term_fn(model, phase, sl), chunks))
    else:
        parts = [term_fn(model, phase, sl) for sl in chunks]
    per_position = [t for part in parts for t in part.unbind(0)]
    return pairwise_sum(per_position)


def _as_model(stack, P) -> PtychoModel:
    return stack if isinstance(stack, PtychoModel) else PtychoModel(stack, P)


def data_loss_l1(stack, P, phase: torch.Tensor, chunk_size=8, workers=1) -> torch.Tensor:
    """Sum over positions of ||d_i - |F(P * exp(j phase)_i)|^2||_1."""
    model = _as_model(stack, P)
    return _evaluate(model, _check_phase(model, phase), _l1_terms, chunk_size, workers)


def data_loss_poisson(stack, P, phase: torch.Tensor, chunk_size=8, workers=1,
                      literal_abs=False) -> torch.Tensor:
    """Poisson negative log-likelihood sum(I - 2 d log(sqrt(I) + 1e-12)), constants dropped."""
    model = _as_model(stack, P)

    def terms(m, ph, sl):
        return _poisson_terms(m, ph, sl, literal_abs)

    return _evaluate(model, _check_phase(model, phase), terms, chunk_size, workers)


def data_loss(kind: str, stack, P, phase, chunk_size=8, workers=1, literal_abs=False):
    if kind == "l1_intensity":
        return data_loss_l1(stack, P, phase, chunk_size, workers)
    if kind == "poisson_nll":
        return data_loss_poisson(stack, P, phase, chunk_size, workers, literal_abs)
    raise ValueError(f"unknown loss kind {kind!r}")


def tv(phase: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV with forward differences; |u| is smoothed to sqrt(u^2 + eps) - sqrt(eps)."""
    phase = phase.reshape(phase.shape[-2:])
    dr = phase[1:, :] - phase[:-1, :]
    dc = phase[:, 1:] - phase[:, :-1]
    floor = math.sqrt(TV_EPS)
    return (torch.sqrt(dr * dr + TV_EPS) - floor).sum() + (torch.sqrt(dc * dc + TV_EPS) - floor).sum()


def dl_reg(D: DiscriminatorNet, phase: torch.Tensor) -> torch.Tensor:
    """log(1 - D(phase) + 1e-12): low when the discriminator accepts the image."""
    dtype = next(D.parameters()).dtype
    score = discriminator_score(D, phase.to(dtype).reshape(1, 1, *phase.shape[-2:]))
    return torch.log(1.0 - score.reshape(()).double() + DL_FLOOR)


# ---------------------------------------------------------------------------
# Optimization stages
# ---------------------------------------------------------------------------


def _generator_phase(G: GeneratorNet, z: torch.Tensor) -> torch.Tensor:
    return G(z.reshape(1, -1))[0, 0]


def optimize_latent(G: GeneratorNet, stack, P: Probe, cfg: ReconConfig, rng: Rng,
                    loss_kind: str | None = None, max_restarts: int = 3) -> LatentFit:
    """Gradient descent on the latent vector only; returns the best-loss latent seen."""
    kind = loss_kind or cfg.latent_loss_kind
    model = _as_model(stack, P)
    dtype = next(G.parameters()).dtype
    frozen = [p.requires_grad for p in G.parameters()]
    for p in G.parameters():
        p.requires_grad_(False)

    def loss_at(z):
        return data_loss(kind, model, P, _generator_phase(G, z), cfg.chunk_size, cfg.workers)

    try:
        for restart in range(max_restarts + 1):
            z = torch.tensor(rng.normal(size=G.latent_dim), dtype=dtype, requires_grad=True)
            opt = nn.Optimizer([z], "sgd", cfg.latent_lr)
            best_loss, best_z, first, trace = math.inf, z.detach().clone(), None, []
            diverged = False
            for _ in range(cfg.latent_steps + 1):
                loss = loss_at(z)
                value = loss.item()
                if not math.isfinite(value):
                    diverged = True
                    break
                trace.append(value)
                if first is None:
                    first = value
                if value < best_loss:
                    best_loss, best_z = value, z.detach().clone()
                if len(trace) > cfg.latent_steps:
                    break
                opt.zero_grad()
                nn.backward(loss)
                opt.step()
            if not diverged:
                return LatentFit(z=best_z, loss=best_loss, initial_loss=first, trace=trace,
                                 restarts=restart)
            log.warning("latent fit diverged, restarting (%d)", restart + 1)
        raise ReconDivergedError(f"latent optimization diverged after {max_restarts} restarts")
    finally:
        for p, flag in zip(G.parameters(), frozen):
            p.requires_grad_(flag)


def active_layers(stage: int, n_layers: int, direction: str) -> list[int]:
    """Layers trained during ``stage`` (0-based); every layer from stage 5 on."""
    count = n_layers if stage >= ALL_LAYERS_FROM_STAGE else min(stage + 1, n_layers)
    order = list(range(n_layers)) if direction == "shallow_first" else list(range(n_layers))[::-1]
    return sorted(order[:count])


class _Objective:
    """data + lambda1 * tv + lambda2 * dl; zero-weighted terms are traced but not differentiated."""

    def __init__(self, model, P, D, cfg: ReconConfig):
        self.model, self.P, self.D, self.cfg = model, P, D, cfg

    def __call__(self, phase: torch.Tensor):
        cfg = self.cfg
        data = data_loss(cfg.loss_kind, self.model, self.P, phase, cfg.chunk_size, cfg.workers,
                         cfg.abs_poisson)
        total = data
        if cfg.lambda1 > 0:
            tv_term = tv(phase.double())
            total = total + cfg.lambda1 * tv_term
        else:
            with torch.no_grad():
                tv_term = tv(phase.double())
        if cfg.lambda2 > 0 and self.D is not None:
            dl_term = dl_reg(self.D, phase)
            total = total + cfg.lambda2 * dl_term
        elif self.D is not None:
            with torch.no_grad():
                dl_term = dl_reg(self.D, phase)
        else:
            dl_term = torch.zeros((), dtype=torch.float64)
        return total, data, tv_term, dl_term


def progressive_optimize(G: GeneratorNet, D: DiscriminatorNet | None, z_hat: torch.Tensor, stack,
                         P: Probe, cfg: ReconConfig, max_retries: int = 3) -> ReconResult:
    """Adam on (z, unfrozen layers) with stage-wise unfreezing; returns the best iterate.

    ``G`` is copied, never modified.  The iterate scored at step ``t`` is the
    one before the ``t``-th update; the final iterate is scored last.
    """
    model = _as_model(stack, P)
    G = copy.deepcopy(G)
    L = G.layer_count
    objective = _Objective(model, P, D, cfg)
    d_flags = [p.requires_grad for p in D.parameters()] if D is not None else []
    if D is not None:
        for p in D.parameters():
            p.requires_grad_(False)

    z = z_hat.detach().clone().reshape(-1).requires_grad_(True)
    nn.freeze(G, range(L))
    opt = nn.Optimizer([z, *G.parameters()], "adam", cfg.weight_lr)
    boundaries = list(range(0, cfg.total_steps, cfg.steps_per_stage))

    trace: list[tuple[float, float, float, float]] = []
    best = (math.inf, -1, None, None)
    entry_loss = math.nan
    retries = 0
    stage = -1
    step = 0
    while step <= cfg.total_steps:
        new_stage = min(step, cfg.total_steps - 1) // cfg.steps_per_stage
        if new_stage != stage:
            wanted = set(active_layers(new_stage, L, cfg.direction))
            before = set(active_layers(stage, L, cfg.direction)) if stage >= 0 else set()
            nn.unfreeze(G, sorted(wanted - before), opt)
            stage = new_stage

        total, data, tv_term, dl_term = objective(_generator_phase(G, z))
        value = total.item()
        if not math.isfinite(value):
            if retries >= max_retries or best[2] is None:
                raise ReconDivergedError(f"progressive optimization diverged at step {step}")
            retries += 1
            opt.lr *= 0.5
            log.warning("non-finite loss at step %d, lr -> %g", step, opt.lr)
            with torch.no_grad():
                z.copy_(best[2])
            G.load_state_dict(best[3])
            opt.reset()
            continue
        trace.append((data.item(), tv_term.item(), dl_term.item(), value))
        if step == 0:
            entry_loss = value
        if value < best[0]:
            best = (value, step, z.detach().clone(), copy.deepcopy(G.state_dict()))
        if step == cfg.total_steps:
            break
        opt.zero_grad()
        nn.backward(total)
        opt.step()
        step += 1

    if D is not None:
        for p, flag in zip(D.parameters(), d_flags):
            p.requires_grad_(flag)
    _, best_step, best_z, best_state = best
    G.load_state_dict(best_state)
    with torch.no_grad():
        phase = _generator_phase(G, best_z).double().numpy()
    return ReconResult(
        phase=phase,
        object=np.exp(1j * phase),
        loss_trace=trace,
        stage_boundaries=boundaries,
        z=best_z,
        best_step=best_step,
        entry_loss=entry_loss,
        best_loss=best[0],
        generator=G,
    )


def reconstruct(stack: DiffractionStack, P: Probe, gan, cfg: ReconConfig) -> ReconResult:
    """Latent initialization followed by progressive fine-tuning.

    ``gan`` is a checkpoint path or a ``(G, D)`` pair.
    """
    G, D = load_checkpoint(gan) if isinstance(gan, (str, Path)) else gan
    if G.image_size != stack.pattern.object_size:
        raise DimensionError(
            f"generator makes {G.image_size}px images, stack needs {stack.pattern.object_size}px"
        )
    torch.manual_seed(cfg.seed)
    model = PtychoModel(stack, P)
    fit = optimize_latent(G, model, P, cfg, Rng(cfg.seed))
    with torch.no_grad():
        latent_phase = _generator_phase(G, fit.z).double().numpy()
    result = progressive_optimize(G, D, fit.z, model, P, cfg)
    result.latent_phase = latent_phase
    result.latent_trace = fit.trace
    return result


def save_result(result: ReconResult, out, cfg: ReconConfig) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_field(out / "phase.ptyf", result.phase)
    write_field(out / "object.ptyf", result.object)
    if result.latent_phase is not None:
        write_field(out / "latent_phase.ptyf", result.latent_phase)
    lines = ["step,data,tv,dl,total"]
    lines += [f"{i},{d!r},{t!r},{g!r},{tot!r}" for i, (d, t, g, tot) in enumerate(result.loss_trace)]
    (out / "trace.csv").write_text("\n".join(lines) + "\n")
    conf = asdict(cfg) | {"best_step": result.best_step}
    (out / "config.txt").write_text("".join(f"{k}={v}\n" for k, v in conf.items()))
    return out
