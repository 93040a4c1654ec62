import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import special

from com.mhire.app.services.density_space.density_schema import GriddedDensity
from com.mhire.app.services.errors import SimulationConfigError
from com.mhire.app.services.estimator.estimator_schema import ObservationSeries
from com.mhire.app.services.mechanism_core.mechanism_schema import AnalyticDensity, BranchingMechanism
from com.mhire.app.services.simulator.simulator_schema import EULER_SUBSTEP_FLOOR, PathSample, SimConfig

logger = logging.getLogger(__name__)

# Grid used to invert the tail of infinite-activity gamma-type laws
TAIL_GRID_POINTS = 4096
TAIL_MASS_CUTOFF = 1e-12

ONE_STEP_SUBSTREAM = 1


def make_rng(seed: int, *substream: int) -> np.random.Generator:
    """Philox counter-based generator; ``substream`` selects an independent child stream."""
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(int(s) for s in substream))
    return np.random.Generator(np.random.Philox(sequence))


@dataclass(frozen=True)
class JumpLaw:
    """Jumps of size >= cutoff: Poisson rate and a sampler for the normalised sizes."""

    rate: float
    cutoff: float
    sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if size == 0 or self.sampler is None:
            return np.zeros(size)
        return self.sampler(rng, size)


def _upper_uniform(rng: np.random.Generator, size: int) -> np.ndarray:
    # uniform on (0, 1]
    return 1.0 - rng.random(size)


def _analytic_sampler(density: AnalyticDensity, cutoff: float, rate: float):
    a, theta = density.effective_shape, density.rate
    if a == 1.0:
        # exponential tails are memoryless
        return lambda rng, size: cutoff + rng.exponential(1.0 / theta, size)
    if a > 0:
        tail_at_cutoff = special.gammaincc(a, theta * cutoff)
        return lambda rng, size: special.gammainccinv(a, tail_at_cutoff * _upper_uniform(rng, size)) / theta

    upper = cutoff
    while density.tail_rate(upper) > TAIL_MASS_CUTOFF * rate:
        upper *= 2.0
    grid = np.geomspace(cutoff, upper, TAIL_GRID_POINTS)
    tail = np.array([density.tail_rate(z) for z in grid])

    def inverse_tail(rng: np.random.Generator, size: int) -> np.ndarray:
        target = rate * _upper_uniform(rng, size)
        # tail is decreasing in z; interpolate on the reversed arrays
        return np.interp(target, tail[::-1], grid[::-1])

    return inverse_tail


def _gridded_sampler(density: GriddedDensity, cutoff: float, rate: float):
    start = max(cutoff, density.breakpoints[0])
    points = np.concatenate([[start], density.breakpoints[density.breakpoints > start]])
    cumulative = density.cumulative(points)

    def inverse_cdf(rng: np.random.Generator, size: int) -> np.ndarray:
        target = cumulative[0] + rate * rng.random(size)
        return np.interp(target, cumulative, points)

    return inverse_cdf


def build_jump_law(density, cutoff: float) -> JumpLaw:
    """Compound-Poisson law of the jumps above ``cutoff``; smaller jumps are dropped."""
    rate = float(density.tail_rate(cutoff))
    if not math.isfinite(rate):
        raise SimulationConfigError(
            f"Jump rate above cutoff {cutoff:g} is infinite; set a positive small_jump_cutoff"
        )
    if rate <= 0.0:
        return JumpLaw(rate=0.0, cutoff=cutoff)
    if isinstance(density, GriddedDensity):
        sampler = _gridded_sampler(density, cutoff, rate)
    else:
        sampler = _analytic_sampler(density, cutoff, rate)
    return JumpLaw(rate=rate, cutoff=cutoff, sampler=sampler)


def cir_transition(mech: BranchingMechanism, beta: float, x, h, rng: np.random.Generator) -> np.ndarray:
    """Exact draw of the jump-free CIR part after time h.

    X_h = s * Gamma(beta/c + N) with N ~ Poisson(x e^{-b h} / s) and
    s = c (1 - e^{-b h}) / b; a Gamma shape of 0 gives 0.
    """
    x = np.asarray(x, dtype=float)
    h = np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    result = x.copy()
    moving = h > 0
    if not np.any(moving):
        return result
    xm, hm = x[moving], h[moving]
    decay = np.exp(-mech.b * hm)
    growth = -np.expm1(-mech.b * hm)
    if mech.c == 0:
        result[moving] = xm * decay + (beta / mech.b) * growth
        return result
    scale = mech.c * growth / mech.b
    mixing = rng.poisson(xm * decay / scale)
    shape = beta / mech.c + mixing
    positive = shape > 0
    draws = np.zeros_like(xm)
    draws[positive] = rng.standard_gamma(shape[positive])
    result[moving] = scale * draws
    return result


def _warn_substeps(cfg: SimConfig) -> None:
    if cfg.scheme == "euler" and cfg.substeps < EULER_SUBSTEP_FLOOR:
        logger.warning(f"Euler scheme with {cfg.substeps} substeps (< {EULER_SUBSTEP_FLOOR}) is biased")


def _exact_interval(cfg: SimConfig, law: JumpLaw, x: float, rng: np.random.Generator) -> Tuple[float, int]:
    beta = cfg.imm.beta
    count = int(rng.poisson(law.rate * cfg.delta)) if law.rate > 0 else 0
    elapsed = 0.0
    state = np.array([x])
    if count:
        epochs = np.sort(rng.uniform(0.0, cfg.delta, count))
        sizes = law.sample(rng, count)
        for epoch, size in zip(epochs, sizes):
            state = cir_transition(cfg.mech, beta, state, epoch - elapsed, rng) + size
            elapsed = epoch
    state = cir_transition(cfg.mech, beta, state, cfg.delta - elapsed, rng)
    return float(state[0]), count


def _euler_interval(cfg: SimConfig, law: JumpLaw, x: float, rng: np.random.Generator) -> Tuple[float, int]:
    h = cfg.delta / cfg.substeps
    b, c, beta = cfg.mech.b, cfg.mech.c, cfg.imm.beta
    shocks = rng.standard_normal(cfg.substeps)
    counts = rng.poisson(law.rate * h, cfg.substeps) if law.rate > 0 else np.zeros(cfg.substeps, dtype=int)
    sizes = law.sample(rng, int(counts.sum()))
    jump_totals = np.zeros(cfg.substeps)
    np.add.at(jump_totals, np.repeat(np.arange(cfg.substeps), counts), sizes)
    for step in range(cfg.substeps):
        diffusion = math.sqrt(2.0 * c * max(x, 0.0) * h) * shocks[step]
        x = max(0.0, x + (beta - b * x) * h + diffusion)
        x += jump_totals[step]
    return x, int(counts.sum())


def simulate_path(cfg: SimConfig, n: int, substream: Tuple[int, ...] = ()) -> PathSample:
    """X_0, ..., X_n at spacing delta after discarding burn-in intervals."""
    if n < 1:
        raise SimulationConfigError("n must be at least 1")
    _warn_substeps(cfg)
    law = build_jump_law(cfg.imm.density, cfg.effective_cutoff)
    rng = make_rng(cfg.seed, *substream)
    advance = _exact_interval if cfg.scheme == "exact-cir-jumps" else _euler_interval

    burn_in = cfg.effective_burn_in
    x = cfg.x0
    for _ in range(burn_in):
        x, _ = advance(cfg, law, x, rng)

    values = np.empty(n + 1)
    values[0] = x
    jumps = 0
    for k in range(1, n + 1):
        x, emitted = advance(cfg, law, x, rng)
        values[k] = x
        jumps += emitted

    meta = {"seed": cfg.seed, "scheme": cfg.scheme, "jumps_emitted": jumps, "delta": cfg.delta,
            "burn_in": burn_in, "substream": list(substream)}
    logger.info(f"Simulated {n} intervals with {cfg.scheme}: {jumps} jumps (rate {law.rate:.4g})")
    return PathSample(
        series=ObservationSeries(values, delta=cfg.delta, meta=meta),
        jumps_emitted=jumps,
        scheme_used=cfg.scheme,
    )


def one_step_samples(cfg: SimConfig, x: float, count: int, substream: Tuple[int, ...] = ()) -> np.ndarray:
    """``count`` independent draws of X_delta given X_0 = x."""
    if x < 0:
        raise ValueError("x must be nonnegative")
    if count < 1:
        return np.zeros(0)
    _warn_substeps(cfg)
    law = build_jump_law(cfg.imm.density, cfg.effective_cutoff)
    rng = make_rng(cfg.seed, ONE_STEP_SUBSTREAM, *substream)
    beta = cfg.imm.beta
    state = np.full(count, float(x))

    if cfg.scheme == "euler":
        h = cfg.delta / cfg.substeps
        for _ in range(cfg.substeps):
            diffusion = np.sqrt(2.0 * cfg.mech.c * np.maximum(state, 0.0) * h) * rng.standard_normal(count)
            state = np.maximum(0.0, state + (beta - cfg.mech.b * state) * h + diffusion)
            if law.rate > 0:
                jumps = rng.poisson(law.rate * h, count)
                for index in np.flatnonzero(jumps):
                    state[index] += law.sample(rng, int(jumps[index])).sum()
        return state

    counts = rng.poisson(law.rate * cfg.delta, count) if law.rate > 0 else np.zeros(count, dtype=int)
    slots = int(counts.max())
    elapsed = np.zeros(count)
    if slots:
        used = np.arange(slots)[None, :] < counts[:, None]
        epochs = np.sort(np.where(used, rng.uniform(0.0, cfg.delta, (count, slots)), np.inf), axis=1)
        sizes = law.sample(rng, count * slots).reshape(count, slots)
        for slot in range(slots):
            active = used[:, slot]
            step = np.where(active, epochs[:, slot] - elapsed, 0.0)
            state = cir_transition(cfg.mech, beta, state, step, rng)
            state = state + np.where(active, sizes[:, slot], 0.0)
            elapsed = np.where(active, epochs[:, slot], elapsed)
    return cir_transition(cfg.mech, beta, state, cfg.delta - elapsed, rng)
