"""Forward noising process, training losses, and the deterministic DDIM sampler.

The schedule tables are kept in float64 regardless of the global tensor
precision; per-step coefficients are cast at the point of use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from scd import tensor as T


class DiffusionError(Exception):
    pass


SCHEDULE_KINDS = ("linear", "scaled_linear")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance increments and their cumulative signal-retention table.

    ``beta[i]`` is the increment for step t = i + 1. ``alpha_bar`` has
    length steps + 1 with ``alpha_bar[0] = 1``, so indexing by t is direct
    and t = 0 means "clean".
    """

    kind: str
    steps: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha_bar: np.ndarray

    def sqrt_ab(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[t]))

    def sqrt_one_minus_ab(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[t]))


def make_schedule(steps: int, beta_start: float, beta_end: float, kind: str = "linear") -> NoiseSchedule:
    kind = kind.replace("-", "_")
    if kind not in SCHEDULE_KINDS:
        raise DiffusionError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {kind!r}")
    if steps < 1:
        raise DiffusionError(f"schedule needs at least one step, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DiffusionError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    else:
        beta = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), steps, dtype=np.float64) ** 2
    alpha_bar = np.empty(steps + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - beta)
    return NoiseSchedule(kind=kind, steps=steps, beta_start=float(beta_start),
                         beta_end=float(beta_end), beta=beta, alpha_bar=alpha_bar)


def _check_t(s: NoiseSchedule, t: int) -> None:
    if not (0 <= t <= s.steps):
        raise DiffusionError(f"timestep {t} outside [0, {s.steps}]")


def validate_mask(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise DiffusionError("mask must be binary (0 = preserved context, 1 = generated region)")
    return m


def q_sample(x0: T.Tensor, t: int, eps: T.Tensor, s: NoiseSchedule) -> T.Tensor:
    """Noised sample sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps; t = 0 returns x0."""
    _check_t(s, t)
    if x0.shape != eps.shape:
        raise DiffusionError(f"x0 {x0.shape} and eps {eps.shape} must match")
    if t == 0:
        return x0
    return T.add(T.scale(x0, s.sqrt_ab(t)), T.scale(eps, s.sqrt_one_minus_ab(t)))


def masked_q_sample(x0: T.Tensor, t: int, eps: T.Tensor, m: np.ndarray, s: NoiseSchedule) -> T.Tensor:
    """Noise only where the mask is 1; mask-0 cells keep the exact x0 bits."""
    m = validate_mask(m)
    noised = q_sample(x0, t, eps, s)
    return T.masked_where(m, noised, x0)


def simple_loss(eps_pred: T.Tensor, eps: T.Tensor, region_mask: np.ndarray | None = None) -> T.Tensor:
    """Mean squared error, optionally restricted to a region mask."""
    if eps_pred.shape != eps.shape:
        raise DiffusionError(f"prediction {eps_pred.shape} and target {eps.shape} must match")
    diff = T.sub(eps_pred, eps)
    sq = T.mul(diff, diff)
    if region_mask is None:
        return T.mean(sq)
    m = validate_mask(region_mask)
    mfull = np.broadcast_to(m, eps.shape).astype(eps.data.dtype)
    count = float(mfull.sum())
    if count == 0:
        raise DiffusionError("loss region is empty")
    return T.scale(T.sum_all(T.mul(sq, T.Tensor(mfull))), 1.0 / count)


def ddim_timesteps(s: NoiseSchedule, steps: int) -> list[int]:
    """Evenly spaced subsequence from t = steps down to t = 1, inclusive."""
    if steps < 1:
        raise DiffusionError("need at least one sampling step")
    if steps > s.steps:
        raise DiffusionError(f"{steps} sampling steps exceed schedule length {s.steps}")
    ts = np.round(np.linspace(s.steps, 1, steps)).astype(int)
    return [int(t) for t in ts]


EpsModel = Callable[[T.Tensor, int], T.Tensor]


def ddim_sample(
    model: EpsModel,
    shape: tuple[int, ...],
    s: NoiseSchedule,
    steps: int = 25,
    eta: float = 0.0,
    seed: int = 0,
    mask: np.ndarray | None = None,
    context: np.ndarray | None = None,
    on_step: Callable[[int, np.ndarray], None] | None = None,
) -> T.Tensor:
    """Deterministic DDIM trajectory from seeded Gaussian noise.

    ``model(x_t, t)`` returns the noise prediction (conditioning is bound
    into the callable by the caller). With ``mask``/``context`` set, only
    mask-1 cells evolve; mask-0 cells are pinned to the clean context bits
    at every step, which is the try-on regime.
    """
    if eta != 0.0:
        raise DiffusionError("only the deterministic eta=0 sampler is implemented")
    if (mask is None) != (context is None):
        raise DiffusionError("mask and context must be given together")
    ts = ddim_timesteps(s, steps)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    if mask is not None:
        mask = validate_mask(mask)
        if np.asarray(context).shape != shape:
            raise DiffusionError(f"context shape {np.asarray(context).shape} != {shape}")
        x = np.where(np.broadcast_to(mask != 0, shape), x, context)
    with T.no_grad():
        for i, t in enumerate(ts):
            t_next = ts[i + 1] if i + 1 < len(ts) else 0
            eps = model(T.Tensor(x), t).data.astype(np.float64)
            a_t, b_t = s.sqrt_ab(t), s.sqrt_one_minus_ab(t)
            a_n, b_n = s.sqrt_ab(t_next), s.sqrt_one_minus_ab(t_next)
            x0_hat = (x - b_t * eps) / a_t
            x = a_n * x0_hat + b_n * eps
            if mask is not None:
                x = np.where(np.broadcast_to(mask != 0, shape), x, context)
            if on_step is not None:
                on_step(t_next, x.copy())
    return T.Tensor(x)
