"""DP-SGD mechanics and Renyi-DP accounting.

Per-example gradients are projected onto a radius-C ball, summed, perturbed
with a single Gaussian draw of scale C*sigma per step, and divided by the
expected batch size. Composition is tracked as Renyi DP of the Poisson-
subsampled Gaussian mechanism at integer orders 2..64 via the binomial
expansion, evaluated in log space, and converted to (epsilon, delta) by
minimizing over orders. Sigma calibration binary-searches for the smallest
noise multiplier whose full-run epsilon lands within [0.99*target, target].

Gradients are handled as flat dicts name -> ndarray; a bare ndarray works
too (treated as a one-entry dict).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import CalibrationError

RDP_ORDERS: tuple[int, ...] = tuple(range(2, 65))

SIGMA_SEARCH_LO = 1e-2
SIGMA_SEARCH_HI = 1e6


@dataclass(frozen=True)
class DpTrainConfig:
    """Privacy and optimizer constants for one training run."""

    delta: float
    clip_norm: float
    batch_size: int
    dataset_size: int
    steps: int
    epsilon: float | None = None  # target; sigma is calibrated when set
    sigma: float | None = None  # explicit noise multiplier
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon target must be positive")
        if not (0 < self.delta < 1):
            raise ValueError("delta must lie in (0, 1)")
        if self.clip_norm <= 0:
            raise ValueError("clip norm must be positive")
        if self.batch_size < 1 or self.dataset_size < 1:
            raise ValueError("batch and dataset sizes must be positive")
        if self.steps < 0:
            raise ValueError("step count must be nonnegative")
        if not (0 < self.sampling_rate <= 1):
            raise ValueError("sampling rate must lie in (0, 1]")

    @property
    def sampling_rate(self) -> float:
        return min(self.batch_size, self.dataset_size) / self.dataset_size

    @property
    def expected_batch(self) -> int:
        return min(self.batch_size, self.dataset_size)


# ---------------------------------------------------------------------------
# gradient mechanics
# ---------------------------------------------------------------------------


def _as_tree(g) -> Mapping[str, np.ndarray]:
    return g if isinstance(g, Mapping) else {"": g}


def global_norm(g) -> float:
    tree = _as_tree(g)
    return math.sqrt(sum(float(np.sum(a * a)) for a in tree.values()))


def clip_gradient(g, clip_norm: float):
    """min(clip_norm / ||g||, 1) * g over the whole tree; zero stays zero."""
    if clip_norm <= 0:
        raise ValueError("clip norm must be positive")
    norm = global_norm(g)
    scale = 1.0 if norm == 0.0 else min(clip_norm / norm, 1.0)
    if isinstance(g, Mapping):
        return {k: a * scale for k, a in g.items()}
    return g * scale


def noisy_aggregate(grads, clip_norm: float, sigma: float,
                    rng: np.random.Generator, denom: int | None = None):
    """(sum of gradients + one N(0, (clip_norm*sigma)^2 I) draw) / denom.

    ``grads`` may be any iterable (it is consumed in one pass, so streaming
    per-example gradients works). ``denom`` defaults to the number of
    gradients; DP training passes the expected batch size instead (dividing
    by the realized Poisson batch size would break the sensitivity analysis).
    sigma == 0 with the default denom returns the exact mean.
    """
    total: dict[str, np.ndarray] | None = None
    was_mapping = True
    count = 0
    for g in grads:
        was_mapping = isinstance(g, Mapping)
        tree = _as_tree(g)
        if total is None:
            total = {k: a.astype(np.float64, copy=True) for k, a in tree.items()}
        else:
            for k, a in tree.items():
                total[k] += a
        count += 1
    if total is None:
        raise ValueError("cannot aggregate an empty batch; use noise_only_update")
    denom = count if denom is None else denom
    if sigma > 0:
        std = clip_norm * sigma
        for k in total:
            total[k] += rng.normal(0.0, std, size=total[k].shape)
    out = {k: v / denom for k, v in total.items()}
    return out if was_mapping else out[""]


def noise_only_update(shapes: Mapping[str, tuple], clip_norm: float, sigma: float,
                      rng: np.random.Generator, denom: int) -> dict[str, np.ndarray]:
    """The update an empty Poisson batch releases: pure noise over denom."""
    std = clip_norm * sigma
    return {k: rng.normal(0.0, std, size=shape) / denom for k, shape in shapes.items()}


def poisson_sample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Each of n indices included independently with probability q (ascending)."""
    if not (0 < q <= 1):
        raise ValueError("sampling rate must lie in (0, 1]")
    if q == 1.0:
        return np.arange(n)
    return np.flatnonzero(rng.random(n) < q)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam: theta -= lr * m_hat / (sqrt(v_hat) + eps).

    With eps == 0 the effective step is scale invariant in the gradients;
    0/0 coordinates (never-touched parameters) step by zero.
    """
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        denom = np.sqrt(v_hat) + eps
        step = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom > 0)
        p -= (lr * step).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """Per-step RDP of the Poisson-subsampled Gaussian at integer order alpha.

    Binomial expansion, evaluated with log-sum-exp:
    (1/(alpha-1)) * log sum_k C(alpha,k) (1-q)^(alpha-k) q^k e^(k(k-1)/(2 sigma^2))
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not (0 < q <= 1):
        raise ValueError("q must lie in (0, 1]")
    if alpha < 2 or alpha != int(alpha):
        raise ValueError("alpha must be an integer >= 2")
    alpha = int(alpha)
    ks = np.arange(alpha + 1)
    log_binom = gammaln(alpha + 1) - gammaln(ks + 1) - gammaln(alpha - ks + 1)
    log_q_part = np.where(ks > 0, ks * math.log(q), 0.0)
    if q == 1.0:
        log_1mq_part = np.where(ks == alpha, 0.0, -np.inf)
    else:
        log_1mq_part = (alpha - ks) * math.log1p(-q)
    terms = log_binom + log_1mq_part + log_q_part + ks * (ks - 1) / (2.0 * sigma ** 2)
    return float(logsumexp(terms)) / (alpha - 1)


@dataclass(frozen=True)
class AccountantState:
    """Per-step RDP curve of one mechanism; composes linearly over steps."""

    q: float
    sigma: float
    orders: tuple[int, ...] = RDP_ORDERS
    per_step: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if not self.per_step:
            object.__setattr__(
                self, "per_step",
                tuple(rdp_subsampled_gaussian(self.q, self.sigma, a) for a in self.orders),
            )

    def rdp_at(self, steps: int) -> tuple[float, ...]:
        return tuple(steps * e for e in self.per_step)


def epsilon_from_rdp(accountant: AccountantState, steps: int, delta: float) -> float:
    """min over orders of [steps * rdp(alpha) + log(1/delta) / (alpha - 1)]."""
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if steps == 0:
        return 0.0
    log_inv_delta = math.log(1.0 / delta)
    return min(
        steps * rdp + log_inv_delta / (alpha - 1)
        for alpha, rdp in zip(accountant.orders, accountant.per_step)
    )


def compute_epsilon(q: float, sigma: float, steps: int, delta: float) -> float:
    return epsilon_from_rdp(AccountantState(q=q, sigma=sigma), steps, delta)


def calibrate_sigma(epsilon_target: float, delta: float, q: float, steps: int,
                    rel_tol: float = 1e-4) -> float:
    """Smallest noise multiplier meeting the (epsilon, delta) target.

    Binary search on sigma to relative tolerance ``rel_tol``; the returned
    sigma satisfies epsilon(sigma) <= target and, unless the search floor is
    hit, epsilon(sigma) >= 0.99 * target.
    """
    if epsilon_target <= 0:
        raise ValueError("epsilon target must be positive")
    if steps <= 0:
        raise ValueError("calibration needs a positive step count")

    def eps_at(sigma: float) -> float:
        return compute_epsilon(q, sigma, steps, delta)

    lo, hi = SIGMA_SEARCH_LO, SIGMA_SEARCH_LO
    if eps_at(lo) <= epsilon_target:
        return lo  # target is loose; sigma hits the lower search bound
    while eps_at(hi) > epsilon_target:
        hi *= 2.0
        if hi > SIGMA_SEARCH_HI:
            raise CalibrationError(
                f"epsilon={epsilon_target} unreachable with q={q}, steps={steps} "
                f"even at sigma={SIGMA_SEARCH_HI:g}",
                epsilon=epsilon_target, q=q, steps=steps,
            )
    for _ in range(200):
        if hi - lo <= rel_tol * hi and eps_at(hi) >= 0.99 * epsilon_target:
            break
        mid = 0.5 * (lo + hi)
        if eps_at(mid) <= epsilon_target:
            hi = mid
        else:
            lo = mid
    return hi
