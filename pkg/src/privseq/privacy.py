"""DP-SGD noise and Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from .numkit import Rng

DEFAULT_ORDERS = tuple([1.25, 1.5] + list(range(2, 65)) + [128, 256])
SIGMA_BRACKET = (0.3, 50.0)
CALIBRATION_SLACK = 1e-3


class CalibrationError(ValueError):
    pass


def dp_step(summed_clipped_grad, C: float, sigma_dp: float, B_nominal: float, rng: Rng):
    """``(sum of clipped grads + sigma * C * N(0, I)) / B``.

    Accepts one array or a dict of arrays (noise drawn per entry in dict order).
    """
    if sigma_dp < 0:
        raise ValueError(f"noise multiplier must be non-negative, got {sigma_dp}")
    if B_nominal <= 0:
        raise ValueError("nominal batch size must be positive")

    def one(g):
        g = np.asarray(g, dtype=np.float64)
        if sigma_dp == 0:
            return g / B_nominal
        return (g + sigma_dp * C * rng.normal(g.shape)) / B_nominal

    if isinstance(summed_clipped_grad, dict):
        return {k: one(v) for k, v in summed_clipped_grad.items()}
    return one(summed_clipped_grad)


def _log_add(a: float, b: float) -> float:
    lo, hi = min(a, b), max(a, b)
    if lo == -math.inf:
        return hi
    return hi + math.log1p(math.exp(lo - hi))


def _log_comb(n: int, k: int) -> float:
    return float(special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    out = -math.inf
    lq, l1q = math.log(q), math.log1p(-q)
    for k in range(alpha + 1):
        out = _log_add(out, _log_comb(alpha, k) + k * lq + (alpha - k) * l1q + (k * k - k) / (2 * sigma**2))
    return out


def _log_erfc(x: float) -> float:
    return math.log(2.0) + float(special.log_ndtr(-x * math.sqrt(2.0)))


def _signed_log_add(acc: tuple[float, float], term: float, sign: float) -> tuple[float, float]:
    """Add ``sign * exp(term)`` to a value stored as ``(log|v|, sign(v))``."""
    la, sa = acc
    if la == -math.inf:
        return term, sign
    if sa == sign:
        return _log_add(la, term), sa
    hi, lo = (la, term) if la >= term else (term, la)
    s_hi = sa if la >= term else sign
    if hi == lo:
        return -math.inf, 1.0
    return hi + math.log1p(-math.exp(lo - hi)), s_hi


def _log_a_frac(q: float, sigma: float, alpha: float, max_terms: int = 5000) -> float:
    # split the integral at z0 where the two mixture terms cross; binomial
    # coefficients of a fractional order change sign, so sums are kept signed
    a0 = a1 = (-math.inf, 1.0)
    z0 = sigma**2 * math.log(1.0 / q - 1.0) + 0.5
    lq, l1q = math.log(q), math.log1p(-q)
    for i in range(max_terms):
        coef = special.binom(alpha, i)
        if coef == 0:
            continue
        c = math.log(abs(coef))
        sign = math.copysign(1.0, coef)
        j = alpha - i
        s0 = c + i * lq + j * l1q + (i * i - i) / (2 * sigma**2) + math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma))
        s1 = c + j * lq + i * l1q + (j * j - j) / (2 * sigma**2) + math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma))
        a0 = _signed_log_add(a0, s0, sign)
        a1 = _signed_log_add(a1, s1, sign)
        if i > alpha + 1 and max(s0, s1) < -30:
            total = _signed_log_add(a0, a1[0], a1[1])
            if total[1] < 0:
                raise ArithmeticError("fractional-order series summed to a negative value")
            return total[0]
    raise ArithmeticError(f"fractional-order series did not converge (q={q}, sigma={sigma}, alpha={alpha})")


def rdp_sampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """RDP of one step of the Poisson-subsampled Gaussian mechanism at order ``alpha``."""
    if not 0 < q <= 1:
        raise ValueError(f"sampling rate must be in (0, 1], got {q}")
    if not sigma > 0:
        raise ValueError(f"noise multiplier must be positive, got {sigma}")
    if alpha <= 1:
        raise ValueError("RDP order must exceed 1")
    if q == 1.0:
        return alpha / (2 * sigma**2)
    if float(alpha).is_integer():
        return _log_a_int(q, sigma, int(alpha)) / (alpha - 1)
    return _log_a_frac(q, sigma, alpha) / (alpha - 1)


def rdp_to_epsilon(orders: Sequence[float], rdp: Sequence[float], delta: float) -> tuple[float, float]:
    """``min_a [rdp(a) + ln(1/delta) / (a - 1)]`` and the minimising order."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    orders = np.asarray(orders, dtype=np.float64)
    eps = np.asarray(rdp, dtype=np.float64) + math.log(1.0 / delta) / (orders - 1)
    i = int(np.nanargmin(eps))
    return float(eps[i]), float(orders[i])


@dataclass
class PrivacyLedger:
    sigma_dp: float
    q: float
    delta: float
    steps_taken: int = 0
    rdp_orders: tuple = DEFAULT_ORDERS
    uniform_sampling: bool = False
    _per_step: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ValueError(f"sampling rate must be in (0, 1], got {self.q}")
        if not self.sigma_dp > 0:
            raise ValueError(f"noise multiplier must be positive, got {self.sigma_dp}")

    def rdp_per_step(self) -> np.ndarray:
        if self._per_step is None:
            self._per_step = np.array([rdp_sampled_gaussian(self.q, self.sigma_dp, a) for a in self.rdp_orders])
        return self._per_step

    def rdp(self, steps: int = None) -> np.ndarray:
        return (self.steps_taken if steps is None else steps) * self.rdp_per_step()

    def advance(self, n: int = 1) -> None:
        self.steps_taken += n

    def epsilon(self, steps: int = None) -> float:
        return rdp_epsilon(self, steps)

    def to_dict(self) -> dict:
        eps, order = rdp_to_epsilon(self.rdp_orders, self.rdp(), self.delta) if self.steps_taken else (0.0, None)
        out = {
            "sigma_dp": self.sigma_dp,
            "q": self.q,
            "delta": self.delta,
            "steps_taken": self.steps_taken,
            "epsilon": eps,
            "optimal_order": order,
        }
        if self.uniform_sampling:
            out["caveat"] = "batches drawn uniformly without replacement; accounted as Poisson with q = B/N"
        return out


def rdp_epsilon(ledger: PrivacyLedger, steps: int = None) -> float:
    T = ledger.steps_taken if steps is None else steps
    if T == 0:
        return 0.0
    return rdp_to_epsilon(ledger.rdp_orders, ledger.rdp(T), ledger.delta)[0]


def epsilon_for(sigma: float, q: float, steps: int, delta: float, orders=DEFAULT_ORDERS) -> float:
    return PrivacyLedger(sigma, q, delta, steps, tuple(orders)).epsilon()


def calibrate_sigma(
    epsilon_target: float,
    delta: float,
    q: float,
    steps: int,
    orders=DEFAULT_ORDERS,
    bracket: tuple[float, float] = SIGMA_BRACKET,
    slack: float = CALIBRATION_SLACK,
) -> float:
    """Smallest-ish noise multiplier with ``(1 - slack) * target <= eps(sigma) <= target``."""
    if not epsilon_target > 0:
        raise ValueError("target epsilon must be positive")
    lo, hi = bracket

    def eps(s):
        return epsilon_for(s, q, steps, delta, orders)

    if eps(hi) > epsilon_target:
        raise CalibrationError(f"epsilon={epsilon_target} needs sigma above the bracket [{lo}, {hi}]")
    if eps(lo) <= epsilon_target:
        raise CalibrationError(f"epsilon={epsilon_target} is reached with sigma below the bracket [{lo}, {hi}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        e = eps(mid)
        if e > epsilon_target:
            lo = mid
        else:
            hi = mid
            if e >= (1 - slack) * epsilon_target:
                return mid
    return hi


def default_delta(n_users: int) -> float:
    return 1.0 / (10.0 * n_users)


