"""Threshold-conditioned value estimation.

A versatile critic factorizes Q(s, a | eps) = psi(s, a)^T z(eps): a bounded
feature map psi of dimension M and a per-dimension polynomial z of the
normalized threshold. During training one raw z vector is kept per behavior
threshold and updated by squared Bellman error descent against target copies;
an ordinary least squares fit across the behavior thresholds then extends the
critic to unseen thresholds. The same regression carries the generalization
guarantee: prediction intervals from the design's leverage, and the fitted
envelope constants (B, beta) that bound the worst-case leverage of evenly
spaced designs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import wasserstein_distance

BEHAVIOR_MATCH_ATOL = 1e-9     # raw-threshold equality for partition lookup
CONDITION_LIMIT = 1e12         # X^T X condition number beyond which we refuse
RESIDUAL_CORR_LIMIT = 0.2      # above this the error bound is only approximate


def normalize_threshold(eps, eps_low: float, eps_high: float):
    """(eps - eps_low) / eps_high. Maps eps_low to 0; the top of the interval
    need not map to 1. eps_high is a scale and must be positive."""
    if eps_high <= 0:
        raise ValueError(f"threshold scale eps_high must be positive, got {eps_high}")
    return (np.asarray(eps, dtype=float) - eps_low) / eps_high


# ---------------------------------------------------------------------------
# Inverse normal CDF (Acklam's rational approximation plus one Halley step).
# Kept dependency-free so the bound arithmetic is self-contained.

_ICDF_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
           1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ICDF_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
           6.680131188771972e+01, -1.328068155288572e+01)
_ICDF_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
           -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ICDF_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
           3.754408661907416e+00)


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF, accurate to well below 1e-7."""
    if not (0.0 < p < 1.0):
        raise ValueError(f"quantile argument must lie in (0, 1), got {p}")
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((( _ICDF_C[0] * q + _ICDF_C[1]) * q + _ICDF_C[2]) * q + _ICDF_C[3])
              * q + _ICDF_C[4]) * q + _ICDF_C[5]) / \
            (((( _ICDF_D[0] * q + _ICDF_D[1]) * q + _ICDF_D[2]) * q + _ICDF_D[3])
             * q + 1.0)
    elif p <= 1.0 - p_low:
        q = p - 0.5
        r = q * q
        x = ((((( _ICDF_A[0] * r + _ICDF_A[1]) * r + _ICDF_A[2]) * r + _ICDF_A[3])
              * r + _ICDF_A[4]) * r + _ICDF_A[5]) * q / \
            ((((( _ICDF_B[0] * r + _ICDF_B[1]) * r + _ICDF_B[2]) * r + _ICDF_B[3])
              * r + _ICDF_B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -((((( _ICDF_C[0] * q + _ICDF_C[1]) * q + _ICDF_C[2]) * q + _ICDF_C[3])
               * q + _ICDF_C[4]) * q + _ICDF_C[5]) / \
            (((( _ICDF_D[0] * q + _ICDF_D[1]) * q + _ICDF_D[2]) * q + _ICDF_D[3])
             * q + 1.0)
    # Halley refinement against the exact CDF (erfc).
    err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = err * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def two_sided_z(alpha: float) -> float:
    """z such that a +-z standard normal interval has mass 1 - alpha."""
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return normal_quantile(1.0 - 0.5 * alpha)


# ---------------------------------------------------------------------------
# Feature maps


DEFAULT_FEATURE_DIM = 32


class FeatureMap:
    """psi: (state, action) -> R^M with outputs hard-clipped to [-K, K].

    Clipping events are counted on the instance; for honest bound arithmetic
    the count should stay 0.
    """

    def __init__(self, fn: Callable[[object, int], np.ndarray],
                 dimension: int = DEFAULT_FEATURE_DIM, k_bound: float = 1.0):
        if dimension < 1:
            raise ValueError("feature dimension must be at least 1")
        if k_bound <= 0:
            raise ValueError("k_bound must be positive")
        self._fn = fn
        self.dimension = int(dimension)
        self.k_bound = float(k_bound)
        self.clip_events = 0

    def __call__(self, state, action: int) -> np.ndarray:
        v = np.asarray(self._fn(state, action), dtype=float)
        if v.shape != (self.dimension,):
            raise ValueError(f"feature map returned shape {v.shape}, "
                             f"expected ({self.dimension},)")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature map returned non-finite values")
        over = np.abs(v) > self.k_bound
        if np.any(over):
            self.clip_events += int(over.sum())
            v = np.clip(v, -self.k_bound, self.k_bound)
        assert np.max(np.abs(v)) <= self.k_bound
        return v


class IndexedFeatureMap(FeatureMap):
    """One-hot psi over (cell, action) pairs; K = 1 exactly. ``indexer`` maps
    a state (or an array of states) to integer cell ids."""

    def __init__(self, n_cells: int, n_actions: int,
                 indexer: Callable | None = None):
        self.n_cells = int(n_cells)
        self.n_actions = int(n_actions)
        self._indexer = indexer
        super().__init__(self._one_hot, self.n_cells * self.n_actions, 1.0)

    @classmethod
    def tabular(cls, n_states: int, n_actions: int) -> "IndexedFeatureMap":
        return cls(n_states, n_actions, indexer=None)

    def state_indices(self, states) -> np.ndarray:
        if self._indexer is None:
            idx = np.asarray(states, dtype=int)
        else:
            idx = np.asarray(self._indexer(states), dtype=int)
        if np.any(idx < 0) or np.any(idx >= self.n_cells):
            raise ValueError("state index out of range")
        return idx

    def pair_indices(self, states, actions) -> np.ndarray:
        return self.state_indices(states) * self.n_actions \
            + np.asarray(actions, dtype=int)

    def _one_hot(self, state, action: int) -> np.ndarray:
        v = np.zeros(self.dimension)
        v[int(self.pair_indices(np.asarray([state]), np.asarray([action]))[0])] = 1.0
        return v


# ---------------------------------------------------------------------------
# Polynomial designs over normalized thresholds


@dataclass(frozen=True)
class PolyDesign:
    """Vandermonde design over thresholds. ``thresholds`` are stored in
    normalized units; ``eps_low``/``eps_high`` recover them from raw ones."""

    thresholds: np.ndarray
    degree: int
    eps_low: float = 0.0
    eps_high: float = 1.0
    noise_scale: float | None = None

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.thresholds, dtype=float))
        object.__setattr__(self, "thresholds", t)
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if t.size < self.degree + 1:
            raise ValueError(f"need at least degree+1={self.degree + 1} "
                             f"thresholds, got {t.size}")
        x = np.vander(t, self.degree + 1, increasing=True)
        xtx = x.T @ x
        cond = np.linalg.cond(xtx)
        if not np.isfinite(cond) or cond > CONDITION_LIMIT:
            raise ValueError(f"design is ill-conditioned: X^T X condition "
                             f"number {cond:.3g} exceeds {CONDITION_LIMIT:.0e}")
        object.__setattr__(self, "_x", x)
        object.__setattr__(self, "_xtx_inv", np.linalg.inv(xtx))

    @classmethod
    def from_raw(cls, thresholds, degree: int, eps_low: float, eps_high: float,
                 noise_scale: float | None = None) -> "PolyDesign":
        t = normalize_threshold(np.asarray(thresholds, dtype=float),
                                eps_low, eps_high)
        return cls(thresholds=t, degree=degree, eps_low=eps_low,
                   eps_high=eps_high, noise_scale=noise_scale)

    @property
    def n_points(self) -> int:
        return self.thresholds.size

    @property
    def x(self) -> np.ndarray:
        return self._x

    @property
    def xtx_inv(self) -> np.ndarray:
        return self._xtx_inv

    def powers(self, eps_raw) -> np.ndarray:
        """Feature row(s) [1, t, ..., t^p] at raw threshold(s)."""
        t = normalize_threshold(eps_raw, self.eps_low, self.eps_high)
        return np.vander(np.atleast_1d(t), self.degree + 1, increasing=True)

    def hat_value(self, eps_raw) -> np.ndarray:
        """x(eps)^T (X^T X)^{-1} x(eps); squared leverage of a query point."""
        rows = self.powers(eps_raw)
        h = np.einsum("bi,ij,bj->b", rows, self._xtx_inv, rows)
        return h if np.ndim(eps_raw) else float(h[0])


def even_design(degree: int, n_points: int) -> PolyDesign:
    """Evenly spaced canonical design on [0, 1]; the N=1 design sits at the
    midpoint."""
    if n_points < 1:
        raise ValueError("need at least one design point")
    t = np.array([0.5]) if n_points == 1 else np.linspace(0.0, 1.0, n_points)
    return PolyDesign(thresholds=t, degree=degree)


# ---------------------------------------------------------------------------
# OLS across behavior thresholds


@dataclass(frozen=True)
class ThresholdEmbedding:
    """Fitted per-dimension polynomial z(eps) with residual noise scales."""

    degree: int
    coefficients: np.ndarray          # (M, degree + 1)
    eps_low: float
    eps_high: float
    sigma: np.ndarray                 # (M,) residual stds; zeros when dof = 0
    sigma_dof: int
    residual_corr_max: float
    design: PolyDesign

    @property
    def dimension(self) -> int:
        return self.coefficients.shape[0]

    @property
    def sigma_max(self) -> float:
        return float(np.max(self.sigma)) if self.sigma.size else 0.0

    @property
    def independent_dims(self) -> bool:
        """False when cross-dimension residual correlation exceeds the limit;
        the error bound is then only approximate."""
        return self.residual_corr_max <= RESIDUAL_CORR_LIMIT

    def z(self, eps_raw: float) -> np.ndarray:
        t = float(normalize_threshold(eps_raw, self.eps_low, self.eps_high))
        powers = t ** np.arange(self.degree + 1)
        return self.coefficients @ powers


def fit_z_poly(z_samples: np.ndarray, design: PolyDesign) -> ThresholdEmbedding:
    """OLS fit of z vectors observed at the design thresholds.

    ``z_samples`` has shape (N, M): one z vector per behavior threshold, in
    design order. Residual stds use the unbiased N - p - 1 denominator and are
    zero when there are no spare degrees of freedom.
    """
    z = np.asarray(z_samples, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] != design.n_points:
        raise ValueError(f"got {z.shape[0]} z samples for a design with "
                         f"{design.n_points} thresholds")
    x = design.x
    beta = np.linalg.solve(x.T @ x, x.T @ z)          # (p+1, M)
    resid = z - x @ beta
    dof = design.n_points - (design.degree + 1)
    if dof > 0:
        sigma = np.sqrt((resid ** 2).sum(axis=0) / dof)
    else:
        sigma = np.zeros(z.shape[1])
    corr_max = 0.0
    live = sigma > 1e-12
    if dof > 0 and live.sum() > 1:
        corr = np.corrcoef(resid[:, live].T)
        off = corr[~np.eye(corr.shape[0], dtype=bool)]
        corr_max = float(np.max(np.abs(off))) if off.size else 0.0
    return ThresholdEmbedding(degree=design.degree, coefficients=beta.T,
                              eps_low=design.eps_low, eps_high=design.eps_high,
                              sigma=sigma, sigma_dof=dof,
                              residual_corr_max=corr_max, design=design)


def prediction_interval(design: PolyDesign, sigma: float | None, eps_raw: float,
                        alpha: float = 0.05, m_dim: int = 1,
                        k_bound: float = 1.0) -> tuple[float, float]:
    """(half_width, variance) for the fitted value at a query threshold.

    Per-dimension variance sigma^2 * x^T (X^T X)^{-1} x; the two-sided
    half-width lifts it to the Q level: z_{alpha/2} * sqrt(var * K^2 * M)."""
    if sigma is None:
        sigma = design.noise_scale
    if sigma is None:
        raise ValueError("sigma must be given (or carried by the design)")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    var = sigma ** 2 * design.hat_value(eps_raw)
    half = two_sided_z(alpha) * math.sqrt(var * m_dim * k_bound ** 2)
    return half, var


def leverage_max(degree: int, n_points: int, grid_points: int = 10_001) -> float:
    """Worst-case leverage sqrt(x^T (X^T X)^{-1} x) of the evenly spaced
    N-point design, maximized over a dense grid of [0, 1]."""
    if n_points < degree + 1:
        raise ValueError("even design needs n_points >= degree + 1")
    design = even_design(degree, n_points)
    grid = np.linspace(0.0, 1.0, grid_points)
    return float(np.sqrt(np.max(design.hat_value(grid))))


@dataclass(frozen=True)
class BBetaFit:
    """Envelope constants: leverage_max(p, N) <= b / N^beta on the fitted
    range (max_violation <= 0 by construction)."""

    degree: int
    b: float
    beta: float
    n_range: tuple[int, ...]
    leverages: np.ndarray
    max_violation: float


def fit_B_beta(degree: int, n_range: Sequence[int] | None = None,
               grid_points: int = 10_001) -> BBetaFit:
    """Log-log fit of worst-case leverage against design size, then inflate
    the constant so the envelope dominates every computed point."""
    if n_range is None:
        n_range = range(degree + 1, 21)
    ns = np.array(sorted(set(int(n) for n in n_range)))
    if ns.size < 3:
        raise ValueError("need at least 3 design sizes to fit the envelope")
    if ns[0] < degree + 1:
        raise ValueError("design sizes must be at least degree + 1")
    lev = np.array([leverage_max(degree, int(n), grid_points) for n in ns])
    slope, intercept = np.polyfit(np.log(ns), np.log(lev), 1)
    beta = -float(slope)
    b = float(np.exp(intercept))
    b = max(b, float(np.max(lev * ns.astype(float) ** beta)))
    violation = float(np.max(lev - b / ns.astype(float) ** beta))
    return BBetaFit(degree=degree, b=b, beta=beta, n_range=tuple(ns),
                    leverages=lev, max_violation=violation)


@lru_cache(maxsize=None)
def _default_b_beta(degree: int) -> BBetaFit:
    return fit_B_beta(degree)


def estimation_error_bound(n_points: int, degree: int, sigma: float,
                           k_bound: float, m_dim: int, alpha: float = 0.05,
                           fit: BBetaFit | None = None) -> float:
    """High-confidence sup-norm bound on the fitted-Q error over thresholds
    inside the behavior interval: z_{alpha/2} * B / N^beta * sqrt(sigma^2 K^2 M)."""
    if n_points < degree + 1:
        raise ValueError("need n_points >= degree + 1")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if k_bound <= 0 or m_dim < 1:
        raise ValueError("invalid feature bound or dimension")
    if fit is None:
        fit = _default_b_beta(degree)
    z = two_sided_z(alpha)
    return z * fit.b / n_points ** fit.beta * math.sqrt(sigma ** 2 * k_bound ** 2 * m_dim)


# ---------------------------------------------------------------------------
# The critic itself


class VersatileQ:
    """One signal's threshold-conditioned critic.

    mode "two_stage": a raw z vector per behavior threshold is the live
    parameter set; ``fit_embedding`` extends to arbitrary thresholds by OLS.
    mode "joint": the polynomial coefficients are the live parameters and
    every threshold is served by them directly.
    """

    def __init__(self, psi: FeatureMap, behavior_thresholds: Sequence[float],
                 eps_low: float, eps_high: float, degree: int = 1,
                 mode: str = "two_stage"):
        if mode not in ("two_stage", "joint"):
            raise ValueError(f"unknown critic mode {mode!r}")
        self.psi = psi
        self.behavior_thresholds = np.asarray(behavior_thresholds, dtype=float)
        if self.behavior_thresholds.size < degree + 1:
            raise ValueError("need at least degree+1 behavior thresholds")
        self.eps_low = float(eps_low)
        self.eps_high = float(eps_high)
        self.degree = int(degree)
        self.mode = mode
        m = psi.dimension
        n = self.behavior_thresholds.size
        self.z_raw = np.zeros((n, m))
        self.z_raw_target = np.zeros((n, m))
        self.coeffs = np.zeros((m, degree + 1))
        self.coeffs_target = np.zeros((m, degree + 1))
        self.embedding: ThresholdEmbedding | None = None
        self._design = PolyDesign.from_raw(self.behavior_thresholds, degree,
                                           eps_low, eps_high)

    @property
    def design(self) -> PolyDesign:
        return self._design

    def behavior_index(self, eps: float) -> int | None:
        hit = np.nonzero(np.abs(self.behavior_thresholds - eps)
                         <= BEHAVIOR_MATCH_ATOL)[0]
        return int(hit[0]) if hit.size else None

    def _joint_z(self, eps: float, target: bool) -> np.ndarray:
        t = float(normalize_threshold(eps, self.eps_low, self.eps_high))
        powers = t ** np.arange(self.degree + 1)
        return (self.coeffs_target if target else self.coeffs) @ powers

    def z_at(self, eps: float, target: bool = False) -> np.ndarray:
        if self.mode == "joint":
            return self._joint_z(eps, target)
        i = self.behavior_index(eps)
        if i is not None:
            return self.z_raw_target[i] if target else self.z_raw[i]
        if target:
            raise ValueError("target parameters exist only at behavior "
                             "thresholds in two_stage mode")
        if self.embedding is None:
            raise RuntimeError(f"threshold {eps} is outside the behavior set "
                               "and no embedding is fitted; run fit_z_poly "
                               "(fit_embedding) first")
        return self.embedding.z(eps)

    def fit_embedding(self) -> ThresholdEmbedding:
        """OLS across the raw per-threshold z vectors (two_stage mode)."""
        if self.mode != "two_stage":
            raise RuntimeError("fit_embedding applies to two_stage mode only")
        self.embedding = fit_z_poly(self.z_raw, self._design)
        return self.embedding

    def current_embedding(self) -> ThresholdEmbedding:
        if self.mode == "joint":
            return ThresholdEmbedding(
                degree=self.degree, coefficients=self.coeffs.copy(),
                eps_low=self.eps_low, eps_high=self.eps_high,
                sigma=np.zeros(self.psi.dimension), sigma_dof=0,
                residual_corr_max=0.0, design=self._design)
        if self.embedding is None:
            raise RuntimeError("no embedding fitted yet")
        return self.embedding

    def q_rows_cells(self, cells, eps: float, target: bool = False) -> np.ndarray:
        """(B, A) Q table for pre-resolved cell ids (one-hot feature maps)."""
        psi = self.psi
        if not isinstance(psi, IndexedFeatureMap):
            raise TypeError("cell-indexed Q tables need a one-hot feature map")
        z = self.z_at(eps, target=target)
        cells = np.asarray(cells, dtype=int)
        idx = cells[:, None] * psi.n_actions + np.arange(psi.n_actions)[None, :]
        return z[idx]

    def q_rows(self, states, eps: float, target: bool = False) -> np.ndarray:
        """(B, A) table of Q(s, a | eps) for indexed feature maps."""
        psi = self.psi
        if not isinstance(psi, IndexedFeatureMap):
            raise TypeError("q_rows needs an indexed (one-hot) feature map")
        return self.q_rows_cells(psi.state_indices(states), eps, target=target)

    def polyak(self, rho: float) -> None:
        if not (0.0 <= rho <= 1.0):
            raise ValueError(f"polyak rho must lie in [0, 1], got {rho}")
        self.z_raw_target = rho * self.z_raw_target + (1.0 - rho) * self.z_raw
        self.coeffs_target = rho * self.coeffs_target + (1.0 - rho) * self.coeffs


def q_value(critic: VersatileQ, state, action: int, eps: float) -> float:
    """Q(s, a | eps) = psi(s, a)^T z(eps)."""
    psi = critic.psi
    z = critic.z_at(eps)
    if isinstance(psi, IndexedFeatureMap):
        idx = int(psi.pair_indices(np.asarray([state]), np.asarray([action]))[0])
        # one-hot shortcut; still counts as a psi evaluation bound-wise (K=1)
        return float(z[idx])
    return float(psi(state, action) @ z)


@dataclass
class CriticPair:
    """Reward and cost critics trained side by side."""

    reward: VersatileQ
    cost: VersatileQ

    def fit_embeddings(self) -> None:
        self.reward.fit_embedding()
        self.cost.fit_embedding()

    def polyak(self, rho: float) -> None:
        self.reward.polyak(rho)
        self.cost.polyak(rho)


def make_critic_pair(psi_r: FeatureMap, psi_c: FeatureMap,
                     behavior_thresholds, eps_low: float, eps_high: float,
                     degree: int = 1, mode: str = "two_stage") -> CriticPair:
    return CriticPair(
        reward=VersatileQ(psi_r, behavior_thresholds, eps_low, eps_high,
                          degree, mode),
        cost=VersatileQ(psi_c, behavior_thresholds, eps_low, eps_high,
                        degree, mode))


def polyak_update(critic: CriticPair | VersatileQ, rho: float) -> None:
    """target <- rho * target + (1 - rho) * online, for all live parameters."""
    if isinstance(critic, CriticPair):
        critic.polyak(rho)
    else:
        critic.polyak(rho)


def _signal_step(vq: VersatileQ, eps: float, states, actions, values,
                 next_states, next_probs, lr: float, gamma: float) -> float:
    psi = vq.psi
    if not isinstance(psi, IndexedFeatureMap):
        raise TypeError("msbe_update needs indexed (one-hot) feature maps")
    idx_sa = psi.pair_indices(states, actions)
    cells_next = psi.state_indices(next_states)
    idx_next = cells_next[:, None] * psi.n_actions \
        + np.arange(psi.n_actions)[None, :]
    if vq.mode == "two_stage":
        i = vq.behavior_index(eps)
        if i is None:
            raise ValueError(f"batch threshold {eps} is not a behavior threshold")
        q_sa = vq.z_raw[i][idx_sa]
        q_next = vq.z_raw_target[i][idx_next]
        target = values + gamma * np.sum(next_probs * q_next, axis=1)
        resid = q_sa - target
        grad = np.zeros_like(vq.z_raw[i])
        np.add.at(grad, idx_sa, 2.0 * resid / resid.size)
        vq.z_raw[i] -= lr * grad
    else:
        t = float(normalize_threshold(eps, vq.eps_low, vq.eps_high))
        powers = t ** np.arange(vq.degree + 1)
        z = vq.coeffs @ powers
        z_t = vq.coeffs_target @ powers
        q_sa = z[idx_sa]
        q_next = z_t[idx_next]
        target = values + gamma * np.sum(next_probs * q_next, axis=1)
        resid = q_sa - target
        grad_z = np.zeros(psi.dimension)
        np.add.at(grad_z, idx_sa, 2.0 * resid / resid.size)
        vq.coeffs -= lr * np.outer(grad_z, powers)
    return float(np.mean(resid ** 2))


def msbe_update(critic: CriticPair, batches: Mapping[float, Mapping[str, np.ndarray]],
                next_probs_fn: Callable[[np.ndarray, float], np.ndarray],
                lr: float, gamma: float) -> tuple[float, float]:
    """One squared-Bellman-error gradient step per signal.

    ``batches`` maps each behavior threshold to arrays with keys
    states/actions/rewards/costs/next_states. Targets bootstrap through the
    target parameters and the given policy's next-action probabilities.
    Returns the pre-step (reward, cost) losses summed over thresholds.
    """
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    if not batches:
        raise ValueError("msbe_update called with no batches")
    loss_r = loss_c = 0.0
    for eps, batch in batches.items():
        states = batch["states"]
        if len(np.atleast_1d(states)) == 0:
            raise ValueError(f"empty batch for threshold {eps}")
        next_probs = next_probs_fn(batch["next_states"], eps)
        loss_r += _signal_step(critic.reward, eps, states, batch["actions"],
                               batch["rewards"], batch["next_states"],
                               next_probs, lr, gamma)
        loss_c += _signal_step(critic.cost, eps, states, batch["actions"],
                               batch["costs"], batch["next_states"],
                               next_probs, lr, gamma)
    return loss_r, loss_c


# ---------------------------------------------------------------------------
# Comparison against ground truth


@dataclass(frozen=True)
class CompareRow:
    epsilon: float
    signal: str
    mae: float
    wasserstein: float


def q_distribution_compare(critic: CriticPair, truth: Mapping[float, object],
                           states: Sequence[int],
                           signals: Sequence[str] = ("reward", "cost")
                           ) -> list[CompareRow]:
    """Per-threshold agreement between a critic and exact Q tables: mean
    absolute error plus 1-D Wasserstein distance between the value samples."""
    rows: list[CompareRow] = []
    for eps in sorted(truth):
        gt = truth[eps]
        for signal in signals:
            table = getattr(gt, "q_reward" if signal == "reward" else "q_cost")
            vq = critic.reward if signal == "reward" else critic.cost
            n_actions = table.shape[1]
            pred, true = [], []
            for s in states:
                for a in range(n_actions):
                    pred.append(q_value(vq, s, a, eps))
                    true.append(float(table[s, a]))
            pred_arr = np.asarray(pred)
            true_arr = np.asarray(true)
            rows.append(CompareRow(
                epsilon=float(eps), signal=signal,
                mae=float(np.mean(np.abs(pred_arr - true_arr))),
                wasserstein=float(wasserstein_distance(pred_arr, true_arr))))
    return rows
