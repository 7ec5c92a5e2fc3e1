"""Constrained variational inference for threshold-conditioned policies.

The E-step maximizes expected reward-Q under a nonparametric policy q subject
to a cost-Q constraint (threshold eps) and a KL trust region around the
current policy (radius kappa). Its dual over the temperature eta and cost
multiplier lambda,

    g(eta, lambda) = lambda eps + eta kappa
                     + eta sum_s rho_s log sum_a pi_old exp((Q_r - lambda Q_c) / eta),

is jointly convex and is minimized by projected coordinate descent with
golden-section line searches. The optimizer of the primal is the tilted
closed form q* ~ pi_old exp((Q_r - lambda* Q_c) / eta*). The M-step projects
the q* targets back onto the parametric conditioned policy under a per-
threshold KL trust region of radius kl_m.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .critic import normalize_threshold

ETA_FLOOR = 1e-6
LAMBDA_MAX = 1e6
_ETA_SEARCH_MAX = 1e9
_LOG_ETA_BOUNDS = (math.log(ETA_FLOOR), math.log(_ETA_SEARCH_MAX))
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


class DualSolveError(RuntimeError):
    """Dual minimization failed to reach the gradient tolerance."""

    def __init__(self, message: str, grad_norm: float):
        super().__init__(message)
        self.grad_norm = grad_norm


class MStepError(RuntimeError):
    pass


@dataclass(frozen=True)
class DualVars:
    """Temperature and cost multiplier; box-validated."""

    eta: float
    lam: float

    def __post_init__(self):
        if not (self.eta >= ETA_FLOOR):
            raise ValueError(f"eta must be at least {ETA_FLOOR}, got {self.eta}")
        if not (0.0 <= self.lam <= LAMBDA_MAX):
            raise ValueError(f"lambda must lie in [0, {LAMBDA_MAX}], got {self.lam}")


@dataclass(frozen=True)
class TrustRegionConfig:
    """E-step radius kappa, M-step radius kl_m, entropy temperature alpha."""

    kappa: float
    kl_m: float
    alpha_temp: float

    def __post_init__(self):
        if self.kappa <= 0 or self.kl_m < 0 or self.alpha_temp < 0:
            raise ValueError(
                "kappa must be positive, kl_m and alpha_temp nonnegative")
        if self.kl_m >= self.kappa:
            warnings.warn(
                "kl_m >= kappa: the training-robustness argument needs the "
                "policy-update radius strictly below the variational radius",
                RuntimeWarning, stacklevel=2)


@dataclass(frozen=True)
class VariationalPolicy:
    """Nonparametric E-step output over a batch of states at one threshold."""

    states: np.ndarray          # (B,) state ids (cells for aggregated batches)
    probs: np.ndarray           # (B, A) rows sum to 1
    epsilon: float
    weights: np.ndarray         # (B,) state weights, sum to 1

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "states", np.asarray(self.states))
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if probs.ndim != 2:
            raise ValueError("probs must be (B, A)")
        if np.any(probs < -1e-12) or np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-10:
            raise ValueError("variational policy rows must be distributions")
        if w.shape != (probs.shape[0],) or abs(w.sum() - 1.0) > 1e-8:
            raise ValueError("weights must be a distribution over the batch")


def _validate_dual_inputs(weights, pi_old, q_reward, q_cost):
    w = np.asarray(weights, dtype=float)
    pi = np.asarray(pi_old, dtype=float)
    qr = np.asarray(q_reward, dtype=float)
    qc = np.asarray(q_cost, dtype=float)
    if pi.ndim != 2 or qr.shape != pi.shape or qc.shape != pi.shape:
        raise ValueError("pi_old, q_reward, q_cost must share shape (B, A)")
    if w.shape != (pi.shape[0],):
        raise ValueError("weights must have one entry per state row")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
        raise ValueError("weights must be a probability vector")
    if np.any(pi < -1e-12) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-8:
        raise ValueError("pi_old rows must be distributions")
    if not (np.all(np.isfinite(qr)) and np.all(np.isfinite(qc))):
        raise ValueError("Q tables must be finite")
    return w / w.sum(), np.clip(pi, 0.0, None), qr, qc


def _log_pi(pi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(pi > 0.0, np.log(np.clip(pi, 1e-300, None)), -np.inf)


def dual_value(duals: DualVars, weights, pi_old, q_reward, q_cost,
               epsilon: float, kappa: float) -> float:
    """g(eta, lambda); stable log-sum-exp per state row."""
    w, pi, qr, qc = _validate_dual_inputs(weights, pi_old, q_reward, q_cost)
    return _dual_value_raw(duals.eta, duals.lam, w, _log_pi(pi), qr, qc,
                           epsilon, kappa)


def _dual_value_raw(eta, lam, w, log_pi, qr, qc, epsilon, kappa) -> float:
    scores = log_pi + (qr - lam * qc) / eta
    m = scores.max(axis=1)
    lse = m + np.log(np.exp(scores - m[:, None]).sum(axis=1))
    return float(lam * epsilon + eta * kappa + eta * (w @ lse))


def _dual_grad_raw(eta, lam, w, log_pi, qr, qc, epsilon, kappa):
    scores = log_pi + (qr - lam * qc) / eta
    m = scores.max(axis=1)
    shifted = np.exp(scores - m[:, None])
    denom = shifted.sum(axis=1)
    q = shifted / denom[:, None]
    lse = m + np.log(denom)
    v = qr - lam * qc
    g_eta = kappa + float(w @ (lse - (q * v).sum(axis=1) / eta))
    g_lam = epsilon - float(w @ (q * qc).sum(axis=1))
    return g_eta, g_lam


def _dual_hessian_raw(eta, lam, w, log_pi, qr, qc):
    """Closed-form Hessian of g in (eta, lambda) from tilted moments:
    [[sum w Var(v)/eta^3, sum w Cov(v,Qc)/eta^2],
     [  (symmetric)     , sum w Var(Qc)/eta   ]] with v = Qr - lam*Qc."""
    v = qr - lam * qc
    scores = log_pi + v / eta
    scores = scores - scores.max(axis=1, keepdims=True)
    q = np.exp(scores)
    q /= q.sum(axis=1, keepdims=True)
    ev = (q * v).sum(axis=1)
    ec = (q * qc).sum(axis=1)
    var_v = (q * (v - ev[:, None]) ** 2).sum(axis=1)
    var_c = (q * (qc - ec[:, None]) ** 2).sum(axis=1)
    cov = (q * (v - ev[:, None]) * (qc - ec[:, None])).sum(axis=1)
    h_ee = float(w @ var_v) / eta ** 3
    h_el = float(w @ cov) / eta ** 2
    h_ll = float(w @ var_c) / eta
    return h_ee, h_el, h_ll


def _golden(h: Callable[[float], float], lo: float, hi: float,
            tol: float) -> float:
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    hc, hd = h(c), h(d)
    while b - a > tol:
        if hc < hd:
            b, d, hd = d, c, hc
            c = b - _INVPHI * (b - a)
            hc = h(c)
        else:
            a, c, hc = c, d, hd
            d = a + _INVPHI * (b - a)
            hd = h(d)
    x = 0.5 * (a + b)
    # Return the best of the probes; h is unimodal so ties are benign.
    best = min((h(lo), lo), (hc, c), (hd, d), (h(hi), hi), (h(x), x))
    return best[1]


def _descend_coordinate(h: Callable[[float], float], x0: float, lo: float,
                        hi: float, tol: float) -> float:
    """Minimize unimodal h over [lo, hi] by golden section on a local window
    that expands while the minimizer sits on a window edge."""
    width = 1.0
    x = x0
    for _ in range(64):
        a = max(lo, x - width)
        b = min(hi, x + width)
        x = _golden(h, a, b, tol)
        on_left = (x - a) <= 4 * tol and a > lo
        on_right = (b - x) <= 4 * tol and b < hi
        if not (on_left or on_right):
            return x
        width *= 4.0
        if width >= 2 * (hi - lo):
            return _golden(h, lo, hi, tol)
    return x


@dataclass(frozen=True)
class DualSolution:
    duals: DualVars
    value: float
    grad_norm: float
    sweeps: int
    expected_cost: float       # weighted E_{q*}[Q_c]
    kl: float                  # weighted KL(q* || pi_old)
    slater_warning: bool


def closed_form_q(pi_old, q_reward, q_cost, duals: DualVars) -> np.ndarray:
    """Tilted update q* ~ pi_old * exp((Q_r - lambda Q_c) / eta), row-wise."""
    pi = np.asarray(pi_old, dtype=float)
    batched = pi.ndim == 2
    pi = np.atleast_2d(pi)
    qr = np.atleast_2d(np.asarray(q_reward, dtype=float))
    qc = np.atleast_2d(np.asarray(q_cost, dtype=float))
    scores = _log_pi(np.clip(pi, 0.0, None)) + (qr - duals.lam * qc) / duals.eta
    scores -= scores.max(axis=1, keepdims=True)
    q = np.exp(scores)
    q /= q.sum(axis=1, keepdims=True)
    return q if batched else q[0]


def kl_rows(p, q) -> np.ndarray:
    """Row-wise KL(p || q); p mass on q's zeros yields +inf."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    support = p > 0
    terms = np.zeros_like(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.log(np.clip(p, 1e-300, None)) - np.log(np.clip(q, 1e-300, None))
    terms[support] = p[support] * ratio[support]
    out = terms.sum(axis=1)
    out[np.any(support & (q <= 0.0), axis=1)] = np.inf
    return out


@dataclass(frozen=True)
class CostFloor:
    """Minimum weighted expected cost reachable inside the KL ball."""

    cost: float
    tau: float                 # tilt temperature of the minimizer
    probs: np.ndarray          # (B, A) minimizing rows
    kl: float                  # weighted KL at the minimizer


def ball_min_cost(weights, pi_old, q_cost, kappa: float) -> CostFloor:
    """Exact minimum of the weighted expected cost over the KL ball.

    The minimizer lies on the one-parameter tilt family
    q(tau) ~ pi_old * exp(-Q_c / tau) (KKT of the cost-only subproblem), and
    the ball constraint is monotone in tau, so geometric bisection suffices.
    Any threshold at or below this floor has no strictly feasible point."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    w = np.asarray(weights, dtype=float)
    pi = np.atleast_2d(np.asarray(pi_old, dtype=float))
    qc = np.atleast_2d(np.asarray(q_cost, dtype=float))
    log_pi = _log_pi(pi)

    def tilt(tau: float):
        scores = log_pi - qc / tau
        scores = scores - scores.max(axis=1, keepdims=True)
        q = np.exp(scores)
        q /= q.sum(axis=1, keepdims=True)
        kl = float(w @ kl_rows(q, pi))
        cost = float(w @ (q * qc).sum(axis=1))
        return q, kl, cost

    lo, hi = 1e-9, 1e9
    q_lo, kl_lo, cost_lo = tilt(lo)
    if kl_lo <= kappa:            # even the hardest tilt fits inside the ball
        return CostFloor(cost=cost_lo, tau=lo, probs=q_lo, kl=kl_lo)
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if tilt(mid)[1] > kappa:
            lo = mid
        else:
            hi = mid
    q, kl, cost = tilt(hi)
    return CostFloor(cost=cost, tau=hi, probs=q, kl=kl)


def _projected_gradient(eta, lam, g_eta, g_lam):
    """Gradient with bound-blocked components zeroed (KKT residual)."""
    if eta <= ETA_FLOOR * (1 + 1e-9):
        pg_eta = min(g_eta, 0.0)
    elif eta >= 0.999 * _ETA_SEARCH_MAX:
        pg_eta = max(g_eta, 0.0)
    else:
        pg_eta = g_eta
    if lam <= 0.0:
        pg_lam = min(g_lam, 0.0)
    elif lam >= LAMBDA_MAX:
        pg_lam = max(g_lam, 0.0)
    else:
        pg_lam = g_lam
    return pg_eta, pg_lam


def solve_dual(weights, pi_old, q_reward, q_cost, epsilon: float,
               kappa: float, tol: float = 1e-6, max_sweeps: int = 10_000,
               init: DualVars | None = None) -> DualSolution:
    """Minimize g over the dual box: coordinate golden-section sweeps to find
    the basin, then projected Newton steps in (log eta, lambda) to drive the
    projected gradient below tol.

    eta is handled on a log scale (monotone reparameterization keeps g
    unimodal along the coordinate and scales the Newton model sensibly).
    Flat directions are resolved toward the smallest feasible lambda; a
    lambda pinned at the cap raises a Slater warning.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    w, pi, qr, qc = _validate_dual_inputs(weights, pi_old, q_reward, q_cost)
    log_pi = _log_pi(pi)

    def g(eta, lam):
        return _dual_value_raw(eta, lam, w, log_pi, qr, qc, epsilon, kappa)

    def grad(eta, lam):
        return _dual_grad_raw(eta, lam, w, log_pi, qr, qc, epsilon, kappa)

    eta = init.eta if init else 1.0
    lam = init.lam if init else 0.0
    u_lo, u_hi = _LOG_ETA_BOUNDS
    pg_norm = math.inf
    sweeps = 0

    def converged() -> bool:
        nonlocal pg_norm
        g_eta, g_lam = grad(eta, lam)
        pg_norm = math.hypot(*_projected_gradient(eta, lam, g_eta, g_lam))
        return pg_norm <= tol

    # Phase 1: coordinate sweeps (cheap, globally safe on a convex g).
    for _ in range(4):
        sweeps += 1
        u = _descend_coordinate(lambda t: g(math.exp(t), lam),
                                math.log(eta), u_lo, u_hi, tol=1e-10)
        eta = math.exp(u)
        lam = _descend_coordinate(lambda t: g(eta, t), lam, 0.0, LAMBDA_MAX,
                                  tol=1e-9 * (1.0 + lam))
        if converged():
            break

    # Phase 2: projected Newton in x = (log eta, lambda) with the analytic
    # Hessian; coordinate descent alone zigzags on ill-conditioned instances
    # and may need thousands of sweeps.
    if pg_norm > tol:
        u = math.log(eta)
        g_val = g(eta, lam)
        for _ in range(max_sweeps):
            sweeps += 1
            g_eta, g_lam = grad(eta, lam)
            pg = _projected_gradient(eta, lam, g_eta, g_lam)
            pg_norm = math.hypot(*pg)
            if pg_norm <= tol:
                break
            gx = np.array([g_eta * eta, g_lam])      # d/d(log eta), d/d(lam)
            h_ee, h_el, h_ll = _dual_hessian_raw(eta, lam, w, log_pi, qr, qc)
            guu = eta * eta * h_ee + eta * g_eta     # chain rule for u=log eta
            gul = eta * h_el
            gll = h_ll
            hess = np.array([[guu, gul], [gul, gll]])
            # active set: coordinates pinned at a bound with a KKT-consistent
            # gradient sign are frozen, else Newton keeps pushing into the wall
            free = [i for i, p in enumerate(pg) if p != 0.0]
            if not free:
                break
            gx_f = gx[free]
            hess_f = hess[np.ix_(free, free)]
            # damp until positive definite; fall back to a scaled gradient step
            step_f = None
            damp = 0.0
            for _ in range(8):
                try:
                    cand = np.linalg.solve(hess_f + damp * np.eye(len(free)),
                                           -gx_f)
                except np.linalg.LinAlgError:
                    cand = None
                if cand is not None and float(cand @ gx_f) < 0:
                    step_f = cand
                    break
                damp = max(2.0 * damp, 1e-8 * (1.0 + abs(guu) + abs(gll)))
            if step_f is None:
                step_f = -gx_f / max(1.0, float(np.linalg.norm(gx_f)))
            step = np.zeros(2)
            step[free] = step_f
            if abs(step[0]) > 8.0:           # keep exp(u) in a sane range;
                step *= 8.0 / abs(step[0])   # lambda rides free, Armijo trims
            accepted = False
            t = 1.0
            for _ in range(60):
                u_new = min(max(u + t * step[0], u_lo), u_hi)
                lam_new = min(max(lam + t * step[1], 0.0), LAMBDA_MAX)
                g_new = g(math.exp(u_new), lam_new)
                if g_new <= g_val + 1e-12 * (1.0 + abs(g_val)):
                    moved = (abs(u_new - u) + abs(lam_new - lam)) > 0
                    u, lam, g_val = u_new, lam_new, g_new
                    eta = math.exp(u)
                    accepted = moved
                    break
                t *= 0.5
            if not accepted:
                # Newton stalled: one safeguarding coordinate sweep
                u = _descend_coordinate(lambda s: g(math.exp(s), lam), u,
                                        u_lo, u_hi, tol=1e-12)
                eta = math.exp(u)
                lam = _descend_coordinate(lambda s: g(eta, s), lam, 0.0,
                                          LAMBDA_MAX, tol=1e-11 * (1.0 + lam))
                g_val = g(eta, lam)
                if converged():
                    break
        else:
            raise DualSolveError(
                f"dual solve stopped after {max_sweeps} iterations with "
                f"projected gradient norm {pg_norm:.3e} > {tol:.1e}",
                grad_norm=pg_norm)
    if pg_norm > tol:
        raise DualSolveError(
            f"dual solve stopped after {sweeps} iterations with projected "
            f"gradient norm {pg_norm:.3e} > {tol:.1e}", grad_norm=pg_norm)

    # Flat-direction tie-break: walk lambda down while g stays at the optimum.
    g_star = g(eta, lam)
    if lam > 0.0 and g(eta, 0.0) <= g_star + 1e-12:
        lam = 0.0
    elif lam > 0.0:
        lo_l, hi_l = 0.0, lam
        for _ in range(80):
            mid = 0.5 * (lo_l + hi_l)
            if g(eta, mid) <= g_star + 1e-12:
                hi_l = mid
            else:
                lo_l = mid
        lam = hi_l

    eta = max(eta, ETA_FLOOR)
    duals = DualVars(eta=eta, lam=min(lam, LAMBDA_MAX))
    q = closed_form_q(pi, qr, qc, duals)
    expected_cost = float(w @ (q * qc).sum(axis=1))
    kl = float(w @ kl_rows(q, pi))
    slater = duals.lam >= 0.999 * LAMBDA_MAX
    if slater:
        warnings.warn(
            f"cost multiplier pinned at the cap ({LAMBDA_MAX:.0e}); the "
            f"threshold {epsilon} looks infeasible within the trust region "
            "(no strictly feasible interior point)", RuntimeWarning,
            stacklevel=2)
    return DualSolution(duals=duals, value=g(duals.eta, duals.lam),
                        grad_norm=pg_norm, sweeps=sweeps,
                        expected_cost=expected_cost, kl=kl,
                        slater_warning=slater)


@dataclass(frozen=True)
class EStepResult:
    policy: VariationalPolicy
    dual: DualSolution
    cost_slack: float          # epsilon - E_q[Q_c]
    kl_slack: float            # kappa - KL(q || pi_old)
    complementary_slackness: float
    feasible: bool
    slater_ok: bool


def estep(weights, pi_old, q_reward, q_cost, epsilon: float, kappa: float,
          states=None, tol: float = 1e-6,
          feasibility_tol: float = 1e-3) -> EStepResult:
    """Solve the trust-region E-step at one threshold over a batch of states.

    ``pi_old``, ``q_reward``, ``q_cost`` are (B, A) rows aligned with
    ``weights``. The result carries the tilted policy and feasibility
    diagnostics; ``slater_ok`` is False when the multiplier railed at its cap.

    A threshold below the in-ball cost floor has no feasible point and the
    dual recedes to -inf, so that case is detected up front and answered with
    the most conservative update available: the in-ball cost minimizer.
    """
    floor = ball_min_cost(weights, pi_old, q_cost, kappa)
    if floor.cost >= epsilon:
        warnings.warn(
            f"threshold {epsilon} is below the lowest cost reachable inside "
            f"the trust region ({floor.cost:.6g}); falling back to the "
            "in-ball cost minimizer", RuntimeWarning, stacklevel=2)
        w, pi, qr, qc = _validate_dual_inputs(weights, pi_old,
                                              q_reward, q_cost)
        duals = DualVars(eta=max(floor.tau, ETA_FLOOR), lam=LAMBDA_MAX)
        sol = DualSolution(
            duals=duals,
            value=_dual_value_raw(duals.eta, duals.lam, w, _log_pi(pi),
                                  qr, qc, epsilon, kappa),
            grad_norm=math.inf, sweeps=0, expected_cost=floor.cost,
            kl=floor.kl, slater_warning=True)
        q = floor.probs
    else:
        sol = solve_dual(weights, pi_old, q_reward, q_cost, epsilon,
                         kappa, tol)
        q = closed_form_q(pi_old, q_reward, q_cost, sol.duals)
    b = q.shape[0]
    if states is None:
        states = np.arange(b)
    w = np.asarray(weights, dtype=float)
    var_policy = VariationalPolicy(states=states, probs=q, epsilon=epsilon,
                                   weights=w / w.sum())
    cost_slack = epsilon - sol.expected_cost
    kl_slack = kappa - sol.kl
    comp = sol.duals.lam * (sol.expected_cost - epsilon)
    feasible = (cost_slack >= -feasibility_tol) and (kl_slack >= -feasibility_tol)
    return EStepResult(policy=var_policy, dual=sol, cost_slack=cost_slack,
                       kl_slack=kl_slack, complementary_slackness=comp,
                       feasible=feasible,
                       slater_ok=feasible and not sol.slater_warning)


# ---------------------------------------------------------------------------
# Parametric conditioned policy and M-step


class ParametricPolicy:
    """Softmax policy with logits affine in the normalized threshold:
    logit(s, a, eps) = theta[cell(s), a, 0] + theta[cell(s), a, 1] * t(eps).
    """

    def __init__(self, n_cells: int, n_actions: int, eps_low: float,
                 eps_high: float, indexer: Callable | None = None,
                 theta: np.ndarray | None = None):
        self.n_cells = int(n_cells)
        self.n_actions = int(n_actions)
        self.eps_low = float(eps_low)
        self.eps_high = float(eps_high)
        self.indexer = indexer
        if theta is None:
            theta = np.zeros((n_cells, n_actions, 2))
        if theta.shape != (n_cells, n_actions, 2):
            raise ValueError("theta must be (n_cells, n_actions, 2)")
        self.theta = np.asarray(theta, dtype=float)

    @classmethod
    def biased(cls, n_cells: int, n_actions: int, eps_low: float,
               eps_high: float, action: int, bias: float,
               indexer: Callable | None = None) -> "ParametricPolicy":
        """Start with one action favored everywhere (e.g. a known-safe one)."""
        pol = cls(n_cells, n_actions, eps_low, eps_high, indexer)
        pol.theta[:, action, 0] = bias
        return pol

    def clone(self) -> "ParametricPolicy":
        return ParametricPolicy(self.n_cells, self.n_actions, self.eps_low,
                                self.eps_high, self.indexer, self.theta.copy())

    def t(self, eps: float) -> float:
        return float(normalize_threshold(eps, self.eps_low, self.eps_high))

    def cells_of(self, states) -> np.ndarray:
        if self.indexer is None:
            return np.asarray(states, dtype=int)
        return np.asarray(self.indexer(states), dtype=int)

    def probs_for_cells(self, cells: np.ndarray, eps: float) -> np.ndarray:
        logits = self.theta[cells, :, 0] + self.theta[cells, :, 1] * self.t(eps)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def probs_matrix(self, states, eps: float) -> np.ndarray:
        return self.probs_for_cells(self.cells_of(states), eps)

    def action_probs(self, state, eps: float) -> np.ndarray:
        return self.probs_matrix(np.asarray([state]), eps)[0]

    def conditioned(self, eps: float) -> Callable[[object], np.ndarray]:
        return lambda state: self.action_probs(state, eps)

    def table(self, eps: float) -> np.ndarray:
        """(n_cells, A) probability table at one threshold."""
        return self.probs_for_cells(np.arange(self.n_cells), eps)


@dataclass(frozen=True)
class MStepTarget:
    """One threshold's projection target: q* rows over a weighted state batch."""

    cells: np.ndarray
    weights: np.ndarray
    probs: np.ndarray
    epsilon: float

    @classmethod
    def from_estep(cls, result: EStepResult, cells=None) -> "MStepTarget":
        vp = result.policy
        return cls(cells=np.asarray(vp.states if cells is None else cells,
                                    dtype=int),
                   weights=vp.weights, probs=vp.probs, epsilon=vp.epsilon)


@dataclass(frozen=True)
class MStepResult:
    policy: ParametricPolicy
    objective: float
    kl_per_threshold: np.ndarray
    backoffs: int
    step_scale: float


def mstep(policy: ParametricPolicy, targets: Sequence[MStepTarget],
          trust: TrustRegionConfig, lr: float = 0.5, iters: int = 60,
          penalty: float = 10.0, kl_slack: float = 1e-3,
          max_backoffs: int = 60) -> MStepResult:
    """Project E-step targets onto the parametric policy.

    Penalized gradient ascent on the weighted log-likelihood of the q*
    targets, followed by a line-search backoff toward the old parameters that
    restores every per-threshold KL(pi_old || pi_new) <= kl_m + kl_slack.
    The old policy is never consulted through mutable state: its rows are
    frozen up front.
    """
    if not targets:
        raise ValueError("mstep needs at least one target")
    theta_old = policy.theta.copy()
    old_rows = [policy.probs_for_cells(tgt.cells, tgt.epsilon)
                for tgt in targets]
    n_t = len(targets)
    if trust.kl_m == 0.0:
        # Zero-radius trust region: the only admissible policy is the old one.
        return MStepResult(policy=policy.clone(), objective=0.0,
                           kl_per_threshold=np.zeros(n_t), backoffs=0,
                           step_scale=0.0)

    def kls(theta: np.ndarray) -> np.ndarray:
        probe = ParametricPolicy(policy.n_cells, policy.n_actions,
                                 policy.eps_low, policy.eps_high,
                                 policy.indexer, theta)
        out = np.empty(n_t)
        for i, tgt in enumerate(targets):
            new_rows = probe.probs_for_cells(tgt.cells, tgt.epsilon)
            out[i] = float(tgt.weights @ kl_rows(old_rows[i], new_rows))
        return out

    def objective(theta: np.ndarray) -> float:
        probe = ParametricPolicy(policy.n_cells, policy.n_actions,
                                 policy.eps_low, policy.eps_high,
                                 policy.indexer, theta)
        total = 0.0
        for tgt in targets:
            rows = probe.probs_for_cells(tgt.cells, tgt.epsilon)
            log_rows = np.log(np.clip(rows, 1e-300, None))
            total += float(tgt.weights @ (tgt.probs * log_rows).sum(axis=1))
        return total / n_t

    theta = theta_old.copy()
    for _ in range(iters):
        grad = np.zeros_like(theta)
        probe = ParametricPolicy(policy.n_cells, policy.n_actions,
                                 policy.eps_low, policy.eps_high,
                                 policy.indexer, theta)
        for i, tgt in enumerate(targets):
            t_eps = policy.t(tgt.epsilon)
            rows = probe.probs_for_cells(tgt.cells, tgt.epsilon)
            # log-likelihood term
            g_logits = (tgt.probs - rows) * tgt.weights[:, None] / n_t
            kl_i = float(tgt.weights @ kl_rows(old_rows[i], rows))
            if kl_i > trust.kl_m:
                # d KL(old || new) / d logits_new = new - old, per row
                g_logits -= (2.0 * penalty * (kl_i - trust.kl_m)
                             * (rows - old_rows[i]) * tgt.weights[:, None])
            np.add.at(grad[:, :, 0], tgt.cells, g_logits)
            np.add.at(grad[:, :, 1], tgt.cells, g_logits * t_eps)
        theta = theta + lr * grad
        if not np.all(np.isfinite(theta)):
            raise MStepError("non-finite parameters during the M-step ascent")

    delta = theta - theta_old
    scale = 1.0
    backoffs = 0
    while backoffs <= max_backoffs:
        candidate = theta_old + scale * delta
        kl_vals = kls(candidate)
        if not np.all(np.isfinite(kl_vals)):
            raise MStepError("non-finite KL during the M-step backoff")
        if np.max(kl_vals) <= trust.kl_m + kl_slack:
            break
        scale *= 0.5
        backoffs += 1
    else:
        # Smooth KLs vanish as scale -> 0, so landing here means the
        # constraint is unrecoverable (degenerate targets).
        raise MStepError(
            f"KL trust region unrecoverable after {max_backoffs} backoffs; "
            f"max KL {np.max(kl_vals):.3e} vs radius {trust.kl_m:.3e}")
    new_policy = ParametricPolicy(policy.n_cells, policy.n_actions,
                                  policy.eps_low, policy.eps_high,
                                  policy.indexer, candidate)
    return MStepResult(policy=new_policy, objective=objective(candidate),
                       kl_per_threshold=kl_vals, backoffs=backoffs,
                       step_scale=scale)


# ---------------------------------------------------------------------------
# ELBO


def elbo(q_probs, policy, epsilon: float, alpha_temp: float, *,
         model=None, batch=None, gamma: float | None = None,
         states=None, weights=None) -> float:
    """Entropy-regularized objective E[return under q] - alpha * KL(q || pi).

    Exact path (``model`` given): ``q_probs`` is a full (S, A) table; the
    return and the occupancy weighting the KL term are computed in closed
    form. Monte-Carlo path (``batch`` given): ``batch`` is a sequence of
    trajectories sampled under q, and the KL term averages over the state
    batch ``states`` (``q_probs`` rows aligned with ``weights``).
    """
    if (model is None) == (batch is None):
        raise ValueError("give exactly one of model= or batch=")
    if model is not None:
        from .oracle import occupancy_of, start_value
        q_table = np.asarray(q_probs, dtype=float)
        value = start_value(model, q_table, "reward")
        rho = occupancy_of(model, q_table).sum(axis=1)
        pi_rows = (policy.probs_matrix(np.arange(model.n_states), epsilon)
                   if isinstance(policy, ParametricPolicy)
                   else np.asarray(policy, dtype=float))
        kl = float(rho @ kl_rows(q_table, pi_rows))
        return value - alpha_temp * kl
    if gamma is None:
        raise ValueError("Monte-Carlo path needs gamma")
    from .cmdp import discounted_return
    returns = [discounted_return(traj, gamma, "reward") for traj in batch]
    q_rows = np.atleast_2d(np.asarray(q_probs, dtype=float))
    if states is None:
        states = np.arange(q_rows.shape[0])
    w = (np.full(q_rows.shape[0], 1.0 / q_rows.shape[0])
         if weights is None else np.asarray(weights, dtype=float))
    pi_rows = (policy if isinstance(policy, np.ndarray)
               else policy.probs_matrix(states, epsilon))
    kl = float(w @ kl_rows(q_rows, pi_rows))
    return float(np.mean(returns)) - alpha_temp * kl
