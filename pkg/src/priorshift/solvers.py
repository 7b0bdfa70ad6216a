"""Fixed-point machinery shared by the estimators and the FJS constructor.

The central object is the factorizable-joint-shift equation system linking
source priors ``p``, source posteriors, target feature weights, target priors
``q`` and the scale constants ``rho`` (one per class, the last fixed at 1)::

    p_j = rho_j * sum_x q_X(x) post_j(x) / D(x),   j < n_classes
    D(x) = sum_i rho_i (q_i / p_i) post_i(x)

With ``rho`` fixed the system is the stationarity condition of the concave
log-likelihood ``L(q) = sum_x q_X(x) log sum_i q_i rho_i post_i(x) / p_i``;
with ``rho == 1`` it is the classical label-shift maximum likelihood problem
solved by EM.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateInit, InfeasibleSystem, NoConvergence, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and switches for the iterative solvers.

    ``tol`` is the stopping threshold on the largest absolute change of an EM
    step (and the residual target of the rho solvers). ``accelerate`` enables
    SQUAREM extrapolation of the EM map and ``polish`` Newton steps on the
    log-likelihood, tried every ``NEWTON_EVERY`` map evaluations and once at
    the end while the iterate is interior. Neither changes the fixed point.
    ``projection_tol`` bounds the residual accepted after projecting a
    confusion-matrix solution onto the simplex.
    """

    tol: float = 1e-10
    max_iter: int = 10_000
    damping: float = 0.5
    init: tuple | None = None
    accelerate: bool = True
    polish: bool = True
    projection_tol: float = 1e-6

    def __post_init__(self):
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValidationError("damping must lie in (0, 1]")
        if self.projection_tol < 0:
            raise ValidationError("projection_tol must be non-negative")

    def with_(self, **changes) -> SolverConfig:
        return replace(self, **changes)


EMPIRICAL_PROJECTION_TOL = 0.05
NEWTON_EVERY = 50


# ---------------------------------------------------------------------------
# EM on the label-shift likelihood


def _em_step(q, scaled_post, weights):
    num = scaled_post * q
    den = num.sum(axis=1, keepdims=True)
    return weights @ (num / den)


def _loglik(q, scaled_post, weights):
    m = scaled_post @ q
    if np.any(m <= 0):
        return -np.inf
    return float(weights @ np.log(m))


def _newton_polish(q, scaled_post, weights, max_steps=30):
    """Newton ascent on the likelihood over the simplex interior."""
    k = q.size
    if k < 2:
        return q, 0
    diff = scaled_post[:, :-1] - scaled_post[:, [-1]]
    best = _loglik(q, scaled_post, weights)
    steps = 0
    for _ in range(max_steps):
        m = scaled_post @ q
        grad = diff.T @ (weights / m)
        hess = -(diff.T * (weights / m**2)) @ diff
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        t = 1.0
        while t > 1e-8:
            cand = q.copy()
            cand[:-1] += t * step
            cand[-1] = 1.0 - cand[:-1].sum()
            if np.all(cand > 0):
                val = _loglik(cand, scaled_post, weights)
                if val >= best - 1e-15:
                    break
            t *= 0.5
        else:
            break
        moved = np.abs(cand - q).max()
        q, best = cand, max(best, val)
        steps += 1
        if moved < 1e-15:
            break
    return q, steps


def em_fixed_point(post, base, weights, cfg: SolverConfig, init=None):
    """Solve ``q_j = sum_x w(x) (q_j/b_j) post_j(x) / sum_i (q_i/b_i) post_i(x)``.

    Parameters
    ----------
    post : ndarray, shape (n, k)
        Posterior rows restricted to the points carrying target weight.
    base : ndarray, shape (k,)
        Positive divisors ``b_j`` (source priors, possibly divided by rho).
    weights : ndarray, shape (n,)
        Target feature probabilities; must sum to one.
    cfg : SolverConfig
    init : array-like, optional
        Starting priors (uniform when omitted). Must be strictly positive.

    Returns
    -------
    q : ndarray, shape (k,)
    info : dict
        ``iterations`` (EM map evaluations), ``change`` (largest absolute
        change of one plain EM step at the returned point), ``newton_steps``.
    """
    k = base.size
    scaled = post / base
    if init is None:
        q = np.full(k, 1.0 / k)
    else:
        q = np.asarray(init, dtype=float)
        if q.shape != (k,):
            raise ValidationError(f"init has shape {q.shape}, expected ({k},)")
        if np.any(q <= 0):
            raise DegenerateInit("EM initialisation must be strictly positive on every class")
        q = q / q.sum()

    evals = 0
    converged = False
    change = np.inf
    newton_total = 0
    next_newton = NEWTON_EVERY
    while evals < cfg.max_iter:
        q1 = _em_step(q, scaled, weights)
        evals += 1
        change = float(np.abs(q1 - q).max())
        if change < cfg.tol:
            q = q1
            converged = True
            break
        if cfg.polish and evals >= next_newton and np.all(q > 1e-9):
            # flat likelihoods make EM crawl; Newton on the concave objective does not
            next_newton = evals + NEWTON_EVERY
            cand, steps = _newton_polish(q, scaled, weights)
            if steps and _loglik(cand, scaled, weights) >= _loglik(q, scaled, weights):
                newton_total += steps
                q = cand
                continue
        if not cfg.accelerate or evals + 2 > cfg.max_iter:
            q = q1
            continue
        # SQUAREM (SqS3) with step-length backtracking towards the plain double step
        q2 = _em_step(q1, scaled, weights)
        evals += 1
        r = q1 - q
        v = q2 - 2.0 * q1 + q
        nv = float(np.sqrt(v @ v))
        new = q2
        if nv > 0.0:
            alpha = -float(np.sqrt(r @ r)) / nv
            ll_now = _loglik(q, scaled, weights)
            for _ in range(20):
                if alpha >= -1.0 - 1e-12 or evals >= cfg.max_iter:
                    break
                y = q - 2.0 * alpha * r + alpha * alpha * v
                if np.all(y > 0):
                    cand = _em_step(y, scaled, weights)
                    evals += 1
                    if _loglik(cand, scaled, weights) >= ll_now:
                        new = cand
                        break
                alpha = (alpha - 1.0) / 2.0
        q = new

    if not converged:
        raise NoConvergence(
            f"EM did not reach step change < {cfg.tol:g} within {cfg.max_iter} map evaluations "
            f"(last change {change:.3g})"
        )

    if cfg.polish and np.all(q > 1e-9):
        polished, steps = _newton_polish(q, scaled, weights)
        new_change = float(np.abs(_em_step(polished, scaled, weights) - polished).max())
        if new_change <= change:
            q, change = polished, new_change
            newton_total += steps
    return q, {"iterations": evals, "change": change, "newton_steps": newton_total}


# ---------------------------------------------------------------------------
# the FJS equation system


def _denominator(post, ratio, rho_full):
    return post @ (rho_full * ratio)


def full_rho(rho, n_classes: int) -> np.ndarray:
    """Append the implicit ``rho_last = 1``; validates positivity."""
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    if rho.shape == (n_classes,):
        if rho[-1] != 1.0:
            raise ValidationError("the last rho constant is fixed at 1")
        rho = rho[:-1]
    if rho.shape != (n_classes - 1,):
        raise ValidationError(f"expected {n_classes - 1} rho constants, got {rho.size}")
    if not np.all(np.isfinite(rho)) or np.any(rho <= 0):
        raise ValidationError("rho constants must be finite and positive")
    return np.append(rho, 1.0)


def system_terms(post, qx, p, q, rho_full):
    """Right-hand sides ``rho_j * sum_x q_X(x) post_j(x) / D(x)`` for every class."""
    ratio = np.divide(q, p, out=np.zeros_like(q), where=p > 0)
    den = _denominator(post, ratio, rho_full)
    live = qx > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        contrib = np.where(live[:, None], post * (qx / np.where(live, den, 1.0))[:, None], 0.0)
    return rho_full * contrib.sum(axis=0)


def system_residual(post, qx, p, q, rho_full) -> float:
    """Largest absolute violation of the system over ``j < n_classes``."""
    rhs = system_terms(post, qx, p, q, rho_full)
    return float(np.abs(p[:-1] - rhs[:-1]).max())


def factors_uv(post, w_x, p, q, rho_full):
    """Feature factor ``u`` and label factor ``v`` built from a solved system."""
    ratio = q / p
    v = rho_full * ratio
    den = _denominator(post, ratio, rho_full)
    u = np.divide(w_x, den, out=np.zeros_like(w_x), where=(den > 0) & (w_x > 0))
    return u, v


def solve_rho_binary(post, qx, p, q, cfg: SolverConfig):
    """Bracket and bisect ``log rho_1`` for two classes.

    The right-hand side is strictly increasing in ``rho_1``; the bracket is
    grown geometrically from ``rho_1 = 1`` and an unbracketed root means the
    system has no positive solution.
    """

    def h(s):
        rho_full = np.array([np.exp(s), 1.0])
        return system_terms(post, qx, p, q, rho_full)[0] - p[0]

    lo, hi = -1.0, 1.0
    hlo, hhi = h(lo), h(hi)
    while hlo > 0 and lo > -700:
        hi, hhi = lo, hlo
        lo *= 2.0
        hlo = h(lo)
    while hhi < 0 and hi < 700:
        lo, hlo = hi, hhi
        hi *= 2.0
        hhi = h(hi)
    if hlo > 0 or hhi < 0:
        raise InfeasibleSystem(
            "no sign change of the binary system over rho in (e^-700, e^700); "
            "the requested marginals admit no factorizable joint shift"
        )
    iterations = 0
    mid, hm = lo, hlo
    while iterations < cfg.max_iter:
        iterations += 1
        mid = 0.5 * (lo + hi)
        hm = h(mid)
        if abs(hm) < 0.01 * cfg.tol or hi - lo < 1e-15 * max(1.0, abs(mid)):
            break
        if hm < 0:
            lo = mid
        else:
            hi = mid
    rho_full = np.array([np.exp(mid), 1.0])
    res = system_residual(post, qx, p, q, rho_full)
    if res >= cfg.tol:
        raise NoConvergence(f"bisection stalled with residual {res:.3g} after {iterations} steps")
    return rho_full, {"iterations": iterations, "residual": res, "method": "bisection"}


def solve_rho_fixed_point(post, qx, p, q, cfg: SolverConfig):
    """Damped iteration ``rho_j <- (1-d) rho_j + d p_j / E[...]`` for three or more classes."""
    n = p.size
    rho_full = np.ones(n)
    res = np.inf
    for it in range(1, cfg.max_iter + 1):
        terms = system_terms(post, qx, p, q, rho_full) / rho_full
        target = np.divide(p, terms, out=np.full(n, np.inf), where=terms > 0)
        if not np.all(np.isfinite(target[:-1])):
            raise InfeasibleSystem("a class receives no target weight; rho is unbounded")
        rho_full[:-1] = (1.0 - cfg.damping) * rho_full[:-1] + cfg.damping * target[:-1]
        res = system_residual(post, qx, p, q, rho_full)
        if res < cfg.tol:
            steps = 0
            if cfg.polish:
                rho_full, res, steps = _newton_rho(post, qx, p, q, rho_full, res)
            return rho_full, {"iterations": it, "residual": res, "method": "damped fixed point", "newton_steps": steps}
    raise NoConvergence(
        f"rho iteration did not reach residual < {cfg.tol:g} in {cfg.max_iter} steps (last {res:.3g})"
    )


def _newton_rho(post, qx, p, q, rho_full, res, max_steps=20):
    """Newton steps on the system in ``rho``; a step is kept only if the residual drops."""
    ratio = q / p
    live = qx > 0
    post, w = post[live], qx[live]
    steps = 0
    for _ in range(max_steps):
        den = _denominator(post, ratio, rho_full)
        a = post * (w / den)[:, None]
        # d terms_j / d rho_k = [j == k] sum a_j - rho_j sum a_j ratio_k post_k / D
        jac = np.diag(a.sum(axis=0)) - rho_full[:, None] * ((a / den[:, None]).T @ (post * ratio))
        jac = jac[:-1, :-1]
        f = rho_full[:-1] * a[:, :-1].sum(axis=0) - p[:-1]
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            break
        cand = rho_full.copy()
        cand[:-1] += step
        if not np.all(np.isfinite(cand)) or np.any(cand <= 0):
            break
        new_res = system_residual(post, w, p, q, cand)
        if not new_res < res:
            break
        rho_full, res = cand, new_res
        steps += 1
    return rho_full, res, steps
