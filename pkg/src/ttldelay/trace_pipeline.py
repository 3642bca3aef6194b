"""Trace-to-model pipeline: inter-request extraction, outlier removal,
Coxian phase-type fitting by expectation maximization, and phase-count
selection by information criteria.

The E-step integrates the forward and backward filters of the absorbing
Markov chain with a fixed number of fourth-order Runge-Kutta steps per
sample and Simpson quadrature for the occupancy/jump integrals; the step
count is a tunable (``grid_steps``).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from ttldelay.distributions import Coxian
from ttldelay.errors import FitError

log = logging.getLogger(__name__)

BOXCOX_GRID = tuple(np.arange(-2.0, 2.01, 0.5))


def interarrivals(timestamps):
    """First differences of an ascending timestamp sequence."""
    t = np.asarray(timestamps, dtype=float)
    if t.size < 2:
        raise ValueError("need at least two timestamps")
    gaps = np.diff(t)
    if np.any(gaps < 0):
        raise ValueError("timestamps must be sorted ascending")
    return gaps


def _boxcox(samples, lam):
    if lam == 0.0:
        return np.log(samples)
    return (samples**lam - 1.0) / lam


def remove_outliers(samples, cutoff=2.0):
    """Drop samples whose z-score after a power transform exceeds ``cutoff``.

    The transform exponent is picked from a fixed grid by maximizing the
    normal log-likelihood of the transformed samples (including the Jacobian
    term).  Zero samples are offset by a millionth of the smallest positive
    sample so the transform is defined.
    """
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise ValueError("empty sample set")
    if np.any(s == 0):
        positive = s[s > 0]
        if positive.size == 0:
            return s
        offset = positive.min() * 1e-6
        log.info("offsetting %d zero gaps by %.3e", int((s == 0).sum()), offset)
        s = np.where(s == 0, offset, s)

    log_s = np.log(s)
    best_lam, best_ll = None, -np.inf
    for lam in BOXCOX_GRID:
        y = _boxcox(s, lam)
        var = y.var()
        if var <= 0:
            continue
        ll = -0.5 * s.size * math.log(var) + (lam - 1.0) * log_s.sum()
        if ll > best_ll:
            best_lam, best_ll = lam, ll
    if best_lam is None:
        return s
    y = _boxcox(s, best_lam)
    sigma = y.std()
    if sigma == 0:
        return s
    z = (y - y.mean()) / sigma
    return s[np.abs(z) <= cutoff]


@dataclass
class FitReport:
    """Result of one phase-type fit."""

    fitted: Coxian
    log_likelihood_trace: list
    aic: float
    bic: float
    sample_count_before: int
    sample_count_after: int
    empirical_mean: float
    fitted_mean: float
    phases: int
    restarts_used: int = 0

    @property
    def log_likelihood(self):
        return self.log_likelihood_trace[-1]


def _coxian_matrices(rates, probs):
    p = len(rates)
    s = np.diag(-np.asarray(rates, dtype=float))
    for i in range(p - 1):
        s[i, i + 1] = rates[i] * probs[i]
    exit_rates = -s.sum(axis=1)
    return s, exit_rates


def _rk4_forward(v0, mat, h, steps):
    """Integrate v' = v @ mat with per-sample step h; returns the trajectory."""
    m, p = v0.shape
    out = np.empty((steps + 1, m, p))
    out[0] = v0
    v = v0
    hh = h[:, None]
    for k in range(steps):
        k1 = v @ mat
        k2 = (v + 0.5 * hh * k1) @ mat
        k3 = (v + 0.5 * hh * k2) @ mat
        k4 = (v + hh * k3) @ mat
        v = v + hh / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = v
    return out


def _simpson_weights(steps, h):
    w = np.ones(steps + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w[None, :] * (h[:, None] / 3.0)


def _estep(samples, rates, probs, grid_steps):
    """Expected occupancy, forward-jump and exit statistics plus loglik."""
    s_mat, exit_rates = _coxian_matrices(rates, probs)
    p = len(rates)
    m = samples.size
    h = samples / grid_steps
    alpha = np.zeros((m, p))
    alpha[:, 0] = 1.0
    fwd = _rk4_forward(alpha, s_mat, h, grid_steps)  # a(u_k)
    bwd = _rk4_forward(np.tile(exit_rates, (m, 1)), s_mat.T, h, grid_steps)  # c(v)=e^{Sv}s

    density = np.einsum("mp,p->m", fwd[-1], exit_rates)
    density = np.maximum(density, 1e-300)
    loglik = float(np.log(density).sum())

    # Pair integrals int a_i(u) b_j(u) du with b(u_k) = c(x - u_k), folded
    # with Simpson weights and the per-sample density normalization.
    scale = _simpson_weights(grid_steps, h) / density[:, None]  # (m, K+1)
    weighted = fwd * scale.T[:, :, None]  # (K+1, m, p)
    b_all = bwd[::-1]
    occupancy = np.einsum("kmi,kmi->i", weighted, b_all)
    if p > 1:
        pair = np.einsum("kmi,kmi->i", weighted[:, :, :-1], b_all[:, :, 1:])
        forward_jumps = pair * np.array(
            [rates[i] * probs[i] for i in range(p - 1)]
        )
    else:
        forward_jumps = np.zeros(0)
    exits = (fwd[-1] / density[:, None]).sum(axis=0) * exit_rates
    return occupancy, forward_jumps, exits, loglik


def _initial_parameters(samples, phases, restart):
    mean = float(samples.mean())
    rates = np.full(phases, phases / mean)
    probs = np.full(max(phases - 1, 0), 0.5)
    if restart:
        # Deterministic perturbation so restarts explore different basins.
        rng = np.random.default_rng(restart)
        rates = rates * rng.uniform(0.5, 2.0, phases)
        probs = rng.uniform(0.2, 0.9, max(phases - 1, 0))
    return rates, probs


def canonical_coxian(cox):
    """Reorder a Coxian so its rates are nonincreasing, same distribution.

    Adjacent out-of-order phases are exchanged with the exact two-phase swap
    that preserves both the absorption and the continuation transforms.
    """
    rates = list(cox.rates)
    probs = list(cox.continue_probs) + [0.0]
    p = len(rates)
    changed = True
    while changed:
        changed = False
        for i in range(p - 1):
            l1, l2 = rates[i], rates[i + 1]
            if l1 >= l2 - 1e-15:
                continue
            x1, x2 = probs[i], probs[i + 1]
            y1 = 1.0 - l1 * (1.0 - x1) / l2
            y2 = x1 * x2 / y1 if y1 > 0 else 0.0
            rates[i], rates[i + 1] = l2, l1
            probs[i], probs[i + 1] = y1, y2
            changed = True
    return Coxian(tuple(rates), tuple(probs[:-1]))


def fit_ph_em(
    samples,
    phases,
    max_iters=500,
    tol=1e-7,
    grid_steps=96,
    max_restarts=5,
    sample_count_before=None,
):
    """Fit a Coxian distribution to positive samples by EM.

    Stops when the log-likelihood gain drops below ``tol`` or after
    ``max_iters`` iterations.  Non-finite likelihoods trigger deterministic
    re-initializations, up to ``max_restarts``.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise FitError("no samples to fit")
    if np.any(samples <= 0):
        raise FitError("samples must be positive")
    if phases < 1:
        raise FitError("need at least one phase")

    before = sample_count_before if sample_count_before is not None else samples.size
    last_error = None
    for restart in range(max_restarts + 1):
        rates, probs = _initial_parameters(samples, phases, restart)
        trace = []
        try:
            for _ in range(max_iters):
                occupancy, forward_jumps, exits, loglik = _estep(
                    samples, rates, probs, grid_steps
                )
                if not math.isfinite(loglik):
                    raise FitError("non-finite log-likelihood")
                trace.append(loglik)
                if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
                    break
                new_rates = np.empty_like(rates)
                new_probs = np.empty_like(probs)
                for i in range(phases):
                    jump = forward_jumps[i] if i < phases - 1 else 0.0
                    total = jump + exits[i]
                    new_rates[i] = total / max(occupancy[i], 1e-300)
                    if i < phases - 1:
                        new_probs[i] = jump / total if total > 0 else 0.0
                if not (np.all(np.isfinite(new_rates)) and np.all(new_rates > 0)):
                    raise FitError("degenerate M-step")
                rates, probs = new_rates, np.clip(new_probs, 0.0, 1.0)
        except FitError as exc:
            last_error = exc
            continue
        fitted = canonical_coxian(Coxian(tuple(rates), tuple(probs)))
        k = 2 * phases - 1
        loglik = trace[-1]
        return FitReport(
            fitted=fitted,
            log_likelihood_trace=trace,
            aic=2 * k - 2 * loglik,
            bic=k * math.log(samples.size) - 2 * loglik,
            sample_count_before=before,
            sample_count_after=int(samples.size),
            empirical_mean=float(samples.mean()),
            fitted_mean=float(fitted.mean()),
            phases=phases,
            restarts_used=restart,
        )
    raise FitError(f"EM failed after {max_restarts} restarts: {last_error}")


def select_phases(samples, candidate_range, **fit_kwargs):
    """Fit every candidate phase count and keep the BIC minimizer.

    Ties go to the smaller model.  Individual fit failures are tolerated as
    long as at least one candidate succeeds.
    """
    candidates = list(candidate_range)
    if not candidates:
        raise FitError("empty candidate range")
    best = None
    errors = []
    for p in sorted(candidates):
        try:
            report = fit_ph_em(samples, p, **fit_kwargs)
        except FitError as exc:
            errors.append(f"{p} phases: {exc}")
            continue
        if best is None or report.bic < best.bic - 1e-9:
            best = report
    if best is None:
        raise FitError("all candidates failed: " + "; ".join(errors))
    return best


def coxian_pdf(cox, xs):
    """Density of a Coxian law on a grid (matrix exponentials per point)."""
    s_mat, exit_rates = _coxian_matrices(cox.rates, cox.continue_probs)
    alpha = np.zeros(len(cox.rates))
    alpha[0] = 1.0
    return np.array([float(alpha @ expm(s_mat * x) @ exit_rates) for x in xs])
