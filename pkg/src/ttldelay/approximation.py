"""Transform-domain approximations of single caches and hierarchies.

The inter-miss time of a single cache has a rational Laplace-Stieltjes
transform when the request stream is phase-type and the TTL exponential; the
fetch delay enters as a multiplicative factor.  Hierarchies are approximated
bottom-up: each cache turns its input renewal process into a miss process,
sibling miss streams are superposed either as a Poisson stream or as a
moment-matched renewal stream, and the system-level hit probability follows
from the root's output rate.
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

from ttldelay import distributions as dist
from ttldelay.errors import DegenerateProcessError


@dataclass(frozen=True)
class RationalLst:
    """A rational function of the transform variable, num(s) / den(s)."""

    num: Polynomial
    den: Polynomial

    def __call__(self, s):
        return self.num(s) / self.den(s)

    def at_zero(self):
        return self.num(0.0) / self.den(0.0)

    def multiply(self, other):
        return RationalLst(self.num * other.num, self.den * other.den)

    def shift(self, delta):
        """Compose with s + delta."""
        arg = Polynomial([delta, 1.0])
        return RationalLst(self.num(arg), self.den(arg))

    def moments(self, count=3):
        """Raw moments of the underlying distribution via the series at 0.

        Only meaningful for proper transforms with value 1 at s = 0.
        """
        n = count + 1
        num_c = np.zeros(n)
        den_c = np.zeros(n)
        nc, dc = self.num.coef, self.den.coef
        num_c[: min(n, len(nc))] = nc[: min(n, len(nc))]
        den_c[: min(n, len(dc))] = dc[: min(n, len(dc))]
        # Series division: q such that num = q * den up to order `count`.
        q = np.zeros(n)
        for k in range(n):
            q[k] = (num_c[k] - np.dot(q[:k], den_c[k:0:-1])) / den_c[0]
        return tuple(
            (-1.0) ** k * math.factorial(k) * q[k] for k in range(1, count + 1)
        )

    def mean(self):
        return self.moments(1)[0]


def lst_of_ph(d):
    """Rational LST of a phase-type distribution.

    Expanded from alpha (sI - S)^-1 exit via the Faddeev-LeVerrier recursion.
    """
    dist.require_ph(d, "transformed distribution")
    alpha, s = d.ph()
    n = s.shape[0]
    exit_rates = -s.sum(axis=1)
    # Faddeev-LeVerrier: adj(sI - S) = sum_k M_k s^(n-k), det has the c_k.
    num = np.zeros(n)
    mk = np.eye(n)
    cks = [1.0]
    for k in range(1, n + 1):
        num[n - k] = float(alpha @ mk @ exit_rates)
        ak = s @ mk
        ck = -np.trace(ak) / k
        cks.append(ck)
        mk = ak + ck * np.eye(n)
    den = np.array(list(reversed(cks)))  # increasing powers: [c_n, ..., 1]
    return RationalLst(Polynomial(num), Polynomial(den))


def lst_L(fx, lambda_t):
    """Transform of the joint law 'request arrives before the TTL expires'.

    For an exponential TTL this is the inter-request transform shifted by the
    TTL rate; its value at zero is the per-request hit probability q.
    """
    return fx.shift(lambda_t)


def miss_lst_no_delay(fx, l):
    """Inter-miss transform of a cache with zero fetch delay."""
    q = l.at_zero()
    if q >= 1.0 - 1e-12:
        raise DegenerateProcessError("cache never misses (q = 1)")
    num = fx.num * l.den - l.num * fx.den
    den = fx.den * (l.den - l.num)
    return RationalLst(num, den)


def miss_lst_with_delay(fx, l, fdelta):
    """Inter-miss transform with a random fetch delay: the delay factors out."""
    return fdelta.multiply(miss_lst_no_delay(fx, l))


def expected_renewals_during_delay(x, delta):
    """Expected number of renewal arrivals within an independent PH delay.

    The count starts at a renewal epoch (the miss request).  Solved as the
    expected number of marked events of the product chain before the delay
    clock absorbs; exact, one linear solve.
    """
    dist.require_ph(x, "arrival process")
    dist.require_ph(delta, "fetch delay")
    alpha_x, s_x = x.ph()
    alpha_d, s_d = delta.ph()
    exit_x = -s_x.sum(axis=1)
    generator_x = s_x + np.outer(exit_x, alpha_x)
    nx, nd = len(alpha_x), len(alpha_d)
    q = np.kron(generator_x, np.eye(nd)) + np.kron(np.eye(nx), s_d)
    reward = np.kron(exit_x, np.ones(nd))
    start = np.kron(alpha_x, alpha_d)
    return float(start @ np.linalg.solve(-q, reward))


@dataclass(frozen=True)
class CacheApproxResult:
    """Per-cache quantities of the renewal approximation."""

    q: float  # P(inter-request time < TTL)
    expected_hits_between_misses: float
    expected_requests_during_delay: float
    p_hit: float
    miss_rate_out: float


def hit_prob_single_approx(x, lambda_t, delta, input_rate=None):
    """Single-cache hit probability from hit runs and in-fetch arrivals.

    A cycle consists of the triggering miss, the arrivals during the fetch
    (all counted as misses) and a geometric run of hits.
    """
    fx = lst_of_ph(x)
    q = float(fx(lambda_t))
    e_n = q / (1.0 - q) if q < 1.0 else math.inf
    e_m = expected_renewals_during_delay(x, delta)
    p_hit = e_n / (1.0 + e_m + e_n) if math.isfinite(e_n) else 1.0
    rate = input_rate if input_rate is not None else 1.0 / x.mean()
    cycle_requests = 1.0 + e_m + e_n
    miss_rate_out = rate * (1.0 + e_m) / cycle_requests
    return CacheApproxResult(q, e_n, e_m, p_hit, miss_rate_out)


def _ph_equilibrium(alpha, s):
    """Initial vector of the stationary-excess distribution of a PH law."""
    mean = dist.ph_mean(alpha, s)
    beta = -alpha @ np.linalg.inv(s) / mean
    return np.asarray(beta).ravel()


def superposed_palm_moments(components, count=3):
    """First moments of the inter-event time of pooled stationary renewals.

    ``components`` is a list of ``(rate, distribution)`` pairs.  Given an
    event of component k, the time to the next pooled event is the minimum of
    component k's fresh interval and the other components' stationary excess
    lifetimes; products of PH tails are PH tails on the Kronecker product.
    """
    total_rate = sum(r for r, _ in components)
    phs = [d.ph() for _, d in components]
    moments = np.zeros(count)
    for k, (rate_k, _) in enumerate(components):
        gamma = np.ones(1)
        g = np.zeros((1, 1))
        for j, (alpha, s) in enumerate(phs):
            start = alpha if j == k else _ph_equilibrium(alpha, s)
            gamma = np.kron(gamma, start)
            g = np.kron(g, np.eye(len(start))) + np.kron(np.eye(g.shape[0]), s)
        v = np.ones(len(gamma))
        weight = rate_k / total_rate
        for i in range(count):
            v = np.linalg.solve(-g, v)
            moments[i] += weight * math.factorial(i + 1) * float(gamma @ v)
    return tuple(moments)


def fit_ph_moments(m1, m2, m3):
    """Phase-type law of order <= 3 matching up to three moments.

    Returns ``(distribution, note)`` where ``note`` is None for an exact
    three-moment match and a short description when a fallback reduced the
    match to two moments or projected m3 into the feasible region.
    """
    if m1 <= 0 or m2 <= 0:
        raise ValueError("moments must be positive")
    cv2 = m2 / m1**2 - 1.0
    if abs(cv2 - 1.0) < 1e-9:
        note = None if abs(m3 - 6 * m1**3) < 1e-6 * m1**3 else "m3 ignored (exponential)"
        return dist.Exponential(1.0 / m1), note
    if cv2 < 1.0 / 3.0:
        # An order-3 PH cannot reach cv^2 below 1/3.
        return dist.Erlang(3, 3.0 / m1), "cv^2 below 1/3: Erlang-3, mean-only match"
    if cv2 < 0.5:
        # Mixed Erlang(2)/Erlang(3) on a common rate: two-moment match
        # (Tijms' E_{k-1,k} recipe with k = 3).
        k = 3
        p = (k * cv2 - math.sqrt(k * (1 + cv2) - k * k * cv2)) / (1 + cv2)
        p = min(max(p, 0.0), 1.0)
        rate = (k - p) / m1
        alpha = (1.0, 0.0, 0.0)
        s = (
            (-rate, rate, 0.0),
            (0.0, -rate, (1.0 - p) * rate),
            (0.0, 0.0, -rate),
        )
        return (
            dist.GeneralPH(alpha, s),
            "cv^2 in [1/3, 0.5): Erlang mixture, two-moment match",
        )

    # Acyclic PH(2): exact three-moment match inside the feasible region.
    note = None
    if cv2 <= 1.0:
        lower = 3 * m1**3 * (3 * cv2 - 1 + math.sqrt(2) * (1 - cv2) ** 1.5)
        upper = 6 * m1**3 * cv2
    else:
        lower = 1.5 * m1**3 * (1 + cv2) ** 2
        upper = math.inf
    eps = 1e-9 * m1**3
    if not lower - eps <= m3 <= upper + eps:
        m3 = lower * 10.0 / 9.0 if cv2 > 1.0 else 0.5 * (lower + upper)
        note = "m3 projected into the PH(2) feasible region"
    else:
        m3 = min(max(m3, lower), upper)
    d = 2 * m1**2 - m2
    c = 3 * m2**2 - 2 * m1 * m3
    b = 3 * m1 * m2 - m3
    disc = max(b * b - 6 * c * d, 0.0)
    a = math.sqrt(disc)
    if c > 0:
        p = (-b + 6 * m1 * d + a) / (b + a)
        l1, l2 = (b - a) / c, (b + a) / c
    elif c < 0:
        p = (b - 6 * m1 * d + a) / (-b + a)
        l1, l2 = (b + a) / c, (b - a) / c
    else:
        p, l1, l2 = 0.0, 1.0 / m1, 1.0 / m1
    p = min(max(p, 0.0), 1.0)
    alpha = (p, 1.0 - p)
    s = ((-l1, l1), (0.0, -l2))
    return dist.GeneralPH(alpha, s), note


@dataclass(frozen=True)
class HierarchyApproxResult:
    p_hit_sys: float
    per_cache: dict
    strategy: str
    fallbacks: tuple


def hierarchy_approx(spec, strategy="renewal"):
    """Approximate system hit probability via per-cache renewal analysis.

    Each cache's miss stream is summarized by its output rate and, under the
    renewal strategy, a PH law fitted to three moments of the inter-miss
    transform; sibling streams pool into the parent's input.  The system hit
    probability compares the root's output rate against the total request
    rate entering the leaves.
    """
    if strategy not in ("renewal", "poisson"):
        raise ValueError(f"unknown strategy {strategy!r}")
    spec.validate(exact=True)
    per_cache = {}
    fallbacks = []

    def analyze(node):
        """Returns (input_dist, input_rate) -> records results, returns
        (miss_dist, miss_rate_out)."""
        if node.is_leaf:
            input_dist = node.arrival
            input_rate = 1.0 / node.arrival.mean()
        else:
            streams = [analyze(child) for child in node.children]
            input_rate = sum(rate for _, rate in streams)
            if strategy == "poisson":
                input_dist = dist.Exponential(input_rate)
            else:
                scaled = [
                    (rate, d.scaled_to_mean(1.0 / rate)) for d, rate in streams
                ]
                if len(scaled) == 1:
                    input_dist = scaled[0][1]
                else:
                    m1, m2, m3 = superposed_palm_moments(scaled)
                    input_dist, note = fit_ph_moments(m1, m2, m3)
                    if note:
                        fallbacks.append(f"{node.id}: {note}")
                    input_dist = input_dist.scaled_to_mean(1.0 / input_rate)
        lambda_t = 1.0 / node.ttl.mean()
        result = hit_prob_single_approx(
            input_dist, lambda_t, node.delay, input_rate=input_rate
        )
        per_cache[node.id] = result
        fx = lst_of_ph(input_dist)
        miss = miss_lst_with_delay(fx, lst_L(fx, lambda_t), lst_of_ph(node.delay))
        m1, m2, m3 = miss.moments(3)
        if strategy == "poisson":
            miss_dist = dist.Exponential(result.miss_rate_out)
        else:
            miss_dist, note = fit_ph_moments(m1, m2, m3)
            if note:
                fallbacks.append(f"{node.id} miss stream: {note}")
        return miss_dist, result.miss_rate_out

    _, root_out = analyze(spec.root)
    total = spec.total_request_rate()
    return HierarchyApproxResult(
        p_hit_sys=1.0 - root_out / total,
        per_cache=per_cache,
        strategy=strategy,
        fallbacks=tuple(fallbacks),
    )
