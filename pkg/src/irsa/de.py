"""Density evolution: asymptotic throughput of the random-access system.

As the user and RE counts grow with the load fixed, decoding failure
probabilities on the access bipartite graph satisfy a two-variable
recursion driven by the repetition-degree distribution and by theta_r,
the probability that a tagged packet among r colliders is recovered by
within-RE cancellation alone. theta_r is estimated by Monte Carlo (with
perfect or estimated CSI) or taken from closed-form approximations valid
for perfect CSI and many antennas; the recursion then yields the
asymptotic packet loss rate, the throughput, and the inflection load
beyond which the system is interference-limited.

The analysis assumes full path-loss-inversion power control: every user
is received at the same mean SNR rho0, and all powers enter only through
rho0 and the SINR threshold.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from . import chest
from .scenario import DegreeDistribution, _crandn

THETA_KINDS = ("theta1", "theta2", "gamma", "normal", "deterministic")
THETA_MODES = ("perfect", "lcmmse", "mmse")


@dataclass(frozen=True)
class EdgeDegreeDistribution:
    """Edge-perspective user degree distribution lambda.

    lambda_d = d * phi_d / mean_degree is the probability that an edge
    attaches to a degree-d user; evaluation returns
    sum_d lambda_d * p**(d-1).
    """

    degrees: np.ndarray
    coeffs: np.ndarray

    def __call__(self, p):
        p = np.asarray(p, dtype=np.float64)
        return (self.coeffs * np.power(p[..., None], self.degrees - 1)).sum(axis=-1)


def edge_user_distribution(dist: DegreeDistribution) -> EdgeDegreeDistribution:
    coeffs = dist.degrees * dist.probs / dist.mean_degree
    return EdgeDegreeDistribution(degrees=dist.degrees.copy(), coeffs=coeffs)


# ---------------------------------------------------------------------------
# theta_r: closed forms
# ---------------------------------------------------------------------------

def theta_exact_1(num_antennas: int, rho0: float, gamma_th: float) -> float:
    """Single-packet success probability under perfect CSI and MRC.

    The post-combining SNR is rho0 times a chi-squared(2N)/2 variable, so
    the tail is a regularised upper incomplete gamma function.
    """
    return float(special.gammaincc(num_antennas, gamma_th / rho0))


def _t0(num_antennas: int, rho0: float, gamma_th: float) -> float:
    return 1.0 / gamma_th - 1.0 / (num_antennas * rho0)


def theta_exact_2(num_antennas: int, rho0: float, gamma_th: float) -> float:
    """Two-packet success probability in the large-antenna regime.

    Both packets share one squared-correlation coefficient t ~ Beta(1, N);
    the first decode succeeds iff t <= t0 = 1/gamma_th - 1/(N rho0), after
    which the survivor is interference-free.
    """
    t0 = _t0(num_antennas, rho0, gamma_th)
    if t0 < 0:
        return 0.0
    if t0 >= 1:
        return 1.0
    return float(1.0 - (1.0 - t0) ** num_antennas)


def theta_closed_form(kind: str, r: int, num_antennas: int, rho0: float,
                      gamma_th: float) -> float:
    """Closed-form theta_r (perfect CSI, MRC, large-antenna regime).

    ``gamma`` and ``normal`` approximate the accumulated interference of
    r-1 i.i.d. squared correlations; both splice in the exact r=1 and r=2
    expressions. ``deterministic`` replaces the SINR by its almost-sure
    limit, giving a hard cutoff in r.
    """
    if kind not in THETA_KINDS:
        raise ValueError(f"unknown closed-form kind {kind!r}")
    if r < 1:
        raise ValueError("r must be >= 1")
    n = num_antennas
    if kind == "deterministic":
        cutoff = math.floor(n / gamma_th - 1.0 / rho0 + 1.0)
        return 1.0 if r <= cutoff else 0.0
    if kind == "theta1" or r == 1:
        return theta_exact_1(n, rho0, gamma_th)
    if kind == "theta2" or r == 2:
        return theta_exact_2(n, rho0, gamma_th)
    t0 = _t0(n, rho0, gamma_th)
    if kind == "gamma":
        if t0 <= 0:
            return 0.0
        return float(special.gammainc(r - 1, n * t0))
    mu = 1.0 / (n + 1.0)
    sigma = math.sqrt(n / ((n + 1.0) ** 2 * (n + 2.0)))
    z = (t0 - (r - 1) * mu) / (math.sqrt(r - 1.0) * sigma)
    return float(special.ndtr(z))


# ---------------------------------------------------------------------------
# theta_r: table container
# ---------------------------------------------------------------------------

@dataclass
class ThetaTable:
    """theta_r for r = 1..len(theta), with provenance and parameters."""

    theta: np.ndarray
    provenance: str
    num_antennas: int
    rho0: float            # linear mean received SNR
    gamma_th: float

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        object.__setattr__(self, "theta", theta)
        if theta.ndim != 1 or theta.size == 0:
            raise ValueError("theta must be a non-empty 1-D array")
        if np.any((theta < 0) | (theta > 1)):
            raise ValueError("theta values must lie in [0, 1]")

    @property
    def r_max(self) -> int:
        return self.theta.size

    def value(self, r: int) -> float:
        return float(self.theta[r - 1])

    CSV_COLUMNS = ("r", "theta", "provenance", "N", "rho0_db", "gamma_th")

    def rows(self) -> list[list]:
        rho0_db = 10 * math.log10(self.rho0)
        return [[r, float(value), self.provenance, self.num_antennas, rho0_db,
                 self.gamma_th] for r, value in enumerate(self.theta, start=1)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.CSV_COLUMNS)
            for row in self.rows():
                writer.writerow([repr(v) if isinstance(v, float) else str(v)
                                 for v in row])


def theta_table_closed_form(kind: str, r_max: int, num_antennas: int, rho0: float,
                            gamma_th: float) -> ThetaTable:
    theta = np.array([theta_closed_form(kind, r, num_antennas, rho0, gamma_th)
                      for r in range(1, r_max + 1)])
    return ThetaTable(theta=theta, provenance=kind, num_antennas=num_antennas,
                      rho0=rho0, gamma_th=gamma_th)


# ---------------------------------------------------------------------------
# theta_r: Monte Carlo estimation
# ---------------------------------------------------------------------------

def _greedy_intra_re_success(num_colliders, num_antennas, rho0, gamma_th, mode,
                             pilot_len, combiner, rzf_regularizer, batch, rng):
    """Count reference-packet recoveries over ``batch`` single-RE trials.

    All users are received at mean SNR rho0 (path-loss inversion), so
    powers are normalised to data power 1, channel variance 1, noise
    1/rho0, unit per-symbol pilot power. Each trial greedily decodes the
    current max-SINR user while it clears the threshold, with perfect
    removal and re-estimation, until the reference (index 0) is decoded
    or the best user fails.
    """
    r = num_colliders
    noise = 1.0 / rho0
    chans = _crandn(rng, (batch, num_antennas, r))
    if mode != "perfect":
        pilots = _crandn(rng, (batch, pilot_len, r))
        signal = chans @ chest._ct(pilots) + math.sqrt(noise) * _crandn(
            rng, (batch, num_antennas, pilot_len))
    successes = 0
    active = np.ones((batch, r), dtype=bool)
    for _ in range(r):
        if mode == "perfect":
            estimates = chans * active[:, None, :]
            delta_sum = np.zeros(chans.shape[0])
        else:
            weights = active.astype(np.float64)
            if mode == "lcmmse":
                kernel = chest.lcmmse_kernel(pilots, weights, noise)
            else:
                kernel = chest.mmse_kernel(pilots, weights, noise)
            estimates = signal @ kernel
            deltas = chest.kernel_error_variances(kernel, pilots, weights, weights, noise)
            delta_sum = deltas.sum(axis=-1)

        if combiner == "mrc":
            cols = estimates
        else:
            gram = chest._ct(estimates) @ estimates + rzf_regularizer * np.eye(r)
            cols = np.swapaxes(np.linalg.solve(
                np.swapaxes(gram, -1, -2), np.swapaxes(estimates, -1, -2)), -1, -2)

        inner_power = np.abs(chest._ct(cols) @ estimates) ** 2     # (B, r, r)
        energy = (np.abs(cols) ** 2).sum(axis=-2)
        own = np.diagonal(inner_power, axis1=-2, axis2=-1)
        inter = inner_power.sum(axis=-1) - own
        denom = energy * (noise + delta_sum[:, None]) + inter
        sinr = np.where(active & (energy > 0), own / np.where(denom > 0, denom, 1.0), -1.0)

        best = sinr.argmax(axis=-1)
        rows = np.arange(sinr.shape[0])
        cleared = sinr[rows, best] >= gamma_th
        successes += int(np.count_nonzero(cleared & (best == 0)))

        keep = cleared & (best != 0)
        if not keep.any():
            break
        kept_best = best[keep]
        chans = chans[keep]
        active = active[keep]
        active[np.arange(active.shape[0]), kept_best] = False
        if mode != "perfect":
            pilots = pilots[keep]
            signal = signal[keep]
            removed = chans[np.arange(chans.shape[0]), :, kept_best]
            pilot_cols = pilots[np.arange(pilots.shape[0]), :, kept_best]
            signal = signal - removed[:, :, None] * pilot_cols.conj()[:, None, :]
    return successes


def estimate_theta_empirical(
    r_max: int,
    num_antennas: int,
    rho0: float,
    gamma_th: float,
    trials: int,
    mode: str = "perfect",
    pilot_len: int | None = None,
    combiner: str = "mrc",
    rzf_regularizer: float = 1e-2,
    seed: int = 0,
    chunk: int = 4096,
) -> ThetaTable:
    """Monte Carlo theta_r table for r = 1..r_max.

    ``mode`` selects the CSI model inside the RE: ``perfect`` uses the true
    channels with zero error variance; ``lcmmse``/``mmse`` draw fresh
    Gaussian pilots of length ``pilot_len`` (per-symbol power equal to the
    data power) per trial and re-estimate after every cancellation.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if mode not in THETA_MODES:
        raise ValueError(f"unknown CSI mode {mode!r}")
    if mode != "perfect" and not pilot_len:
        raise ValueError("estimated-CSI modes need pilot_len")
    theta = np.empty(r_max)
    for r in range(1, r_max + 1):
        successes = 0
        done = 0
        block = 0
        while done < trials:
            batch = min(chunk, trials - done)
            rng = np.random.default_rng(np.random.SeedSequence((seed, r, block)))
            successes += _greedy_intra_re_success(
                r, num_antennas, rho0, gamma_th, mode, pilot_len or 0,
                combiner, rzf_regularizer, batch, rng)
            done += batch
            block += 1
        theta[r - 1] = successes / trials
    provenance = f"empirical-{mode}"
    return ThetaTable(theta=theta, provenance=provenance, num_antennas=num_antennas,
                      rho0=rho0, gamma_th=gamma_th)


# ---------------------------------------------------------------------------
# The fixed-point recursion
# ---------------------------------------------------------------------------

@dataclass
class DeResult:
    """Fixed point of the failure-probability recursion at one load."""

    load: float
    p_trace: np.ndarray
    q_trace: np.ndarray
    p_infty: float
    plr: float
    throughput: float
    converged: bool
    iterations: int
    theta_extended: bool = False
    traces_monotone: bool = True


def _truncation_point(mean_collisions: float, tail_eps: float) -> int:
    """Smallest series length whose Poisson tail mass is below tail_eps."""
    if mean_collisions <= 0:
        return 1
    r = max(1, int(math.ceil(mean_collisions)))
    while stats.poisson.sf(r - 1, mean_collisions) >= tail_eps:
        r += 1
    return r


def _extend_theta(theta: np.ndarray, length: int, extend: str) -> tuple[np.ndarray, bool]:
    if theta.size >= length:
        return theta[:length], False
    if extend == "hold":
        pad = np.full(length - theta.size, theta[-1])
    elif extend == "zero":
        pad = np.zeros(length - theta.size)
    else:
        raise ValueError(f"unknown extension mode {extend!r}")
    return np.concatenate([theta, pad]), True


def de_fixed_point(
    load: float,
    dist: DegreeDistribution,
    theta: ThetaTable | np.ndarray,
    max_iter: int = 10_000,
    tol: float = 1e-10,
    tail_eps: float = 1e-12,
    extend: str = "zero",
) -> DeResult:
    """Iterate the failure recursion to its fixed point at the given load.

    Starting from q0 = 1, alternate p = f(q) and q = lambda(p), where

        f(q) = 1 - exp(-cbar q) * sum_{r>=1} theta_r (cbar q)^(r-1)/(r-1)!

    with cbar = load * mean_degree, the series truncated where the Poisson
    tail mass drops below ``tail_eps`` (the tail bounds the truncation
    error since theta_r <= 1). A theta table shorter than the truncation
    point is extended (``zero`` or ``hold``) and the result flagged. The
    asymptotic packet loss rate is the node polynomial at the fixed point
    and the throughput is load * (1 - plr).
    """
    if load < 0:
        raise ValueError("load must be >= 0")
    theta_values = theta.theta if isinstance(theta, ThetaTable) else np.asarray(theta, float)
    edge_dist = edge_user_distribution(dist)
    cbar = load * dist.mean_degree
    length = _truncation_point(cbar, tail_eps)
    theta_values, extended = _extend_theta(theta_values, length, extend)

    counts = np.arange(length, dtype=np.float64)           # r - 1
    log_fact = special.gammaln(counts + 1.0)

    def failure_update(q: float) -> float:
        mu = cbar * q
        if mu == 0:
            return float(1.0 - theta_values[0])
        pmf = np.exp(-mu + counts * math.log(mu) - log_fact)
        return float(1.0 - theta_values @ pmf)

    q = 1.0
    p_trace, q_trace = [], []
    converged = False
    p_prev = None
    for _ in range(max_iter):
        p = failure_update(q)
        p_trace.append(p)
        q_trace.append(q)
        if p_prev is not None and abs(p - p_prev) < tol:
            converged = True
            break
        p_prev = p
        q = float(edge_dist(p))

    p_infty = p_trace[-1]
    plr = float(dist.node_poly(p_infty))
    p_arr, q_arr = np.array(p_trace), np.array(q_trace)
    monotone = bool(np.all(np.diff(p_arr) <= 1e-12) and np.all(np.diff(q_arr) <= 1e-12))
    return DeResult(
        load=load,
        p_trace=p_arr,
        q_trace=q_arr,
        p_infty=p_infty,
        plr=plr,
        throughput=load * (1.0 - plr),
        converged=converged,
        iterations=len(p_trace),
        theta_extended=extended,
        traces_monotone=monotone,
    )


@dataclass
class InflectionResult:
    load: float
    bracketed: bool
    monotone: bool
    note: str = ""


def inflection_load(
    dist: DegreeDistribution,
    theta: ThetaTable | np.ndarray,
    load_min: float,
    load_max: float,
    load_tol: float = 0.01,
    zero_plr: float = 1e-4,
    scan_points: int = 9,
    **de_kwargs,
) -> InflectionResult:
    """Largest load whose fixed point still vanishes, by bisection.

    A coarse scan first checks that convergence is monotone in the load
    (vanishing below, stuck above); violations are flagged but bisection
    proceeds on the endpoints anyway. If the whole range converges (or
    none of it does) the corresponding boundary is returned and flagged.
    """
    def vanishes(load: float) -> bool:
        return de_fixed_point(load, dist, theta, **de_kwargs).p_infty < zero_plr

    grid = np.linspace(load_min, load_max, scan_points)
    flags = [vanishes(load) for load in grid]
    monotone = all(a >= b for a, b in zip(flags, flags[1:]))

    if flags[-1]:
        return InflectionResult(load=load_max, bracketed=False, monotone=monotone,
                                note="entire range converges")
    if not flags[0]:
        return InflectionResult(load=load_min, bracketed=False, monotone=monotone,
                                note="no load in range converges")
    lo, hi = load_min, load_max
    while hi - lo > load_tol:
        mid = 0.5 * (lo + hi)
        if vanishes(mid):
            lo = mid
        else:
            hi = mid
    return InflectionResult(load=0.5 * (lo + hi), bracketed=True, monotone=monotone)
