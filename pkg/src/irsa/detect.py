"""Receive combining and per-user SINR in one RE.

The SINR of a user is the ratio of its useful signal power to noise plus
multi-user interference plus estimation-error power (plus, under the
sparsity-based estimator, the power of transmitting users the detector
missed). All interference terms are conditioned on the channel estimates,
which is what makes the expression usable inside the decoding loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .chest import EstimateSet

log = logging.getLogger(__name__)

#: Relative regulariser applied when zero forcing meets a wide matrix.
ZF_FALLBACK_SCALE = 1e-6


def rzf_combiner(estimates: np.ndarray, regularizer: float) -> np.ndarray:
    """Regularised zero-forcing combiner A = H (H^H H + lambda I)^{-1}.

    regularizer -> 0 recovers zero forcing (requires full column rank);
    regularizer -> infinity recovers maximum-ratio directions. SINRs are
    invariant to the per-column scale, so the limits are exact in SINR.
    """
    if regularizer < 0:
        raise ValueError("regularizer must be >= 0")
    n = estimates.shape[1]
    if n == 0:
        return estimates.copy()
    gram = estimates.conj().T @ estimates
    if regularizer == 0 and estimates.shape[0] < n:
        raise np.linalg.LinAlgError("zero forcing needs at least as many antennas as users")
    mat = gram + regularizer * np.eye(n)
    if regularizer == 0:
        # Fail loudly on rank deficiency instead of returning garbage.
        np.linalg.cholesky(mat)
    return np.linalg.solve(mat.T, estimates.T).T


def mrc_combiner(estimates: np.ndarray) -> np.ndarray:
    return estimates.copy()


def zf_combiner(estimates: np.ndarray) -> np.ndarray:
    return rzf_combiner(estimates, 0.0)


def make_combiner(estimates: np.ndarray, combiner: str, regularizer: float) -> np.ndarray:
    """Build the configured combiner, with the wide-matrix ZF fallback.

    When zero forcing is requested but the RE holds more streams than
    antennas, a lightly regularised combiner (trace-scaled) is used
    instead and the event is logged.
    """
    if combiner == "mrc":
        return mrc_combiner(estimates)
    if combiner == "rzf":
        return rzf_combiner(estimates, regularizer)
    if combiner == "zf":
        n_ant, n = estimates.shape
        if n and n_ant < n:
            fallback = ZF_FALLBACK_SCALE * np.einsum("ij,ij->", estimates.conj(), estimates).real / n
            log.warning("zero forcing infeasible (%d antennas < %d streams): "
                        "falling back to regularizer %.3e", n_ant, n, fallback)
            return rzf_combiner(estimates, fallback)
        return zf_combiner(estimates)
    raise ValueError(f"unknown combiner {combiner!r}")


@dataclass
class SinrReport:
    """SINR decomposition for the users of one RE.

    Components are normalised by the data power, so
    sinr = gain / (noise_power/data_power + mui + est + fnu)
    reconstructs exactly. ``fnu`` is zero except under the sparsity-based
    estimator, where it carries the missed transmitting users.
    """

    users: np.ndarray
    sinr: np.ndarray
    gain: np.ndarray
    mui: np.ndarray
    est: np.ndarray
    fnu: np.ndarray


def sinr_report(
    combiner_cols: np.ndarray,
    est: EstimateSet,
    data_power: float,
    noise_power: float,
    apm_row: np.ndarray | None = None,
    prior_vars: np.ndarray | None = None,
) -> SinrReport:
    """Per-user SINR in one RE, conditioned on the channel estimates.

    ``combiner_cols`` has one column per column of ``est.estimates``; a
    zero column marks a user the receiver cannot combine for this round
    and yields SINR 0. ``apm_row`` gives the true activity of each
    estimate column (defaults to all-ones, the case where every column is
    a transmitting user). Under the msbl scheme the detected activity row
    gates signal/interference/error terms and missed users contribute
    their full mean received power (``prior_vars``) instead.
    """
    n = est.num_users
    if apm_row is None:
        active = np.ones(n)
    else:
        active = np.asarray(apm_row, dtype=np.float64)
    if est.scheme == "msbl":
        effective = active * est.apm_row_estimate
        missed = (1.0 - est.apm_row_estimate) * active * np.asarray(prior_vars, dtype=np.float64)
    else:
        effective = active
        missed = np.zeros(n)

    inner = combiner_cols.conj().T @ est.estimates          # (n, n): a_m^H h_i
    energy = (np.abs(combiner_cols) ** 2).sum(axis=0)       # ||a_m||^2
    cross_power = np.abs(inner) ** 2 * effective            # row m, col i
    diag = np.diagonal(cross_power)

    usable = energy > 0
    safe_energy = np.where(usable, energy, 1.0)
    gain = np.where(usable, diag / safe_energy, 0.0)
    mui = np.where(usable, (cross_power.sum(axis=1) - diag) / safe_energy, 0.0)
    est_term = float((effective * est.error_variances).sum()) * np.ones(n)
    fnu = missed.sum() - missed                              # excludes the user itself
    denom = noise_power / data_power + mui + est_term + fnu
    sinr = np.where(usable, gain / denom, 0.0)
    return SinrReport(users=est.users, sinr=sinr, gain=gain, mui=mui,
                      est=est_term, fnu=fnu)


def mrc_sinr(estimates: np.ndarray, error_variances: np.ndarray,
             data_power: float, noise_power: float) -> np.ndarray:
    """Closed-form maximum-ratio SINR (combiner = own estimate)."""
    gram = estimates.conj().T @ estimates
    norms = np.diagonal(gram).real
    cross = np.abs(gram) ** 2
    inter = (cross.sum(axis=1) - np.diagonal(cross)) / np.where(norms > 0, norms, 1.0)
    denom = noise_power / data_power + error_variances.sum() + inter
    return np.where(norms > 0, norms / denom, 0.0)


def zf_sinr(estimates: np.ndarray, error_variances: np.ndarray,
            data_power: float, noise_power: float) -> np.ndarray:
    """Closed-form zero-forcing SINR via the inverse Gram diagonal."""
    gram = estimates.conj().T @ estimates
    inv_diag = np.diagonal(np.linalg.inv(gram)).real
    return 1.0 / ((noise_power / data_power + error_variances.sum()) * inv_diag)


@dataclass
class DetSinrReport:
    """Large-antenna deterministic-equivalent SINR decomposition.

    sinr = N * sig / (eps * (noise_power/data_power + ncoh) + coh); ncoh
    collects estimation error and non-coherent interference (independent of
    N), while coh is the pilot-contamination term growing linearly with N.
    """

    users: np.ndarray
    sinr: np.ndarray
    eps: np.ndarray
    sig: np.ndarray
    ncoh: np.ndarray
    coh: np.ndarray


def deterministic_sinr(
    est: EstimateSet,
    pilots: np.ndarray,
    prior_vars: np.ndarray,
    num_antennas: int,
    data_power: float,
    noise_power: float,
    apm_row: np.ndarray | None = None,
) -> DetSinrReport:
    """Almost-sure large-N limit of the maximum-ratio SINR.

    ``pilots``/``prior_vars`` are aligned with the estimate columns. The
    lcmmse scheme uses the raw pilots as the kernel columns; mmse and msbl
    use the kernel that generated their estimates.
    """
    n = est.num_users
    active = np.ones(n) if apm_row is None else np.asarray(apm_row, dtype=np.float64)
    prior_vars = np.asarray(prior_vars, dtype=np.float64)
    if est.scheme == "lcmmse":
        kernel = pilots
    elif est.kernel is not None:
        kernel = est.kernel
    else:
        raise ValueError("deterministic SINR needs an estimation kernel")

    cross = np.abs(kernel.conj().T @ pilots) ** 2           # |c_m^H p_i|^2, row m
    kernel_energy = (np.abs(kernel) ** 2).sum(axis=0)
    weights = active * prior_vars
    eps = noise_power * kernel_energy + cross @ weights

    if est.scheme == "msbl":
        own = est.apm_row_estimate * active
    else:
        own = active
    if est.scheme == "lcmmse":
        pilot_energy = (np.abs(pilots) ** 2).sum(axis=0)
        sig = own * prior_vars**2 * pilot_energy**2
    else:
        sig = own * eps**2

    coh_terms = cross * (active * prior_vars**2)
    coh = num_antennas * (coh_terms.sum(axis=1) - np.diagonal(coh_terms))
    ncoh_inter = weights.sum() - weights
    ncoh = own * est.error_variances + ncoh_inter
    denom = eps * (noise_power / data_power + ncoh) + coh
    sinr = np.where(denom > 0, num_antennas * sig / np.where(denom > 0, denom, 1.0), 0.0)
    return DetSinrReport(users=est.users, sinr=sinr, eps=eps, sig=sig, ncoh=ncoh, coh=coh)
