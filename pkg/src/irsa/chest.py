"""Channel estimation for one RE from the residual pilot signal.

Three schemes are provided. ``mmse`` and ``lcmmse`` know which users
transmit in the RE and their mean received powers; ``msbl`` knows neither
and jointly recovers the per-RE activity row and the channels from the
joint sparsity of the multiple-measurement-vector model, via expectation
maximisation over per-user channel-variance hyperparameters. Every scheme
also reports the per-user estimation-error variance, which feeds the SINR
denominators downstream.

All estimates are conditional means, so the error is uncorrelated with
the estimate, and (estimate, error variance) fully describe the
conditional channel law.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

#: Relative ridge used when a nominally positive-definite solve fails.
RIDGE_SCALE = 1e-12


def solve_hermitian(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve mat @ x = rhs for Hermitian positive-definite mat.

    Positive noise power makes true singularity impossible; if floating
    point disagrees, a trace-scaled ridge is added once and a warning
    logged.
    """
    try:
        return np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError:
        n = mat.shape[-1]
        tr = np.trace(mat, axis1=-2, axis2=-1).real
        ridge = RIDGE_SCALE * np.maximum(np.atleast_1d(tr), 1.0)
        eye = np.eye(n)
        regmat = mat + np.asarray(ridge)[..., None, None] * eye
        log.warning("singular Hermitian solve: retrying with %.1e*trace ridge", RIDGE_SCALE)
        return np.linalg.solve(regmat, rhs)


@dataclass
class EstimateSet:
    """Per-RE channel estimates for one decoding iteration.

    ``users`` indexes the columns of ``estimates``: for mmse/lcmmse/perfect
    these are the undecoded users transmitting in the RE; for msbl they are
    all undecoded users (the estimator cannot restrict further). ``kernel``
    holds the pilot-domain combining matrix whose columns generate the
    estimates and the error variances; it is reused by the deterministic
    SINR approximation. msbl additionally reports the detected activity row
    and the final hyperparameters.
    """

    scheme: str
    users: np.ndarray              # (n,) user indices
    estimates: np.ndarray          # (N, n) complex
    error_variances: np.ndarray    # (n,) real
    kernel: np.ndarray | None = None       # (tau, n) complex
    apm_row_estimate: np.ndarray | None = None   # (n,) uint8, msbl only
    hyperparameters: np.ndarray | None = None    # (n,) real, msbl only

    @property
    def num_users(self) -> int:
        return self.users.size


def _empty(scheme: str, num_antennas: int, pilot_len: int) -> EstimateSet:
    return EstimateSet(
        scheme=scheme,
        users=np.empty(0, dtype=np.int64),
        estimates=np.empty((num_antennas, 0), dtype=np.complex128),
        error_variances=np.empty(0),
        kernel=np.empty((pilot_len, 0), dtype=np.complex128),
    )


def _ct(mat: np.ndarray) -> np.ndarray:
    """Conjugate transpose of the trailing two axes."""
    return np.swapaxes(mat, -1, -2).conj()


def mmse_kernel(pilots: np.ndarray, weights: np.ndarray, noise_power: float) -> np.ndarray:
    """Pilot-domain kernel C with estimate = Y_pilot @ C.

    For prior channel variances ``weights`` (one per pilot column),
    C = (P W P^H + N0 I)^{-1} P W = P W (P^H P W + N0 I)^{-1}; the two
    forms are algebraically identical and the cheaper inverse is taken.
    Leading batch axes on ``pilots``/``weights`` are supported.
    """
    tau, n = pilots.shape[-2:]
    weights = np.asarray(weights, dtype=np.float64)
    weighted = pilots * weights[..., None, :]
    if n <= tau:
        gram = _ct(pilots) @ weighted + noise_power * np.eye(n)
        return np.swapaxes(
            np.linalg.solve(np.swapaxes(gram, -1, -2), np.swapaxes(weighted, -1, -2)),
            -1, -2)
    cov = weighted @ _ct(pilots) + noise_power * np.eye(tau)
    return solve_hermitian(cov, weighted)


def lcmmse_kernel(pilots: np.ndarray, weights: np.ndarray, noise_power: float) -> np.ndarray:
    """Kernel of the inversion-free estimator: column m is eta_m * p_m.

    eta_m is the scalar MMSE coefficient for the signal projected onto
    user m's own pilot; ``weights`` are the effective received channel
    variances (zero for users absent from the RE). Batch axes supported.
    """
    weights = np.asarray(weights, dtype=np.float64)
    cross = _ct(pilots) @ pilots
    pilot_energy = np.diagonal(cross, axis1=-2, axis2=-1).real
    den = noise_power * pilot_energy + \
        (np.abs(cross) ** 2 * weights[..., :, None]).sum(axis=-2)
    eta = np.zeros_like(den)
    np.divide(weights * pilot_energy, den, out=eta, where=den > 0)
    return pilots * eta[..., None, :]


def kernel_error_variances(
    kernel: np.ndarray,
    pilots: np.ndarray,
    prior_vars: np.ndarray,
    weights: np.ndarray,
    noise_power: float,
) -> np.ndarray:
    """Estimation-error variance per user for a linear kernel estimate.

    With r_ji = p_j^H c_i, the variance of user i's error is

        prior_i * (N0 ||c_i||^2 + sum_{j != i} |r_ji|^2 w_j)
                / (N0 ||c_i||^2 + sum_j      |r_ji|^2 w_j).

    ``weights`` are the effective received variances of the contaminating
    users (they equal ``prior_vars`` when the activity row is known). A
    zero kernel column means the RE carries no information about that
    user's effective channel; its variance is reported as 0, consistent
    with the zero estimate of a user that did not transmit. Batch axes
    are supported.
    """
    weights = np.asarray(weights, dtype=np.float64)
    cross = _ct(pilots) @ kernel                           # (..., n, n): r_ji
    col_energy = (np.abs(kernel) ** 2).sum(axis=-2)
    den = noise_power * col_energy + \
        (np.abs(cross) ** 2 * weights[..., :, None]).sum(axis=-2)
    num = den - np.abs(np.diagonal(cross, axis1=-2, axis2=-1)) ** 2 * weights
    out = np.zeros_like(den)
    np.divide(prior_vars * num, den, out=out, where=den > 0)
    return out


def mmse_estimate(
    pilot_signal: np.ndarray,
    pilots: np.ndarray,
    prior_vars: np.ndarray,
    noise_power: float,
    users: np.ndarray | None = None,
) -> EstimateSet:
    """MMSE estimates for the users known to transmit in the RE.

    ``pilot_signal`` is (N, tau); ``pilots`` holds the transmitting users'
    pilots as columns and ``prior_vars`` their mean received channel
    variances (path gain times fading variance).
    """
    prior_vars = np.asarray(prior_vars, dtype=np.float64)
    if users is None:
        users = np.arange(pilots.shape[1])
    if pilots.shape[1] == 0:
        return _empty("mmse", pilot_signal.shape[0], pilots.shape[0])
    kernel = mmse_kernel(pilots, prior_vars, noise_power)
    return EstimateSet(
        scheme="mmse",
        users=np.asarray(users, dtype=np.int64),
        estimates=pilot_signal @ kernel,
        error_variances=kernel_error_variances(kernel, pilots, prior_vars, prior_vars, noise_power),
        kernel=kernel,
    )


def lcmmse_estimate(
    pilot_signal: np.ndarray,
    pilots: np.ndarray,
    prior_vars: np.ndarray,
    noise_power: float,
    users: np.ndarray | None = None,
    apm_row: np.ndarray | None = None,
) -> EstimateSet:
    """Inversion-free per-user MMSE from the pilot-matched projection.

    User m's estimate is eta_m * (Y_pilot @ p_m), the scalar MMSE fit to
    the signal projected onto its own pilot; pilot contamination enters
    through the cross-correlations |p_i^H p_m|^2 in eta and in the error
    variance. ``apm_row`` masks users that do not transmit in this RE
    (their estimate and error variance are identically zero).
    """
    prior_vars = np.asarray(prior_vars, dtype=np.float64)
    if users is None:
        users = np.arange(pilots.shape[1])
    if pilots.shape[1] == 0:
        return _empty("lcmmse", pilot_signal.shape[0], pilots.shape[0])
    present = np.ones(pilots.shape[1]) if apm_row is None else np.asarray(apm_row, dtype=np.float64)
    active_vars = prior_vars * present
    kernel = lcmmse_kernel(pilots, active_vars, noise_power)
    return EstimateSet(
        scheme="lcmmse",
        users=np.asarray(users, dtype=np.int64),
        estimates=pilot_signal @ kernel,
        error_variances=kernel_error_variances(kernel, pilots, active_vars, active_vars, noise_power),
        kernel=kernel,
    )


def perfect_estimate(channels: np.ndarray, users: np.ndarray, pilot_len: int) -> EstimateSet:
    """Genie estimates: the true channels, with zero error variance."""
    n = channels.shape[1]
    return EstimateSet(
        scheme="perfect",
        users=np.asarray(users, dtype=np.int64),
        estimates=channels.copy(),
        error_variances=np.zeros(n),
        kernel=None,
    )


def msbl_em(
    pilot_signal_ct: np.ndarray,
    pilots: np.ndarray,
    noise_power: float,
    num_iters: int,
    gamma0: np.ndarray | None = None,
):
    """Hyperparameter EM recursion of the joint-sparse recovery scheme.

    ``pilot_signal_ct`` is the conjugate-transposed received pilot block,
    (..., tau, N), with an arbitrary batch shape (one slice per RE); all
    slices share the candidate pilot matrix ``pilots`` (tau, n). Each
    iteration performs the posterior-statistics step

        Sigma = Gamma - Gamma P^H (N0 I + P Gamma P^H)^{-1} P Gamma
        mu_n  = Gamma P^H (N0 I + P Gamma P^H)^{-1} y_n

    followed by the variance re-estimate
    gamma_i <- Sigma_ii + mean_n |mu_ni|^2. Only the diagonal of Sigma is
    ever formed. Returns (gamma, mu) after ``num_iters`` iterations.
    """
    batch = pilot_signal_ct.shape[:-2]
    tau, n = pilots.shape
    n_ant = pilot_signal_ct.shape[-1]
    if gamma0 is None:
        gamma = np.ones(batch + (n,))
    else:
        gamma = np.broadcast_to(np.asarray(gamma0, dtype=np.float64), batch + (n,)).copy()
    eye = noise_power * np.eye(tau)
    mu = np.zeros(batch + (n, n_ant), dtype=np.complex128)
    for _ in range(num_iters):
        weighted = pilots * gamma[..., None, :]
        cov = weighted @ pilots.conj().T + eye
        # One factorisation serves both the posterior variance (needs
        # K^{-1} P) and the posterior means (need K^{-1} Y).
        rhs = np.concatenate(
            [np.broadcast_to(pilots, batch + (tau, n)), pilot_signal_ct], axis=-1)
        back_proj = solve_hermitian(cov, rhs)
        kinv_pilots = back_proj[..., :n]
        kinv_signal = back_proj[..., n:]
        quad = np.einsum("...ti,ti->...i", kinv_pilots, pilots.conj()).real
        sigma_diag = np.maximum(gamma - gamma**2 * quad, 0.0)
        mu = gamma[..., :, None] * (pilots.conj().T @ kinv_signal)
        gamma = sigma_diag + (np.abs(mu) ** 2).mean(axis=-1)
    return gamma, mu


def msbl_estimate(
    pilot_signal: np.ndarray,
    pilots: np.ndarray,
    noise_power: float,
    num_iters: int,
    prune_threshold: float,
    true_prior_vars: np.ndarray,
    true_apm_row: np.ndarray,
    users: np.ndarray | None = None,
) -> EstimateSet:
    """Joint activity and channel estimation for one RE.

    ``pilots`` holds the pilots of every undecoded user (the candidate
    set); nothing about the APM or path losses is given to the estimator.
    Hyperparameters start at one and are thresholded at
    ``prune_threshold`` after ``num_iters`` EM iterations to form the
    detected activity row; the channel estimate is the plug-in MMSE
    estimate under the final hyperparameters.

    ``true_prior_vars``/``true_apm_row`` do not influence the estimate:
    they enter only the reported error variances, which are ground-truth
    bookkeeping for the SINR (the variance is relative to the channel that
    was actually transmitted, so it is computed for detected transmitting
    users and reported as zero otherwise).
    """
    if users is None:
        users = np.arange(pilots.shape[1])
    if pilots.shape[1] == 0:
        return _empty("msbl", pilot_signal.shape[0], pilots.shape[0])
    gamma, _ = msbl_em(pilot_signal.conj().T, pilots, noise_power, num_iters)
    detected = (gamma >= prune_threshold).astype(np.uint8)
    est_kernel = mmse_kernel(pilots, gamma, noise_power)

    true_prior_vars = np.asarray(true_prior_vars, dtype=np.float64)
    effective = detected * np.asarray(true_apm_row, dtype=np.float64) * true_prior_vars
    err_kernel = mmse_kernel(pilots, effective, noise_power)
    return EstimateSet(
        scheme="msbl",
        users=np.asarray(users, dtype=np.int64),
        estimates=pilot_signal @ est_kernel,
        error_variances=kernel_error_variances(
            err_kernel, pilots, true_prior_vars, effective, noise_power),
        kernel=err_kernel,
        apm_row_estimate=detected,
        hyperparameters=gamma,
    )


def estimate_path_loss_msbl(
    hyperparameters: np.ndarray,
    detections: np.ndarray,
    fading_variance: float,
) -> np.ndarray:
    """Per-user path-gain estimate from hyperparameters across REs.

    ``hyperparameters`` and ``detections`` are (T, n) over the REs of one
    decoding iteration. A detected hyperparameter models the user's mean
    received channel variance in that RE, so averaging over detected REs
    and dividing by the fading variance recovers the path gain. Users
    detected nowhere get NaN.
    """
    detections = np.asarray(detections, dtype=np.float64)
    counts = detections.sum(axis=0)
    totals = (detections * hyperparameters).sum(axis=0)
    out = np.full(counts.shape, np.nan)
    np.divide(totals, fading_variance * counts, out=out, where=counts > 0)
    return out
