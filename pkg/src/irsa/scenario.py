"""Scenario sampling for multi-antenna IRSA frames.

Everything physical about one simulated frame lives here: user placement
and path loss, repetition-degree distributions, the binary access pattern
matrix (APM), pilot sequences, per-RE channels, and the received pilot
signal. All powers are linear (mW); dB/dBm conversion is the config
loader's job.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ESTIMATORS = ("mmse", "lcmmse", "msbl", "perfect")
COMBINERS = ("mrc", "zf", "rzf")


def _crandn(rng: np.random.Generator, shape) -> np.ndarray:
    """Unit-variance circular complex Gaussian samples."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


@dataclass(frozen=True)
class DegreeDistribution:
    """Node-perspective repetition-degree distribution of the users.

    ``probs[i]`` is the probability that a user transmits ``degrees[i]``
    replicas of its packet in a frame. Degrees must be >= 2: a single
    replica cannot be recovered by inter-RE cancellation.
    """

    degrees: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        degrees = np.asarray(self.degrees, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "degrees", degrees)
        object.__setattr__(self, "probs", probs)
        if degrees.ndim != 1 or probs.shape != degrees.shape or degrees.size == 0:
            raise ValueError("degrees and probs must be matching non-empty 1-D arrays")
        if np.any(degrees < 2):
            raise ValueError("all repetition degrees must be >= 2")
        if np.unique(degrees).size != degrees.size:
            raise ValueError("degrees must be distinct")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to 1 within 1e-12")

    @property
    def max_degree(self) -> int:
        return int(self.degrees.max())

    @property
    def mean_degree(self) -> float:
        return float(self.degrees @ self.probs)

    def node_poly(self, x):
        """Evaluate the node-perspective polynomial sum_d probs_d * x**d."""
        x = np.asarray(x, dtype=np.float64)
        return (self.probs * np.power(x[..., None], self.degrees)).sum(axis=-1)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(self.degrees, size=size, p=self.probs)


def soliton_distribution(max_degree: int) -> DegreeDistribution:
    """Ideal soliton distribution truncated to degrees {2, ..., max_degree}.

    The ideal soliton puts mass 1/(d*(d-1)) on degree d and 1/max_degree on
    degree 1. Degree-1 users are not admissible here, so that mass is
    dropped and the rest renormalised (the remaining masses telescope to
    1 - 1/max_degree).
    """
    if max_degree < 2:
        raise ValueError("max_degree must be >= 2")
    degrees = np.arange(2, max_degree + 1)
    masses = 1.0 / (degrees * (degrees - 1.0))
    return DegreeDistribution(degrees, masses / masses.sum())


def path_loss(distance, reference_distance, exponent):
    """Power-law path gain (distance/reference)**(-exponent).

    Users may land inside the reference distance, in which case the gain
    exceeds one; no clamping is applied.
    """
    distance = np.asarray(distance, dtype=np.float64)
    if np.any(distance <= 0):
        raise ValueError("distance must be positive")
    return (distance / reference_distance) ** (-exponent)


def transmit_power(distance, reference_distance, path_loss_exponent, control_exponent, power):
    """Transmit power under distance-based power control.

    A user at distance r sends at power * (r/r0)**(alpha - zeta), so its
    mean received power scales as (r/r0)**(-zeta): zeta acts as the
    effective path-loss exponent. zeta = alpha is constant transmit power;
    zeta = 0 is full path-loss inversion (equal mean received power).
    """
    distance = np.asarray(distance, dtype=np.float64)
    if np.any(distance <= 0):
        raise ValueError("distance must be positive")
    return power * (distance / reference_distance) ** (path_loss_exponent - control_exponent)


@dataclass(frozen=True)
class SystemConfig:
    """All physical and protocol parameters of one scenario.

    Build instances with :meth:`SystemConfig.create`, which resolves the
    load -> user count and cell-edge SNR -> noise power alternatives.
    """

    num_res: int
    num_users: int
    num_antennas: int
    pilot_len: int
    pilot_power: float          # mW per pilot symbol
    data_power: float           # mW
    noise_power: float          # mW
    fading_variance: float
    path_loss_exponent: float
    power_control_exponent: float
    cell_radius: float          # m
    reference_distance: float   # m
    sinr_threshold: float       # linear
    msbl_prune_threshold: float
    msbl_iters: int
    rzf_regularizer: float
    max_decode_iters: int
    degree_dist: DegreeDistribution
    estimator: str
    combiner: str
    seed: int

    def __post_init__(self):
        if min(self.num_res, self.num_users, self.num_antennas, self.pilot_len) < 1:
            raise ValueError("num_res, num_users, num_antennas, pilot_len must be >= 1")
        if min(self.pilot_power, self.data_power, self.noise_power) <= 0:
            raise ValueError("powers must be positive")
        if self.sinr_threshold <= 0:
            raise ValueError("sinr_threshold must be positive")
        if not 0 < self.reference_distance <= self.cell_radius:
            raise ValueError("need 0 < reference_distance <= cell_radius")
        if self.msbl_iters < 1 or self.max_decode_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.rzf_regularizer < 0:
            raise ValueError("rzf_regularizer must be >= 0")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.combiner not in COMBINERS:
            raise ValueError(f"unknown combiner {self.combiner!r}")
        if self.degree_dist.max_degree > self.num_res:
            raise ValueError("max repetition degree exceeds the number of REs")

    @classmethod
    def create(
        cls,
        *,
        num_res: int,
        num_antennas: int,
        pilot_len: int,
        num_users: int | None = None,
        load: float | None = None,
        pilot_power: float = 100.0,
        data_power: float = 100.0,
        noise_power: float | None = None,
        cell_edge_snr_db: float | None = None,
        fading_variance: float = 1.0,
        path_loss_exponent: float = 3.76,
        power_control_exponent: float | None = None,
        cell_radius: float = 1000.0,
        reference_distance: float = 100.0,
        sinr_threshold: float = 10.0,
        msbl_prune_threshold: float = 1e-6,
        msbl_iters: int = 50,
        rzf_regularizer: float = 1e-2,
        max_decode_iters: int = 20,
        degree_dist: DegreeDistribution | None = None,
        estimator: str = "mmse",
        combiner: str = "rzf",
        seed: int = 0,
    ) -> "SystemConfig":
        if (num_users is None) == (load is None):
            raise ValueError("give exactly one of num_users / load")
        if num_users is None:
            num_users = int(round(load * num_res))
            if num_users < 1:
                raise ValueError("load too small: rounds to zero users")
        if (noise_power is None) == (cell_edge_snr_db is None):
            raise ValueError("give exactly one of noise_power / cell_edge_snr_db")
        if power_control_exponent is None:
            power_control_exponent = path_loss_exponent
        if noise_power is None:
            # Noise level pinning the mean received SNR of a cell-edge user,
            # under the effective (post power control) path-loss exponent.
            edge_gain = (cell_radius / reference_distance) ** (-power_control_exponent)
            noise_power = data_power * fading_variance * edge_gain / 10 ** (cell_edge_snr_db / 10)
        if degree_dist is None:
            degree_dist = soliton_distribution(27)
        return cls(
            num_res=num_res,
            num_users=num_users,
            num_antennas=num_antennas,
            pilot_len=pilot_len,
            pilot_power=pilot_power,
            data_power=data_power,
            noise_power=noise_power,
            fading_variance=fading_variance,
            path_loss_exponent=path_loss_exponent,
            power_control_exponent=power_control_exponent,
            cell_radius=cell_radius,
            reference_distance=reference_distance,
            sinr_threshold=sinr_threshold,
            msbl_prune_threshold=msbl_prune_threshold,
            msbl_iters=msbl_iters,
            rzf_regularizer=rzf_regularizer,
            max_decode_iters=max_decode_iters,
            degree_dist=degree_dist,
            estimator=estimator,
            combiner=combiner,
            seed=seed,
        )

    @property
    def load(self) -> float:
        return self.num_users / self.num_res

    def cell_edge_snr_db(self) -> float:
        edge_gain = (self.cell_radius / self.reference_distance) ** (-self.power_control_exponent)
        return 10 * math.log10(self.data_power * self.fading_variance * edge_gain / self.noise_power)

    def trial_rng(self, *stream) -> np.random.Generator:
        """Independent reproducible stream keyed by (seed, *stream)."""
        return np.random.default_rng(np.random.SeedSequence((self.seed,) + tuple(stream)))


def sample_apm(num_users: int, num_res: int, dist: DegreeDistribution,
               rng: np.random.Generator) -> np.ndarray:
    """Sample a (num_res, num_users) binary APM with i.i.d. columns.

    Column m carries d_m ones in d_m distinct uniformly chosen rows, d_m
    drawn from ``dist``.
    """
    if dist.max_degree > num_res:
        raise ValueError("max repetition degree exceeds the number of REs")
    apm = np.zeros((num_res, num_users), dtype=np.uint8)
    degrees = dist.sample(rng, num_users)
    for m in range(num_users):
        apm[rng.choice(num_res, size=degrees[m], replace=False), m] = 1
    return apm


@dataclass
class FrameRealization:
    """One sampled frame: geometry, APM, pilots, channels, pilot signal.

    Channels are stored per RE for the users transmitting there
    (``channels[t]`` has one column per entry of ``occupants[t]``); users
    absent from an RE never enter any received-signal or SINR expression.
    ``path_gain`` is the effective mean received-power coefficient, i.e.
    it already includes distance-based power control.
    """

    distances: np.ndarray        # (M,)
    path_gain: np.ndarray        # (M,)
    apm: np.ndarray              # (T, M) uint8
    pilots: np.ndarray           # (tau, M) complex
    occupants: list              # per RE: (n_t,) int array
    channels: list               # per RE: (N, n_t) complex
    pilot_signals: np.ndarray    # (T, N, tau) complex

    def channel_of(self, re_index: int, user: int) -> np.ndarray:
        pos = np.flatnonzero(self.occupants[re_index] == user)
        if pos.size == 0:
            raise KeyError(f"user {user} does not transmit in RE {re_index}")
        return self.channels[re_index][:, pos[0]]


def synthesize_frame(cfg: SystemConfig, rng: np.random.Generator) -> FrameRealization:
    """Draw one frame and assemble the received pilot signal per RE.

    Pilot symbols are circular complex Gaussian at per-symbol power
    ``pilot_power``; channels are Rayleigh with per-antenna variance
    path_gain * fading_variance; the pilot signal in RE t is
    sum_m g_tm h_tm p_m^H plus white noise at ``noise_power``. Data
    symbols are never materialised: decoding is SINR-threshold based.
    """
    n_res, n_users = cfg.num_res, cfg.num_users
    distances = cfg.cell_radius * np.sqrt(rng.random(n_users))
    path_gain = path_loss(distances, cfg.reference_distance, cfg.power_control_exponent)

    apm = sample_apm(n_users, n_res, cfg.degree_dist, rng)
    pilots = math.sqrt(cfg.pilot_power) * _crandn(rng, (cfg.pilot_len, n_users))

    chan_var = path_gain * cfg.fading_variance
    occupants = []
    channels = []
    for t in range(n_res):
        occ = np.flatnonzero(apm[t])
        occupants.append(occ)
        h = _crandn(rng, (cfg.num_antennas, occ.size)) * np.sqrt(chan_var[occ])
        channels.append(h)

    signals = math.sqrt(cfg.noise_power) * _crandn(
        rng, (n_res, cfg.num_antennas, cfg.pilot_len))
    for t in range(n_res):
        occ = occupants[t]
        if occ.size:
            signals[t] += channels[t] @ pilots[:, occ].conj().T
    return FrameRealization(
        distances=distances,
        path_gain=path_gain,
        apm=apm,
        pilots=pilots,
        occupants=occupants,
        channels=channels,
        pilot_signals=signals,
    )
