"""Experiment runner: config files, sweeps, rate metric, CSV emission.

Config files are flat INI-style text with one section per concern
([scenario], [simulate], [sweep], [theta], [de]); unknown sections or
keys are errors so typos fail fast. Powers are written in dBm and SNRs in
dB; conversion to linear happens here, once, and everything downstream is
linear. Output is plain CSV with a fixed column set per subcommand, and
every run is bit-reproducible from (config, seed): trial i of sweep point
j draws from the stream keyed (seed, j, i). Wall-clock time is logged,
never written to the CSV.
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import de as de_mod
from .scenario import DegreeDistribution, SystemConfig, soliton_distribution
from .sic import monte_carlo_throughput

log = logging.getLogger(__name__)

_SCENARIO_KEYS = {
    "num_res": int,
    "num_users": int,
    "load": float,
    "num_antennas": int,
    "pilot_len": int,
    "data_power_dbm": float,
    "pilot_power_dbm": float,
    "noise_power_dbm": float,
    "cell_edge_snr_db": float,
    "fading_variance": float,
    "path_loss_exponent": float,
    "power_control_exponent": float,
    "cell_radius_m": float,
    "reference_distance_m": float,
    "sinr_threshold": float,
    "msbl_prune_threshold": float,
    "msbl_iters": int,
    "rzf_regularizer": float,
    "max_decode_iters": int,
    "degree_max": int,
    "degree_masses": str,
    "estimator": str,
    "combiner": str,
    "seed": int,
}
_SIMULATE_KEYS = {"trials": int}
_SWEEP_KEYS = {"axis": str, "values": str, "trials": int, "metrics": str, "packet_len": int}
_THETA_KEYS = {
    "source": str,
    "r_max": int,
    "trials": int,
    "mode": str,
    "pilot_len": int,
    "combiner": str,
    "rzf_regularizer": float,
    "rho0_db": float,
}
_DE_KEYS = {
    "loads": str,
    "find_inflection": bool,
    "inflection_range": str,
    "load_tol": float,
    "max_iter": int,
    "tol": float,
    "tail_eps": float,
    "extend": str,
}
_SECTION_KEYS = {
    "scenario": _SCENARIO_KEYS,
    "simulate": _SIMULATE_KEYS,
    "sweep": _SWEEP_KEYS,
    "theta": _THETA_KEYS,
    "de": _DE_KEYS,
}

SWEEP_AXES = ("pilot_len", "antennas", "edge_snr_db", "load", "rzf_lambda",
              "power_control_zeta", "num_res")
_AXIS_KEY = {
    "pilot_len": "pilot_len",
    "antennas": "num_antennas",
    "edge_snr_db": "cell_edge_snr_db",
    "load": "load",
    "rzf_lambda": "rzf_regularizer",
    "power_control_zeta": "power_control_exponent",
    "num_res": "num_res",
}
_INT_AXES = {"pilot_len", "antennas", "num_res"}

METRICS = ("throughput", "plr", "rate")

SIMULATE_COLUMNS = ["trials", "throughput_mean", "throughput_ci95", "plr_mean", "plr_ci95"]
SWEEP_COLUMNS = ["axis", "value", "trials", "throughput_mean", "throughput_ci95",
                 "plr_mean", "plr_ci95", "rate_mean", "rate_ci95", "status"]
DE_COLUMNS = ["kind", "load", "p_infty", "plr", "throughput", "converged",
              "iterations", "note"]
TRACE_COLUMNS = ["iteration", "p", "q"]


def dbm_to_mw(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


@dataclass
class RateSpec:
    """Payload geometry turning throughput into a rate in bits/s/Hz."""

    packet_len: int
    pilot_len: int
    gamma_th: float

    def __post_init__(self):
        if not 0 <= self.pilot_len <= self.packet_len:
            raise ValueError("need 0 <= pilot_len <= packet_len")

    def rate(self, throughput: float) -> float:
        return compute_rate(throughput, self.pilot_len, self.packet_len, self.gamma_th)


def compute_rate(throughput: float, pilot_len: int, packet_len: int,
                 gamma_th: float) -> float:
    """Net rate: payload fraction times throughput times log2(1 + threshold)."""
    if pilot_len > packet_len:
        raise ValueError("pilot_len exceeds packet_len")
    return (1.0 - pilot_len / packet_len) * throughput * math.log2(1.0 + gamma_th)


@dataclass
class SweepSpec:
    """One sweep: a base scenario, an axis, its values, trials per point."""

    scenario: dict
    axis: str
    values: list
    trials: int
    metrics: tuple = ("throughput", "plr")
    packet_len: int | None = None

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        bad = set(self.metrics) - set(METRICS)
        if bad:
            raise ValueError(f"unknown metrics {sorted(bad)}")
        if "rate" in self.metrics and self.packet_len is None:
            raise ValueError("rate metric needs packet_len")


@dataclass
class BenchConfig:
    """Parsed config file: raw scenario mapping plus per-subcommand bits."""

    scenario: dict
    simulate: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    theta: dict = field(default_factory=dict)
    de: dict = field(default_factory=dict)


def _parse_section(parser, name, spec) -> dict:
    out = {}
    for key in parser[name]:
        if key not in spec:
            raise ValueError(f"unknown key {key!r} in section [{name}]")
        kind = spec[key]
        if kind is bool:
            out[key] = parser[name].getboolean(key)
        else:
            out[key] = kind(parser[name][key])
    return out


def load_config(text: str) -> BenchConfig:
    """Parse config text; unknown sections or keys raise ValueError."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"),
                                       interpolation=None)
    parser.read_string(text)
    sections = {}
    for name in parser.sections():
        if name not in _SECTION_KEYS:
            raise ValueError(f"unknown section [{name}]")
        sections[name] = _parse_section(parser, name, _SECTION_KEYS[name])
    if "scenario" not in sections:
        raise ValueError("config needs a [scenario] section")
    return BenchConfig(
        scenario=sections["scenario"],
        simulate=sections.get("simulate", {}),
        sweep=sections.get("sweep", {}),
        theta=sections.get("theta", {}),
        de=sections.get("de", {}),
    )


def _parse_degree_masses(text: str) -> DegreeDistribution:
    degrees, probs = [], []
    for item in text.split(","):
        d, _, p = item.partition(":")
        degrees.append(int(d.strip()))
        probs.append(float(p.strip()))
    return DegreeDistribution(np.array(degrees), np.array(probs))


def build_system_config(scenario: dict) -> SystemConfig:
    """Resolve a raw scenario mapping into a SystemConfig (all linear units)."""
    sc = dict(scenario)
    if "degree_masses" in sc:
        dist = _parse_degree_masses(sc.pop("degree_masses"))
        sc.pop("degree_max", None)
    else:
        dist = soliton_distribution(sc.pop("degree_max", 27))

    kwargs = {
        "num_res": sc.pop("num_res"),
        "num_antennas": sc.pop("num_antennas"),
        "pilot_len": sc.pop("pilot_len"),
        "degree_dist": dist,
    }
    if "num_users" in sc and "load" in sc:
        raise ValueError("give exactly one of num_users / load")
    if "num_users" in sc:
        kwargs["num_users"] = sc.pop("num_users")
    else:
        kwargs["load"] = sc.pop("load")
    if "noise_power_dbm" in sc and "cell_edge_snr_db" in sc:
        raise ValueError("give exactly one of noise_power_dbm / cell_edge_snr_db")
    if "noise_power_dbm" in sc:
        kwargs["noise_power"] = dbm_to_mw(sc.pop("noise_power_dbm"))
    else:
        kwargs["cell_edge_snr_db"] = sc.pop("cell_edge_snr_db", 10.0)
    kwargs["data_power"] = dbm_to_mw(sc.pop("data_power_dbm", 20.0))
    kwargs["pilot_power"] = dbm_to_mw(sc.pop("pilot_power_dbm", 20.0))
    rename = {
        "cell_radius_m": "cell_radius",
        "reference_distance_m": "reference_distance",
    }
    for key, target in rename.items():
        if key in sc:
            kwargs[target] = sc.pop(key)
    kwargs.update(sc)
    return SystemConfig.create(**kwargs)


def _parse_values(text: str) -> list[float]:
    text = text.strip()
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        return list(np.arange(start, stop + 0.5 * step, step))
    return [float(x) for x in text.split(",")]


def make_sweep_spec(cfg: BenchConfig) -> SweepSpec:
    sw = cfg.sweep
    if not sw:
        raise ValueError("config has no [sweep] section")
    metrics = tuple(m.strip() for m in sw.get("metrics", "throughput,plr").split(","))
    return SweepSpec(
        scenario=dict(cfg.scenario),
        axis=sw["axis"],
        values=_parse_values(sw["values"]),
        trials=sw.get("trials", 1000),
        metrics=metrics,
        packet_len=sw.get("packet_len"),
    )


def apply_axis(scenario: dict, axis: str, value) -> dict:
    """Return the scenario mapping with one sweep-axis override applied."""
    out = dict(scenario)
    key = _AXIS_KEY[axis]
    out[key] = int(round(value)) if axis in _INT_AXES else float(value)
    if axis == "edge_snr_db":
        out.pop("noise_power_dbm", None)
    if axis == "load":
        out.pop("num_users", None)
    return out


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(header, rows) -> str:
    """Deterministic CSV text: repr floats, '\\n' line ends, UTF-8 safe."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(render_csv(header, rows))


def run_simulate(cfg: BenchConfig, trials: int | None = None,
                 seed: int | None = None, threads: int = 1) -> list[list]:
    """Monte Carlo at a single operating point; one CSV row."""
    scenario = dict(cfg.scenario)
    if seed is not None:
        scenario["seed"] = seed
    system = build_system_config(scenario)
    n_trials = trials if trials is not None else cfg.simulate.get("trials", 1000)
    start = time.perf_counter()
    result = monte_carlo_throughput(system, n_trials, max_workers=threads)
    log.info("simulate: %d trials in %.1f s", n_trials, time.perf_counter() - start)
    return [[result.num_trials, result.throughput, result.throughput_ci,
             result.plr, result.plr_ci]]


def run_sweep(spec: SweepSpec, seed: int | None = None, threads: int = 1) -> list[list]:
    """One CSV row per axis value; per-point failures become flagged rows.

    Point j runs its trials on streams keyed (seed, j, trial), so the
    whole table is reproducible and points are independent.
    """
    rows = []
    for index, value in enumerate(spec.values):
        scenario = apply_axis(spec.scenario, spec.axis, value)
        if seed is not None:
            scenario["seed"] = seed
        row = [spec.axis, value, spec.trials, "", "", "", "", "", "", "ok"]
        start = time.perf_counter()
        try:
            system = build_system_config(scenario)
            result = monte_carlo_throughput(system, spec.trials, max_workers=threads,
                                            stream_prefix=(index,))
            if "throughput" in spec.metrics:
                row[3], row[4] = result.throughput, result.throughput_ci
            if "plr" in spec.metrics:
                row[5], row[6] = result.plr, result.plr_ci
            if "rate" in spec.metrics:
                rate_spec = RateSpec(packet_len=spec.packet_len,
                                     pilot_len=system.pilot_len,
                                     gamma_th=system.sinr_threshold)
                row[7] = rate_spec.rate(result.throughput)
                row[8] = rate_spec.rate(result.throughput_ci)
        except Exception as exc:  # noqa: BLE001 - failures must not kill the sweep
            row[9] = f"error: {exc}"
            log.error("sweep point %s=%r failed: %s", spec.axis, value, exc)
        log.info("sweep point %s=%r done in %.1f s",
                 spec.axis, value, time.perf_counter() - start)
        rows.append(row)
    return rows


def _theta_params(cfg: BenchConfig, seed: int | None, trials: int | None):
    system = build_system_config(cfg.scenario)
    th = cfg.theta
    rho0_db = th.get("rho0_db", system.cell_edge_snr_db())
    return {
        "source": th.get("source", "empirical"),
        "r_max": th.get("r_max", 16),
        "trials": trials if trials is not None else th.get("trials", 10_000),
        "mode": th.get("mode", "perfect"),
        "pilot_len": th.get("pilot_len", system.pilot_len),
        "combiner": th.get("combiner", "mrc"),
        "rzf_regularizer": th.get("rzf_regularizer", system.rzf_regularizer),
        "rho0": 10.0 ** (rho0_db / 10.0),
        "num_antennas": system.num_antennas,
        "gamma_th": system.sinr_threshold,
        "seed": seed if seed is not None else system.seed,
        "system": system,
    }


def run_theta(cfg: BenchConfig, seed: int | None = None,
              trials: int | None = None) -> de_mod.ThetaTable:
    """Build the theta table named by the config ([theta] section)."""
    params = _theta_params(cfg, seed, trials)
    if params["source"] == "empirical":
        start = time.perf_counter()
        table = de_mod.estimate_theta_empirical(
            r_max=params["r_max"],
            num_antennas=params["num_antennas"],
            rho0=params["rho0"],
            gamma_th=params["gamma_th"],
            trials=params["trials"],
            mode=params["mode"],
            pilot_len=params["pilot_len"],
            combiner=params["combiner"],
            rzf_regularizer=params["rzf_regularizer"],
            seed=params["seed"],
        )
        log.info("theta table (%s, r<=%d, %d trials) in %.1f s", params["mode"],
                 params["r_max"], params["trials"], time.perf_counter() - start)
        return table
    return de_mod.theta_table_closed_form(
        params["source"], params["r_max"], params["num_antennas"],
        params["rho0"], params["gamma_th"])


def run_de(cfg: BenchConfig, seed: int | None = None, trials: int | None = None):
    """Fixed-point rows (plus optional inflection row) and p/q traces.

    Returns (rows, traces) where traces is the per-iteration (p, q) list
    of the run when exactly one load is given, else None.
    """
    params = _theta_params(cfg, seed, trials)
    system = params["system"]
    table = run_theta(cfg, seed=seed, trials=trials)
    dcfg = cfg.de
    de_kwargs = {
        "max_iter": dcfg.get("max_iter", 10_000),
        "tol": dcfg.get("tol", 1e-10),
        "tail_eps": dcfg.get("tail_eps", 1e-12),
        "extend": dcfg.get("extend", "zero"),
    }
    loads = _parse_values(dcfg["loads"]) if "loads" in dcfg else [system.load]
    rows = []
    traces = None
    for load in loads:
        result = de_mod.de_fixed_point(load, system.degree_dist, table, **de_kwargs)
        rows.append(["fixed_point", load, result.p_infty, result.plr,
                     result.throughput, result.converged, result.iterations, ""])
        if result.theta_extended:
            rows[-1][7] = "theta table extended to truncation point"
        if len(loads) == 1:
            traces = list(zip(range(len(result.p_trace)),
                              result.p_trace, result.q_trace))
    if dcfg.get("find_inflection", False):
        if "inflection_range" in dcfg:
            lo, hi = (float(x) for x in dcfg["inflection_range"].split(","))
        else:
            lo, hi = min(loads), max(loads)
        result = de_mod.inflection_load(
            system.degree_dist, table, lo, hi,
            load_tol=dcfg.get("load_tol", 0.01), **de_kwargs)
        at_star = de_mod.de_fixed_point(result.load, system.degree_dist, table,
                                        **de_kwargs)
        note = result.note or ("bracketed" if result.bracketed else "")
        if not result.monotone:
            note = (note + "; non-monotone convergence in range").strip("; ")
        rows.append(["inflection", result.load, at_star.p_infty, at_star.plr,
                     at_star.throughput, at_star.converged, at_star.iterations, note])
    return rows, traces
