"""TOML run-configuration schema: parsing, validation, defaults.

A config file has four fixed sections plus one table per user::

    [network]  users, subnets
    [source]   pair_rate_hz, pump_scale, heralding, mu_delay_step_ps
    [security] xi_ph, epsilon, f, alpha_mode
    [sim]      duration_s, seed, tau_c_ps (int or "optimize"),
               tau_candidates_ps, block_s
    [[users]]  id, loss_db, length_m, e_pol,
               pam { delta_ps, split },
               detectors = [ { efficiency, jitter_fwhm_ps, dark_hz,
                               dead_ps, delay_ps }, ... x2 ]

The schema is closed: unknown keys anywhere are rejected, every plan user
must have exactly one table, and value ranges are checked before any run.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

from .distill import SecurityParams
from .photonsim import DetectorConfig, SimulationConfigError, SourceConfig, StationConfig
from .topology import MU_DELAY_STEP_PS

__all__ = ["ConfigError", "SimParams", "NetworkConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Configuration file fails schema validation."""


@dataclass(frozen=True)
class SimParams:
    duration_s: float
    seed: int
    tau_c_ps: int | None  # None means optimize in post processing
    tau_candidates_ps: tuple[int, ...]
    block_s: float | None


@dataclass(frozen=True)
class NetworkConfig:
    n_users: int
    k_subnets: int
    source: SourceConfig
    stations: dict[int, StationConfig]
    security: SecurityParams
    sim: SimParams
    alpha_mode: str | float
    mu_delay_step_ps: int

    def calibration_delays(self) -> dict[int, tuple[int, int]]:
        """Per-user detector calibration constants (the configured delays)."""
        return {
            uid: (st.detectors[0].delay_ps, st.detectors[1].delay_ps)
            for uid, st in self.stations.items()
        }


def _expect_keys(table: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _get(table: Mapping[str, Any], key: str, kind, where: str, default=None, required=False):
    if key not in table:
        if required:
            raise ConfigError(f"{where}: missing required key '{key}'")
        return default
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got bool")
    if not isinstance(value, kind):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _parse_detector(table: Mapping[str, Any], where: str) -> DetectorConfig:
    _expect_keys(table, {"efficiency", "jitter_fwhm_ps", "dark_hz", "dead_ps", "delay_ps"}, where)
    try:
        return DetectorConfig(
            efficiency=_get(table, "efficiency", float, where, default=1.0),
            jitter_fwhm_ps=_get(table, "jitter_fwhm_ps", float, where, default=0.0),
            dark_rate_hz=_get(table, "dark_hz", float, where, default=0.0),
            dead_time_ps=_get(table, "dead_ps", int, where, default=0),
            delay_ps=_get(table, "delay_ps", int, where, default=0),
        )
    except SimulationConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_user(table: Mapping[str, Any], where: str) -> StationConfig:
    _expect_keys(table, {"id", "loss_db", "length_m", "e_pol", "pam", "detectors"}, where)
    uid = _get(table, "id", int, where, required=True)
    pam = table.get("pam", {})
    if not isinstance(pam, Mapping):
        raise ConfigError(f"{where}.pam: expected a table")
    _expect_keys(pam, {"delta_ps", "split"}, f"{where}.pam")
    detectors = table.get("detectors", [{}, {}])
    if not isinstance(detectors, list) or len(detectors) != 2:
        raise ConfigError(f"{where}.detectors: expected a list of exactly 2 tables")
    try:
        return StationConfig(
            user_id=uid,
            fiber_loss_db=_get(table, "loss_db", float, where, default=0.0),
            fiber_length_m=_get(table, "length_m", float, where, default=0.0),
            pam_delta_ps=_get(pam, "delta_ps", int, f"{where}.pam", default=3700),
            pam_transmit_fraction=_get(pam, "split", float, f"{where}.pam", default=0.5),
            polarization_error=_get(table, "e_pol", float, where, default=0.0),
            detectors=(
                _parse_detector(detectors[0], f"{where}.detectors[0]"),
                _parse_detector(detectors[1], f"{where}.detectors[1]"),
            ),
        )
    except SimulationConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(doc: Mapping[str, Any]) -> NetworkConfig:
    _expect_keys(dict(doc), {"network", "source", "security", "sim", "users"}, "config")
    for section in ("network", "source", "sim"):
        if section not in doc:
            raise ConfigError(f"config: missing required section [{section}]")

    net = doc["network"]
    _expect_keys(net, {"users", "subnets"}, "network")
    n_users = _get(net, "users", int, "network", required=True)
    k_subnets = _get(net, "subnets", int, "network", required=True)

    src = doc["source"]
    _expect_keys(src, {"pair_rate_hz", "pump_scale", "heralding", "mu_delay_step_ps"}, "source")
    try:
        source = SourceConfig(
            pair_rate_hz=_get(src, "pair_rate_hz", float, "source", required=True),
            pump_scale=_get(src, "pump_scale", float, "source", default=1.0),
            heralding_efficiency=_get(src, "heralding", float, "source", default=1.0),
        )
    except SimulationConfigError as exc:
        raise ConfigError(f"source: {exc}") from exc
    mu_step = _get(src, "mu_delay_step_ps", int, "source", default=MU_DELAY_STEP_PS)

    sec = doc.get("security", {})
    _expect_keys(sec, {"xi_ph", "epsilon", "f", "alpha_mode"}, "security")
    try:
        security = SecurityParams(
            xi_ph=_get(sec, "xi_ph", float, "security", default=1e-5),
            epsilon=_get(sec, "epsilon", float, "security", default=None),
            f=_get(sec, "f", float, "security", default=1.0),
        )
    except ValueError as exc:
        raise ConfigError(f"security: {exc}") from exc
    alpha_mode = sec.get("alpha_mode", "measured")
    if isinstance(alpha_mode, bool) or not isinstance(alpha_mode, (str, int, float)):
        raise ConfigError("security.alpha_mode: expected 'measured', 'worst_case' or a number")
    if isinstance(alpha_mode, str) and alpha_mode not in ("measured", "worst_case"):
        raise ConfigError(f"security.alpha_mode: unknown mode {alpha_mode!r}")
    if isinstance(alpha_mode, (int, float)) and alpha_mode < 1:
        raise ConfigError("security.alpha_mode: numeric alpha must be >= 1")

    sim_tbl = doc["sim"]
    _expect_keys(sim_tbl, {"duration_s", "seed", "tau_c_ps", "tau_candidates_ps", "block_s"}, "sim")
    tau_raw = sim_tbl.get("tau_c_ps", 130)
    if isinstance(tau_raw, str):
        if tau_raw != "optimize":
            raise ConfigError(f"sim.tau_c_ps: expected an integer or 'optimize', got {tau_raw!r}")
        tau_c = None
    elif isinstance(tau_raw, int) and not isinstance(tau_raw, bool) and tau_raw > 0:
        tau_c = tau_raw
    else:
        raise ConfigError(f"sim.tau_c_ps: expected a positive integer or 'optimize'")
    candidates = sim_tbl.get("tau_candidates_ps", [50, 80, 130, 200, 300, 450, 700])
    if not isinstance(candidates, list) or not candidates or not all(
        isinstance(t, int) and not isinstance(t, bool) and t > 0 for t in candidates
    ):
        raise ConfigError("sim.tau_candidates_ps: expected a non-empty list of positive integers")
    duration = _get(sim_tbl, "duration_s", float, "sim", required=True)
    if duration <= 0:
        raise ConfigError("sim.duration_s must be > 0")
    block = _get(sim_tbl, "block_s", float, "sim", default=None)
    if block is not None and block <= 0:
        raise ConfigError("sim.block_s must be > 0")
    sim = SimParams(
        duration_s=duration,
        seed=_get(sim_tbl, "seed", int, "sim", required=True),
        tau_c_ps=tau_c,
        tau_candidates_ps=tuple(candidates),
        block_s=block,
    )

    users = doc.get("users")
    if not isinstance(users, list) or not users:
        raise ConfigError("config: missing [[users]] tables")
    stations: dict[int, StationConfig] = {}
    for i, table in enumerate(users):
        st = _parse_user(table, f"users[{i}]")
        if st.user_id in stations:
            raise ConfigError(f"users[{i}]: duplicate user id {st.user_id}")
        stations[st.user_id] = st
    expected = set(range(n_users))
    if set(stations) != expected:
        missing = sorted(expected - set(stations))
        extra = sorted(set(stations) - expected)
        raise ConfigError(
            f"users: need ids exactly 0..{n_users - 1}; missing {missing}, unexpected {extra}"
        )

    return NetworkConfig(
        n_users=n_users,
        k_subnets=k_subnets,
        source=source,
        stations=stations,
        security=security,
        sim=sim,
        alpha_mode=alpha_mode if isinstance(alpha_mode, str) else float(alpha_mode),
        mu_delay_step_ps=mu_step,
    )


def load_config(path: str | Path) -> NetworkConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    return parse_config(doc)
