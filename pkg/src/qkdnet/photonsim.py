"""Monte Carlo generation of raw detector time tags from a network plan.

Model
-----
Each channel-pair routing is an independent homogeneous Poisson source of
photon pairs at ``pair_rate_hz * pump_scale``.  Per emission, each photon
is routed to one recipient of its side (uniform over the splitter
outputs), chooses a measurement path in the receiver (short = HV basis
with probability ``pam_transmit_fraction``, long = DA, delayed by
``pam_delta_ps``), and produces an outcome bit that selects the detector.
Same-basis partners share one ideal bit; cross-basis outcomes are
independent coin flips; each station's ``polarization_error`` flips its
outcome independently.  A photon is detected with probability
``heralding * 10**(-loss_db/10) * detector_efficiency``; detected
timestamps get Gaussian timing jitter (sigma = FWHM / 2.355), the fiber
propagation delay, the per-channel multiplexing-unit delay and the
per-detector electronic delay, then round to integer picoseconds.
Dark counts are uniform Poisson per detector; a non-zero dead time drops
any record within ``dead_time_ps`` after an accepted record on the same
detector.  Multi-pair emission is plain Poisson pile-up, which is what
produces accidental coincidences.

Determinism
-----------
All randomness derives from ``numpy.random.SeedSequence(seed, spawn_key)``
with a fixed key layout: ``(0, r)`` drives routing/basis/bit/survival
decisions of routing ``r`` (ten uniforms per emission, fixed row order),
``(2, r)`` drives its timing jitter, and ``(1, user_id, detector)`` drives
dark counts.  Decision draws never depend on the configuration values, so
runs that differ only in loss consume identical decision streams and the
detected-event set at higher loss is a subset of the one at lower loss.
Resources use disjoint generators, so the serial implementation here and
any per-resource parallel schedule produce bit-identical output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tagio import UnsortedInput
from .topology import NetworkPlan

__all__ = [
    "SourceConfig",
    "DetectorConfig",
    "StationConfig",
    "TagStream",
    "MergedTagStream",
    "SimulationConfigError",
    "generate_pair_events",
    "simulate_network",
    "calibrate_tags",
    "merge_tags",
]

SPEED_OF_LIGHT_M_S = 299_792_458.0
FIBER_GROUP_INDEX = 1.468
PS_PER_METER = FIBER_GROUP_INDEX / SPEED_OF_LIGHT_M_S * 1e12

FWHM_TO_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))  # ~2.355

_DECISION_KEY = 0
_DARK_KEY = 1
_JITTER_KEY = 2

_PAIR_ID_STRIDE = 1 << 40
_CHUNK = 1 << 20

# decision-block row layout (fixed; see module docstring)
_ROUTE_P, _ROUTE_M, _BASIS_P, _BASIS_M = 0, 1, 2, 3
_BIT_SHARED, _BIT_INDEP, _FLIP_P, _FLIP_M = 4, 5, 6, 7
_SURV_P, _SURV_M = 8, 9
_N_ROWS = 10


class SimulationConfigError(ValueError):
    """A station/source configuration is inconsistent with the plan."""


@dataclass(frozen=True)
class SourceConfig:
    """Pair source: rate per channel pair, pump multiplier, heralding."""

    pair_rate_hz: float
    pump_scale: float = 1.0
    heralding_efficiency: float = 1.0

    def __post_init__(self) -> None:
        if self.pair_rate_hz < 0 or self.pump_scale < 0:
            raise SimulationConfigError("pair rate and pump scale must be >= 0")
        if not 0.0 <= self.heralding_efficiency <= 1.0:
            raise SimulationConfigError("heralding efficiency must be in [0, 1]")


@dataclass(frozen=True)
class DetectorConfig:
    efficiency: float = 1.0
    jitter_fwhm_ps: float = 0.0
    dark_rate_hz: float = 0.0
    dead_time_ps: int = 0
    delay_ps: int = 0  # uncalibrated electronics/path offset

    def __post_init__(self) -> None:
        if not 0.0 <= self.efficiency <= 1.0:
            raise SimulationConfigError("detector efficiency must be in [0, 1]")
        if self.jitter_fwhm_ps < 0 or self.dark_rate_hz < 0 or self.dead_time_ps < 0:
            raise SimulationConfigError("jitter, dark rate and dead time must be >= 0")

    @property
    def jitter_sigma_ps(self) -> float:
        return self.jitter_fwhm_ps / FWHM_TO_SIGMA


@dataclass(frozen=True)
class StationConfig:
    """One user: fiber, receiver module and two detectors (bit 0 / bit 1)."""

    user_id: int
    fiber_loss_db: float = 0.0
    fiber_length_m: float = 0.0
    pam_delta_ps: int = 3700
    pam_transmit_fraction: float = 0.5
    polarization_error: float = 0.0
    detectors: tuple[DetectorConfig, DetectorConfig] = (DetectorConfig(), DetectorConfig())

    def __post_init__(self) -> None:
        if self.fiber_loss_db < 0 or self.fiber_length_m < 0:
            raise SimulationConfigError("fiber loss and length must be >= 0")
        if not 0.0 < self.pam_transmit_fraction < 1.0:
            raise SimulationConfigError("pam_transmit_fraction must be in (0, 1)")
        if not 0.0 <= self.polarization_error <= 0.5:
            raise SimulationConfigError("polarization_error must be in [0, 0.5]")
        if len(self.detectors) != 2:
            raise SimulationConfigError("a station has exactly two detectors")

    @property
    def propagation_delay_ps(self) -> int:
        return round(self.fiber_length_m * PS_PER_METER)

    @property
    def transmittance(self) -> float:
        return 10.0 ** (-self.fiber_loss_db / 10.0)


@dataclass
class TagStream:
    """Sorted detection records of one user.

    ``timestamps``/``detectors`` are what the hardware records; ``origin``
    (routing index), ``basis`` (0 short/HV, 1 long/DA) and ``pair_id`` are
    simulation ground truth for oracle tests only, -1 for dark counts.
    They are never serialized and must never cross the user boundary.
    """

    user_id: int
    duration_ps: int
    timestamps: np.ndarray
    detectors: np.ndarray
    origin: np.ndarray | None = None
    basis: np.ndarray | None = None
    pair_id: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.timestamps.size)


@dataclass
class MergedTagStream:
    """Publishable view of a stream: calibrated timestamps only."""

    user_id: int
    duration_ps: int
    timestamps: np.ndarray

    def __len__(self) -> int:
        return int(self.timestamps.size)


def generate_pair_events(
    pair_rate_hz: float,
    pump_scale: float,
    duration_s: float,
    rng_seed,
) -> np.ndarray:
    """Sorted emission times (float ps) of one channel pair's Poisson process."""
    if duration_s <= 0:
        raise SimulationConfigError("duration must be > 0")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = rng.poisson(pair_rate_hz * pump_scale * duration_s)
    times = rng.random(n) * (duration_s * 1e12)
    times.sort()
    return times


def _resource_generator(seed: int, key: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key, index))))


def _dark_generator(seed: int, user_id: int, det: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(_DARK_KEY, user_id, det)))
    )


class _SideTables:
    """Per-recipient lookup tables for one side of a routing."""

    def __init__(self, users, stations, source, routing, side: str):
        n = len(users)
        self.users = list(users)
        self.surv_base = np.empty(n)
        self.eff = np.empty((n, 2))
        self.sigma = np.empty((n, 2))
        self.det_delay = np.empty((n, 2), dtype=np.int64)
        self.base_delay = np.empty(n, dtype=np.int64)
        self.pam_delta = np.empty(n, dtype=np.int64)
        self.trans_frac = np.empty(n)
        self.e_pol = np.empty(n)
        mu_delay = routing.plus_delay_ps if side == "plus" else routing.minus_delay_ps
        extra = 10.0 ** (-routing.extra_loss_db / 10.0)
        for p, u in enumerate(self.users):
            st = stations[u]
            self.surv_base[p] = source.heralding_efficiency * st.transmittance * extra
            for d in (0, 1):
                det = st.detectors[d]
                self.eff[p, d] = det.efficiency
                self.sigma[p, d] = det.jitter_sigma_ps
                self.det_delay[p, d] = det.delay_ps
            self.base_delay[p] = st.propagation_delay_ps + mu_delay
            self.pam_delta[p] = st.pam_delta_ps
            self.trans_frac[p] = st.pam_transmit_fraction
            self.e_pol[p] = st.polarization_error


def simulate_network(
    plan: NetworkPlan,
    source: SourceConfig,
    stations: Mapping[int, StationConfig],
    duration_s: float,
    seed: int,
) -> dict[int, TagStream]:
    """Run the full network for ``duration_s`` and return one stream per user."""
    _validate(plan, stations, duration_s)
    t_max_ps = round(duration_s * 1e12)
    rate = source.pair_rate_hz * source.pump_scale

    buffers: dict[int, list[tuple]] = {u: [] for u in plan.users}

    for r_index, routing in enumerate(plan.routings):
        rng = _resource_generator(seed, _DECISION_KEY, r_index)
        rng_jit = _resource_generator(seed, _JITTER_KEY, r_index)
        n = int(rng.poisson(rate * duration_s))
        emissions = rng.random(n) * float(t_max_ps)

        sides = (
            _SideTables(routing.plus_recipients, stations, source, routing, "plus"),
            _SideTables(routing.minus_recipients, stations, source, routing, "minus"),
        )

        for lo in range(0, n, _CHUNK):
            hi = min(lo + _CHUNK, n)
            m = hi - lo
            block = rng.random((_N_ROWS, m))
            emit = emissions[lo:hi]
            ids = np.arange(lo, hi, dtype=np.int64) + r_index * _PAIR_ID_STRIDE

            bit_shared = block[_BIT_SHARED] < 0.5

            tab_p, tab_m = sides
            n_p = len(tab_p.users)
            pos_p = np.minimum((block[_ROUTE_P] * n_p).astype(np.intp), n_p - 1)
            basis_p = block[_BASIS_P] >= tab_p.trans_frac[pos_p]
            n_m = len(tab_m.users)
            pos_m = np.minimum((block[_ROUTE_M] * n_m).astype(np.intp), n_m - 1)
            basis_m = block[_BASIS_M] >= tab_m.trans_frac[pos_m]

            same = basis_p == basis_m
            bit_p = bit_shared
            bit_m = np.where(same, bit_shared, block[_BIT_INDEP] < 0.5)

            for tab, pos, basis_x, bit0, flip_row, surv_row in (
                (tab_p, pos_p, basis_p, bit_p, _FLIP_P, _SURV_P),
                (tab_m, pos_m, basis_m, bit_m, _FLIP_M, _SURV_M),
            ):
                bit = bit0 ^ (block[flip_row] < tab.e_pol[pos])
                biti = bit.astype(np.intp)
                p_detect = tab.surv_base[pos] * tab.eff[pos, biti]
                det_mask = block[surv_row] < p_detect
                if not det_mask.any():
                    continue
                idx = np.flatnonzero(det_mask)
                pos_d = pos[idx]
                bit_d = biti[idx]
                sigma = tab.sigma[pos_d, bit_d]
                jitter = rng_jit.standard_normal(idx.size) * sigma
                t = (
                    np.rint(emit[idx] + jitter).astype(np.int64)
                    + tab.base_delay[pos_d]
                    + tab.det_delay[pos_d, bit_d]
                    + np.where(basis_x[idx], tab.pam_delta[pos_d], 0)
                )
                basis_val = basis_x[idx].astype(np.int8)
                for p, user in enumerate(tab.users):
                    sel = pos_d == p
                    if not sel.any():
                        continue
                    buffers[user].append(
                        (
                            t[sel],
                            bit_d[sel].astype(np.uint8),
                            np.full(int(sel.sum()), r_index, dtype=np.int32),
                            basis_val[sel],
                            ids[idx[sel]],
                        )
                    )

    streams: dict[int, TagStream] = {}
    for user in plan.users:
        st = stations[user]
        for d in (0, 1):
            det = st.detectors[d]
            if det.dark_rate_hz <= 0:
                continue
            rng = _dark_generator(seed, user, d)
            n_dark = int(rng.poisson(det.dark_rate_hz * duration_s))
            t = rng.integers(0, t_max_ps, n_dark, dtype=np.int64) + det.delay_ps
            buffers[user].append(
                (
                    t,
                    np.full(n_dark, d, dtype=np.uint8),
                    np.full(n_dark, -1, dtype=np.int32),
                    np.full(n_dark, -1, dtype=np.int8),
                    np.full(n_dark, -1, dtype=np.int64),
                )
            )
        streams[user] = _assemble(user, buffers.pop(user), st, t_max_ps)
    return streams


def _assemble(user: int, chunks: list[tuple], station: StationConfig, t_max_ps: int) -> TagStream:
    if not chunks:
        empty = np.empty(0, dtype=np.int64)
        return TagStream(
            user_id=user, duration_ps=t_max_ps,
            timestamps=empty, detectors=np.empty(0, dtype=np.uint8),
            origin=np.empty(0, dtype=np.int32), basis=np.empty(0, dtype=np.int8),
            pair_id=empty.copy(),
        )
    t = np.concatenate([c[0] for c in chunks])
    det = np.concatenate([c[1] for c in chunks])
    origin = np.concatenate([c[2] for c in chunks])
    basis = np.concatenate([c[3] for c in chunks])
    pair = np.concatenate([c[4] for c in chunks])

    order = np.argsort(t, kind="stable")
    t, det, origin, basis, pair = t[order], det[order], origin[order], basis[order], pair[order]

    keep = t >= 0
    dead = (station.detectors[0].dead_time_ps, station.detectors[1].dead_time_ps)
    if any(d > 0 for d in dead):
        keep &= _dead_time_mask(t, det, dead)
    if not keep.all():
        t, det, origin, basis, pair = t[keep], det[keep], origin[keep], basis[keep], pair[keep]

    return TagStream(
        user_id=user, duration_ps=t_max_ps,
        timestamps=t, detectors=det, origin=origin, basis=basis, pair_id=pair,
    )


def _dead_time_mask(t: np.ndarray, det: np.ndarray, dead: tuple[int, int]) -> np.ndarray:
    """Non-paralyzable dead time per detector on a time-sorted stream."""
    keep = np.ones(t.size, dtype=bool)
    last = [None, None]
    t_list = t.tolist()
    d_list = det.tolist()
    for i in range(len(t_list)):
        d = d_list[i]
        if dead[d] <= 0:
            continue
        ti = t_list[i]
        if last[d] is not None and ti - last[d] < dead[d]:
            keep[i] = False
        else:
            last[d] = ti
    return keep


def calibrate_tags(stream: TagStream, delays_ps=(0, 0)) -> TagStream:
    """Subtract the per-detector calibration delay; keeps records aligned.

    The result is re-sorted (calibration can reorder near-simultaneous
    records of different detectors), so its timestamp column can serve
    directly as the user's merged, publishable stream.
    """
    _require_sorted(stream.timestamps)
    shift = np.asarray(delays_ps, dtype=np.int64)[np.asarray(stream.detectors, dtype=np.intp)]
    t = stream.timestamps - shift
    order = np.argsort(t, kind="stable")

    def take(a):
        return None if a is None else a[order]

    return TagStream(
        user_id=stream.user_id, duration_ps=stream.duration_ps,
        timestamps=t[order], detectors=stream.detectors[order],
        origin=take(stream.origin), basis=take(stream.basis), pair_id=take(stream.pair_id),
    )


def merge_tags(stream: TagStream, delays_ps=None) -> MergedTagStream:
    """Publishable merged stream: calibrated timestamps, nothing else.

    Detector ids and ground-truth fields are stripped; this is the only
    form of a stream that may leave a user's station.
    """
    if delays_ps is not None and any(delays_ps):
        stream = calibrate_tags(stream, delays_ps)
    else:
        _require_sorted(stream.timestamps)
    return MergedTagStream(
        user_id=stream.user_id,
        duration_ps=stream.duration_ps,
        timestamps=stream.timestamps.copy(),
    )


def _require_sorted(t: np.ndarray) -> None:
    if t.size and np.any(np.diff(t) < 0):
        raise UnsortedInput("stream timestamps are not sorted")


def _validate(plan: NetworkPlan, stations: Mapping[int, StationConfig], duration_s: float) -> None:
    if duration_s <= 0:
        raise SimulationConfigError("duration must be > 0")
    missing = [u for u in plan.users if u not in stations]
    if missing:
        raise SimulationConfigError(f"no station config for plan users {missing}")
    for u, st in stations.items():
        if st.user_id != u:
            raise SimulationConfigError(f"station keyed {u} carries user_id {st.user_id}")
    for routing in plan.routings:
        for side in ("plus", "minus"):
            rec = routing.recipients(side)
            if len(rec) > 1 and abs(routing.split_fraction * len(rec) - 1.0) > 1e-9:
                raise SimulationConfigError(
                    "only uniform splitters are supported; run validate_plan for details"
                )
