"""Closed-form rate predictions: singles, coincidences, accidentals, QBER.

These formulas are the analytic twin of the Monte Carlo simulator and are
cross-checked against it statistically.  Per arm of a resource the photon
survival is ``q = side_fraction * heralding * 10**(-loss/10) * eta``; true
pair coincidences on a link sum ``rate * q_a * q_b`` over its resources
(with exact detector-pairing weights when the two detectors of a station
differ), accidentals follow ``S_a * S_b * tau_c`` per coincidence window,
and the fraction of true middle-peak pairs inside the window under
Gaussian jitter is ``erf(tau_c / (2 * sqrt(2) * sigma_ab))`` with
``sigma_ab**2 = sigma_a**2 + sigma_b**2``.  Key rates here are asymptotic
(infinite-key, ``e_p = alpha * e_b``); finite-key numbers come from the
distillation pipeline.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .distill import binary_entropy
from .photonsim import DetectorConfig, SourceConfig, StationConfig
from .topology import NetworkPlan, plan_network

__all__ = [
    "LinkPrediction",
    "predict_singles",
    "predict_link",
    "default_tau_ps",
    "sweep_pump",
    "sweep_scalability",
    "write_sweep_csv",
    "DEFAULT_FAMILIES",
]

#: Fig-8-style sweep families: (users, subnets); 2-subnet plans plot solid,
#: sqrt(n)-subnet plans dashed.
DEFAULT_FAMILIES = ((8, 2), (16, 2), (32, 2), (16, 4), (49, 7))


@dataclass(frozen=True)
class LinkPrediction:
    singles_a_hz: float
    singles_b_hz: float
    true_coinc_hz: float       # both photons of a pair detected, any basis
    middle_true_hz: float      # same-basis subset, before the window cut
    accidental_hz: float       # per coincidence window of width tau_c
    window_efficiency: float
    e_b_pred: float
    sifted_hz: float
    key_rate_bps: float
    tau_c_ps: int
    alpha: float
    n_windows: int


def _dead_corrected(rate_hz: float, dead_time_ps: int) -> float:
    if dead_time_ps <= 0 or rate_hz <= 0:
        return rate_hz
    return rate_hz / (1.0 + rate_hz * dead_time_ps * 1e-12)


def predict_singles(
    plan: NetworkPlan,
    source: SourceConfig,
    stations: Mapping[int, StationConfig],
    user: int,
) -> tuple[float, float]:
    """Predicted singles rate (Hz) of each detector of ``user``.

    Every channel routed to the user contributes
    ``rate * side_fraction * heralding * transmittance * eta / 2`` per
    detector (outcomes are marginally uniform), on top of dark counts;
    a non-zero dead time applies the non-paralyzable correction
    ``R / (1 + R * dead)``.
    """
    st = stations[user]
    rate = source.pair_rate_hz * source.pump_scale
    s = [st.detectors[0].dark_rate_hz, st.detectors[1].dark_rate_hz]
    for routing in plan.routings:
        extra = 10.0 ** (-routing.extra_loss_db / 10.0)
        for side in ("plus", "minus"):
            rec = routing.recipients(side)
            if user not in rec:
                continue
            arrival = (
                rate / len(rec)
                * source.heralding_efficiency
                * st.transmittance
                * extra
            )
            for d in (0, 1):
                s[d] += 0.5 * arrival * st.detectors[d].efficiency
    return (
        _dead_corrected(s[0], st.detectors[0].dead_time_ps),
        _dead_corrected(s[1], st.detectors[1].dead_time_ps),
    )


def _same_basis_terms(st_u: StationConfig, st_v: StationConfig):
    """Detector-exact weights for same-basis pairs.

    Enumerates the shared ideal bit and both stations' independent outcome
    flips; returns (detect weight, error weight, [(weight, sigma^2)]
    jitter combos) where weights already include detector efficiencies.
    """
    e_u, e_v = st_u.polarization_error, st_v.polarization_error
    eff_u = [d.efficiency for d in st_u.detectors]
    eff_v = [d.efficiency for d in st_v.detectors]
    sig_u = [d.jitter_sigma_ps for d in st_u.detectors]
    sig_v = [d.jitter_sigma_ps for d in st_v.detectors]
    detect = err = 0.0
    combos: list[tuple[float, float]] = []
    for shared in (0, 1):
        for fu in (0, 1):
            for fv in (0, 1):
                p = 0.5 * (e_u if fu else 1 - e_u) * (e_v if fv else 1 - e_v)
                bu, bv = shared ^ fu, shared ^ fv
                w = p * eff_u[bu] * eff_v[bv]
                detect += w
                if bu != bv:
                    err += w
                combos.append((w, sig_u[bu] ** 2 + sig_v[bv] ** 2))
    return detect, err, combos


def _window_efficiency(tau_c_ps: int, combos) -> float:
    total = sum(w for w, _ in combos)
    if total <= 0.0:
        return 1.0
    acc = 0.0
    for w, sig2 in combos:
        if sig2 <= 0.0:
            acc += w
        else:
            acc += w * math.erf(tau_c_ps / (2.0 * math.sqrt(2.0 * sig2)))
    return acc / total


def default_tau_ps(st_u: StationConfig, st_v: StationConfig, factor: float = 3.0) -> int:
    """Window default: ``factor`` times the combined jitter FWHM (min 2 ps)."""
    fw_u = sum(d.jitter_fwhm_ps for d in st_u.detectors) / 2.0
    fw_v = sum(d.jitter_fwhm_ps for d in st_v.detectors) / 2.0
    combined = math.hypot(fw_u, fw_v)
    return max(2, int(round(factor * combined)))


def predict_link(
    plan: NetworkPlan,
    source: SourceConfig,
    stations: Mapping[int, StationConfig],
    link: tuple[int, int],
    tau_c_ps: int | None = None,
    *,
    f: float = 1.0,
) -> LinkPrediction:
    """Analytic rates, QBER and asymptotic key rate for one link."""
    u, v = min(link), max(link)
    resources = plan.resources(u, v)
    st_u, st_v = stations[u], stations[v]
    if tau_c_ps is None:
        tau_c_ps = default_tau_ps(st_u, st_v)
    rate = source.pair_rate_hz * source.pump_scale

    p_u, p_v = st_u.pam_transmit_fraction, st_v.pam_transmit_fraction
    p_same = p_u * p_v + (1 - p_u) * (1 - p_v)
    same_det, same_err, combos = _same_basis_terms(st_u, st_v)
    mean_eff_u = sum(d.efficiency for d in st_u.detectors) / 2.0
    mean_eff_v = sum(d.efficiency for d in st_v.detectors) / 2.0

    true = middle = middle_err = 0.0
    for r_index, _joint in resources:
        routing = plan.routings[r_index]
        if u in routing.plus_recipients and v in routing.minus_recipients:
            side_u, side_v = routing.plus_recipients, routing.minus_recipients
        else:
            side_u, side_v = routing.minus_recipients, routing.plus_recipients
        extra = 10.0 ** (-routing.extra_loss_db / 10.0)
        s_u = source.heralding_efficiency * st_u.transmittance * extra / len(side_u)
        s_v = source.heralding_efficiency * st_v.transmittance * extra / len(side_v)
        base = rate * s_u * s_v
        true += base * (p_same * same_det + (1 - p_same) * mean_eff_u * mean_eff_v)
        middle += base * p_same * same_det
        middle_err += base * p_same * same_err

    singles_u = sum(predict_singles(plan, source, stations, u))
    singles_v = sum(predict_singles(plan, source, stations, v))
    accidental = singles_u * singles_v * tau_c_ps * 1e-12
    w_eff = _window_efficiency(tau_c_ps, combos)

    n_windows = len(resources)
    middle_in_window = middle * w_eff
    err_in_window = middle_err * w_eff
    sifted = middle_in_window + n_windows * accidental
    if sifted > 0.0:
        e_b = (err_in_window + 0.5 * n_windows * accidental) / sifted
    else:
        e_b = 0.5

    joint_z = p_u * p_v
    joint_x = (1 - p_u) * (1 - p_v)
    alpha = max(joint_z, joint_x) / max(min(joint_z, joint_x), 1e-300)
    e_p = min(alpha * e_b, 0.5)
    key = sifted * max(0.0, 1.0 - binary_entropy(e_p) - f * binary_entropy(min(e_b, 0.5)))

    return LinkPrediction(
        singles_a_hz=singles_u,
        singles_b_hz=singles_v,
        true_coinc_hz=true,
        middle_true_hz=middle,
        accidental_hz=accidental,
        window_efficiency=w_eff,
        e_b_pred=e_b,
        sifted_hz=sifted,
        key_rate_bps=key,
        tau_c_ps=int(tau_c_ps),
        alpha=alpha,
        n_windows=n_windows,
    )


def sweep_pump(
    plan: NetworkPlan,
    source: SourceConfig,
    stations: Mapping[int, StationConfig],
    pump_scales: Sequence[float],
    tau_c_ps: int | None = None,
    *,
    f: float = 1.0,
) -> list[dict]:
    """Asymptotic key rate of every link (plus the network total) vs pump.

    True coincidences grow linearly with pump while accidentals grow
    quadratically, so with any noise floor the total-key curve has a
    single interior maximum.
    """
    if not pump_scales or any(s <= 0 for s in pump_scales):
        raise ValueError("pump scales must be positive")
    if sorted(pump_scales) != list(pump_scales):
        raise ValueError("pump scales must be ascending")
    rows: list[dict] = []
    for scale in pump_scales:
        src = SourceConfig(
            pair_rate_hz=source.pair_rate_hz,
            pump_scale=scale,
            heralding_efficiency=source.heralding_efficiency,
        )
        total = 0.0
        for link in plan.links():
            pred = predict_link(plan, src, stations, link, tau_c_ps, f=f)
            total += pred.key_rate_bps
            rows.append(
                {
                    "x": scale, "link": f"{link[0]}-{link[1]}",
                    "key_rate_bps": pred.key_rate_bps,
                    "e_b": pred.e_b_pred, "accidental_hz": pred.accidental_hz,
                }
            )
        rows.append(
            {"x": scale, "link": "total", "key_rate_bps": total, "e_b": "", "accidental_hz": ""}
        )
    return rows


def sweep_scalability(
    loss_db_values: Sequence[float],
    families: Sequence[tuple[int, int]] = DEFAULT_FAMILIES,
    *,
    pair_rate_hz: float = 1e5,
    heralding: float = 0.2,
    detector_efficiency: float = 0.7,
    jitter_fwhm_ps: float = 100.0,
    dark_rate_hz: float = 0.0,
    polarization_error: float = 0.0,
    tau_c_ps: int | None = None,
    f: float = 1.0,
) -> list[dict]:
    """Key rate of a non-premium link vs per-user transmission loss.

    Defaults reproduce the published scalability simulation: 100 ps jitter,
    70 % detection efficiency, 1e5 pairs/s per channel pair, 20 %
    heralding.  Each (n, k) family reports the lexicographically first
    non-premium link of its plan.
    """
    rows: list[dict] = []
    for n, k in families:
        plan = plan_network(n, k)
        link = next(l for l in plan.links() if l not in plan.premium_links)
        source = SourceConfig(pair_rate_hz=pair_rate_hz, heralding_efficiency=heralding)
        style = "solid" if k == 2 else "dashed"
        for loss in loss_db_values:
            stations = {
                uid: StationConfig(
                    user_id=uid,
                    fiber_loss_db=float(loss),
                    polarization_error=polarization_error,
                    detectors=(
                        DetectorConfig(
                            efficiency=detector_efficiency,
                            jitter_fwhm_ps=jitter_fwhm_ps,
                            dark_rate_hz=dark_rate_hz,
                        ),
                    ) * 2,
                )
                for uid in plan.users
            }
            pred = predict_link(plan, source, stations, link, tau_c_ps, f=f)
            rows.append(
                {
                    "x": float(loss), "family": f"{n}u{k}s", "n": n, "k": k,
                    "style": style, "link": f"{link[0]}-{link[1]}",
                    "key_rate_bps": pred.key_rate_bps,
                    "e_b": pred.e_b_pred, "accidental_hz": pred.accidental_hz,
                }
            )
    return rows


def write_sweep_csv(rows: Sequence[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("nothing to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
