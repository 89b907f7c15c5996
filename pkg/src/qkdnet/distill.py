"""Sifting, QBER estimation and finite-key secure-key lengths.

Two key-length routes are provided.  The simple route bounds the phase
error of the sifted (middle-peak) bits directly:

    e_p^U = alpha * e_b + (1 + alpha) * sqrt((ln 4 - 2 ln xi_ph) / n_s)
    n_f   = n_s * (1 - H2(e_p^U) - f * H2(e_b))

where alpha >= 1 is how much likelier the two stations are to jointly
measure in one basis than the other (alpha = 1 for 50:50 splitters).

The tagged route additionally discounts sifted bits an adversary could
know perfectly by shifting signals by the receiver path delay Delta.
Such tampering shows up as coincidences at receiver offsets +-2*Delta,
so with N = n_mid + n_{+2D} + n_{-2D} and the concentration deviation
delta = sqrt(2 N ln(1/epsilon)):

    N_00^L  = n_mid - n_{+2D} - n_{-2D} - 2*delta      (untagged bits)
    N_ph^U  = alpha * n_err + (1 + alpha) * delta      (phase errors)
    e_p^U   = N_ph^U / N_00^L
    n_f     = N_00^L * (1 - H2(e_p^U)) - f * n_mid * H2(e_b)

Each bound fails with probability epsilon; the simple route corresponds
to xi_ph = 2 * epsilon with no tagged events.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import correlate
from .correlate import NoPeakFound, PeakCounts
from .photonsim import TagStream, calibrate_tags
from .topology import NetworkPlan

__all__ = [
    "DomainError",
    "Degenerate",
    "IndexMismatch",
    "SecurityParams",
    "LinkStats",
    "TaggedKeyResult",
    "ResourceResult",
    "SecureKeyReport",
    "binary_entropy",
    "phase_error_upper",
    "secure_key_length",
    "delta_azuma",
    "secure_key_length_tagged",
    "estimate_basis_bias",
    "sift",
    "sampled_qber",
    "blockwise_report",
    "write_key_report_csv",
]

#: Worst-case joint-basis bias from the receiver splitter tolerance
#: (splitting ratio within 50 +- 14 percent): (0.64*0.64)/(0.36*0.36).
WORST_CASE_ALPHA = (0.64 * 0.64) / (0.36 * 0.36)

DEFAULT_TAU_CANDIDATES = (50, 80, 130, 200, 300, 450, 700)


class DomainError(ValueError):
    """Argument outside the mathematical domain of the formula."""


class Degenerate(ValueError):
    """Peak ratios are inconsistent with any basis-bias model."""


class IndexMismatch(ValueError):
    """Coincidence indices do not fit the private record streams."""


@dataclass(frozen=True)
class SecurityParams:
    """Failure probabilities and error-correction inefficiency.

    ``epsilon`` (per Azuma bound) defaults to ``xi_ph / 2`` so the tagged
    route degenerates exactly to the simple one when nothing is tagged.
    """

    xi_ph: float = 1e-5
    epsilon: float | None = None
    f: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.xi_ph < 1.0:
            raise DomainError("xi_ph must be in (0, 1)")
        if self.epsilon is not None and not 0.0 < self.epsilon < 1.0:
            raise DomainError("epsilon must be in (0, 1)")
        if self.f < 1.0:
            raise DomainError("error-correction inefficiency f must be >= 1")

    @property
    def epsilon_effective(self) -> float:
        return self.epsilon if self.epsilon is not None else self.xi_ph / 2.0


@dataclass(frozen=True)
class LinkStats:
    """Measured statistics of one resource of one link in one block."""

    n_s: int
    n_err: int
    peaks: PeakCounts
    p_z_a: float
    p_z_b: float
    alpha: float

    @property
    def e_b(self) -> float:
        return self.n_err / self.n_s if self.n_s else 0.0


@dataclass(frozen=True)
class TaggedKeyResult:
    delta: float
    n00_lower: float
    n_ph_upper: float
    e_p_u: float
    n_f: int
    clamped_at_zero: bool


@dataclass(frozen=True)
class ResourceResult:
    resource_index: int
    offset_ps: int
    tau_c_ps: int
    stats: LinkStats
    e_p_u: float
    n_f_simple: int
    tagged: TaggedKeyResult


@dataclass(frozen=True)
class SecureKeyReport:
    """Per-link, per-block key summary; premium links sum their resources."""

    link: tuple[int, int]
    block_index: int
    block_start_s: float
    block_len_s: float
    n_s: int
    n_err: int
    e_b: float
    alpha: float
    e_p_u: float
    n_f_simple: int
    n_f_tagged: int
    rate_bps: float
    clamped_at_zero: bool
    per_resource: tuple[ResourceResult, ...] = ()


def binary_entropy(x: float) -> float:
    """Binary Shannon entropy H2(x), with H2(0) = H2(1) = 0."""
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"binary entropy argument {x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def phase_error_upper(e_b: float, n_s: int, alpha: float, xi_ph: float) -> float:
    """Upper bound on the phase-error rate of the sifted key.

    ``alpha * e_b + (1 + alpha) * sqrt((ln 4 - 2 ln xi_ph) / n_s)``,
    clamped to the physical maximum 0.5.
    """
    if n_s <= 0:
        raise DomainError("phase-error bound needs n_s > 0")
    if alpha < 1.0:
        raise DomainError("alpha must be >= 1")
    if not 0.0 < xi_ph < 1.0:
        raise DomainError("xi_ph must be in (0, 1)")
    if not 0.0 <= e_b <= 1.0:
        raise DomainError("e_b must be in [0, 1]")
    value = alpha * e_b + (1.0 + alpha) * math.sqrt(
        (math.log(4.0) - 2.0 * math.log(xi_ph)) / n_s
    )
    return min(value, 0.5)


def secure_key_length(n_s: int, e_b: float, e_p_u: float, f: float = 1.0) -> int:
    """Final key length n_s * (1 - H2(e_p^U) - f * H2(e_b)), floored at 0."""
    if n_s <= 0:
        return 0
    raw = n_s * (1.0 - binary_entropy(min(e_p_u, 0.5)) - f * binary_entropy(e_b))
    return max(0, math.floor(raw))


def delta_azuma(n: int, epsilon: float) -> float:
    """Concentration (Azuma) deviation term sqrt(2 n ln(1/epsilon))."""
    if n < 0 or not 0.0 < epsilon < 1.0:
        raise DomainError("need n >= 0 and epsilon in (0, 1)")
    return math.sqrt(2.0 * n * math.log(1.0 / epsilon))


def secure_key_length_tagged(
    peaks: PeakCounts,
    n_err: int,
    alpha: float,
    epsilon: float,
    f: float = 1.0,
) -> TaggedKeyResult:
    """Tagged-bit key length from the +-2*Delta monitoring counts."""
    n_mid = peaks.n_mid
    n_2d = peaks.n_2d_plus + peaks.n_2d_minus
    n_total = n_mid + n_2d
    if n_total <= 0:
        raise DomainError("tagged bound needs n_mid + n_2d > 0")
    if alpha < 1.0:
        raise DomainError("alpha must be >= 1")

    delta = delta_azuma(n_total, epsilon)
    n00_lower = n_mid - n_2d - 2.0 * delta
    n_ph_upper = alpha * n_err + (1.0 + alpha) * delta
    e_b = n_err / n_mid if n_mid else 0.0

    if n00_lower <= 0.0:
        return TaggedKeyResult(
            delta=delta, n00_lower=n00_lower, n_ph_upper=n_ph_upper,
            e_p_u=0.5, n_f=0, clamped_at_zero=True,
        )
    e_p_u = min(n_ph_upper / n00_lower, 0.5)
    raw = n00_lower * (1.0 - binary_entropy(e_p_u)) - f * n_mid * binary_entropy(min(e_b, 1.0))
    n_f = max(0, math.floor(raw))
    return TaggedKeyResult(
        delta=delta, n00_lower=n00_lower, n_ph_upper=n_ph_upper,
        e_p_u=e_p_u, n_f=n_f, clamped_at_zero=(raw <= 0.0),
    )


def estimate_basis_bias(
    peaks: PeakCounts,
    tolerance: float | None = None,
) -> tuple[float, float, float]:
    """Infer (p_z_a, p_z_b, alpha) from the three-peak coincidence ratios.

    With normalized peak fractions l, m, r the model is l = a(1-b),
    m = a b + (1-a)(1-b), r = (1-a) b, giving a - b = l - r and the
    quadratic a^2 - (1 + l - r) a + l = 0.  Of the two mirror solutions
    (a, b) and (1-b, 1-a) the branch with a + b >= 1 is returned, so
    alpha = max(ab, (1-a)(1-b)) / min(...) >= 1 always holds.

    The discriminant equals m^2 - 4 l r and sits at exactly zero for
    unbiased data, so sampling noise drives it slightly negative about
    half the time; values within ``tolerance`` (default 5/sqrt(total))
    below zero are clamped to the unbiased solution.  Anything further
    below is impossible under the bias model and raises
    :exc:`Degenerate` (callers then fall back to a worst-case alpha).
    """
    total = peaks.total_three
    if total <= 0:
        raise DomainError("need at least one coincidence in the three peaks")
    l = peaks.n_left / total
    r = peaks.n_right / total
    s = l - r
    disc = (1.0 + s) ** 2 - 4.0 * l  # == m^2 - 4 l r
    if tolerance is None:
        tolerance = 5.0 / math.sqrt(total)
    if disc < -tolerance:
        raise Degenerate(
            f"peak ratios (L={l:.4f}, M={1 - l - r:.4f}, R={r:.4f}) admit no bias solution"
        )
    root = math.sqrt(max(disc, 0.0))
    a = min(max((1.0 + s + root) / 2.0, 1e-12), 1.0 - 1e-12)
    b = min(max(a - s, 1e-12), 1.0 - 1e-12)
    same = a * b
    cross = (1.0 - a) * (1.0 - b)
    alpha = max(same, cross) / max(min(same, cross), 1e-300)
    return a, b, max(alpha, 1.0)


def sift(coincidences, private_a, private_b) -> tuple[np.ndarray, np.ndarray]:
    """Raw key bits of both sides: the local detector id at each match."""
    det_a = np.asarray(getattr(private_a, "detectors", private_a))
    det_b = np.asarray(getattr(private_b, "detectors", private_b))
    ia, ib = coincidences.idx_a, coincidences.idx_b
    if ia.size != ib.size:
        raise IndexMismatch("coincidence index arrays differ in length")
    if ia.size and (ia.max() >= det_a.size or ib.max() >= det_b.size):
        raise IndexMismatch("coincidence indices exceed private stream length")
    return det_a[ia].astype(np.uint8), det_b[ib].astype(np.uint8)


def sampled_qber(
    bits_a: np.ndarray,
    bits_b: np.ndarray,
    fraction: float = 0.1,
    seed: int = 0,
) -> tuple[float, int]:
    """Protocol-style QBER estimate from a disclosed random subset.

    Returns (estimated e_b, number of disclosed bits); disclosed bits must
    be discarded from the key material by the caller.
    """
    n = bits_a.size
    k = max(1, int(round(n * fraction))) if n else 0
    if k == 0:
        return 0.0, 0
    rng = np.random.default_rng(seed)
    pick = rng.choice(n, size=k, replace=False)
    errs = int(np.count_nonzero(bits_a[pick] != bits_b[pick]))
    return errs / k, k


# --- full classical pipeline ------------------------------------------------

def _resolve_alpha(peaks: PeakCounts, alpha_mode, worst_case_alpha: float):
    if isinstance(alpha_mode, (int, float)):
        return 0.5, 0.5, float(alpha_mode)
    if alpha_mode == "worst_case":
        return 0.5, 0.5, worst_case_alpha
    if alpha_mode == "measured":
        try:
            return estimate_basis_bias(peaks)
        except (Degenerate, DomainError):
            return 0.5, 0.5, worst_case_alpha
    raise ValueError(f"unknown alpha_mode {alpha_mode!r}")


def _analyze_resource(
    ts_a, det_a, ts_b, det_b,
    offset: int, tau: int, delta_ps: int,
    params: SecurityParams, alpha_mode, worst_case_alpha: float,
    qber_mode: str, sample_fraction: float, sample_seed: int,
    resource_index: int,
) -> ResourceResult:
    # all five peak windows live within +-(2*delta + tau) of the offset, so
    # the matchings can run on the much smaller active zone
    ia_zone, ib_zone = correlate.extract_zone(ts_a, ts_b, offset, 2 * delta_ps + 2 * tau)
    za, zb = ts_a[ia_zone], ts_b[ib_zone]
    peaks = correlate.peak_counts(za, zb, offset, tau, delta_ps)
    mid = correlate.find_coincidences(za, zb, offset, tau)
    bits_a, bits_b = sift(mid, det_a[ia_zone], det_b[ib_zone])
    n_s = len(mid)
    p_z_a, p_z_b, alpha = _resolve_alpha(peaks, alpha_mode, worst_case_alpha)

    if qber_mode == "sampled" and n_s:
        e_b, disclosed = sampled_qber(bits_a, bits_b, sample_fraction, sample_seed)
        n_key = n_s - disclosed
        n_err = int(round(e_b * n_s))
    else:
        n_err = int(np.count_nonzero(bits_a != bits_b))
        e_b = n_err / n_s if n_s else 0.0
        n_key = n_s

    if n_key > 0:
        e_p_u = phase_error_upper(e_b, n_key, alpha, params.xi_ph)
        n_f_simple = secure_key_length(n_key, e_b, e_p_u, params.f)
    else:
        e_p_u = 0.5
        n_f_simple = 0
    try:
        tagged = secure_key_length_tagged(peaks, n_err, alpha, params.epsilon_effective, params.f)
    except DomainError:
        tagged = TaggedKeyResult(0.0, 0.0, 0.0, 0.5, 0, True)

    stats = LinkStats(n_s=n_s, n_err=n_err, peaks=peaks, p_z_a=p_z_a, p_z_b=p_z_b, alpha=alpha)
    return ResourceResult(
        resource_index=resource_index, offset_ps=offset, tau_c_ps=tau,
        stats=stats, e_p_u=e_p_u, n_f_simple=n_f_simple, tagged=tagged,
    )


def blockwise_report(
    streams: Mapping[int, TagStream],
    plan: NetworkPlan,
    block_s: float,
    params: SecurityParams | None = None,
    *,
    tau_c_ps: int | None = 130,
    tau_candidates_ps: Sequence[int] = DEFAULT_TAU_CANDIDATES,
    delta_ps: int = 3700,
    calibration: Mapping[int, tuple[int, int]] | None = None,
    alpha_mode="measured",
    worst_case_alpha: float = WORST_CASE_ALPHA,
    qber_mode: str = "exact",
    sample_fraction: float = 0.1,
    sample_seed: int = 0,
) -> list[SecureKeyReport]:
    """Run the whole classical pipeline per link per time block.

    ``tau_c_ps=None`` optimizes the window per link resource on the full
    run before splitting into blocks.  Premium links get one analysis per
    resource (independent QBERs); the report sums their sifted and secure
    key lengths.  Links whose histogram shows no usable peak yield zero
    reports flagged ``clamped_at_zero``.
    """
    if block_s <= 0:
        raise ValueError("block_s must be > 0")
    if params is None:
        params = SecurityParams()

    cal: dict[int, TagStream] = {}
    for user, stream in streams.items():
        delays = calibration.get(user, (0, 0)) if calibration else (0, 0)
        cal[user] = calibrate_tags(stream, delays)

    duration_ps = max((s.duration_ps for s in cal.values()), default=0)
    block_ps = int(round(block_s * 1e12))
    n_blocks = max(1, math.ceil(duration_ps / block_ps)) if duration_ps else 1

    reports: list[SecureKeyReport] = []
    for u, v in plan.links():
        sa, sb = cal[u], cal[v]
        resources = plan.resources(u, v)
        try:
            offsets = correlate.calibrate_offsets(
                sa.timestamps, sb.timestamps, n_peaks=len(resources), delta_ps=delta_ps
            )
        except NoPeakFound:
            offsets = []

        taus: list[int] = []
        for offset in offsets:
            if tau_c_ps is not None:
                taus.append(int(tau_c_ps))
            else:
                tau, _ = correlate.optimize_window(
                    sa.timestamps, sb.timestamps, sa.detectors, sb.detectors,
                    offset, tau_candidates_ps, delta_ps=delta_ps, security=params,
                )
                taus.append(tau)

        for b_index in range(n_blocks):
            t0 = b_index * block_ps
            t1 = min((b_index + 1) * block_ps, duration_ps) if duration_ps else block_ps
            lo_a, hi_a = np.searchsorted(sa.timestamps, (t0, t1))
            lo_b, hi_b = np.searchsorted(sb.timestamps, (t0, t1))
            ts_a, det_a = sa.timestamps[lo_a:hi_a], sa.detectors[lo_a:hi_a]
            ts_b, det_b = sb.timestamps[lo_b:hi_b], sb.detectors[lo_b:hi_b]

            per_resource = tuple(
                _analyze_resource(
                    ts_a, det_a, ts_b, det_b, offset, tau, delta_ps,
                    params, alpha_mode, worst_case_alpha,
                    qber_mode, sample_fraction, sample_seed + b_index,
                    resource_index=r_i,
                )
                for r_i, (offset, tau) in enumerate(zip(offsets, taus))
            )
            reports.append(
                _link_report(u, v, b_index, t0, t1 - t0, per_resource)
            )
    return reports


def _link_report(u, v, block_index, start_ps, len_ps, per_resource) -> SecureKeyReport:
    n_s = sum(r.stats.n_s for r in per_resource)
    n_err = sum(r.stats.n_err for r in per_resource)
    n_f_simple = sum(r.n_f_simple for r in per_resource)
    n_f_tagged = sum(r.tagged.n_f for r in per_resource)
    len_s = len_ps / 1e12 if len_ps else 0.0
    if n_s:
        e_p_u = sum(r.e_p_u * r.stats.n_s for r in per_resource) / n_s
    else:
        e_p_u = 0.5
    clamped = (not per_resource) or any(
        r.n_f_simple == 0 or r.tagged.clamped_at_zero for r in per_resource
    )
    return SecureKeyReport(
        link=(u, v),
        block_index=block_index,
        block_start_s=start_ps / 1e12,
        block_len_s=len_s,
        n_s=n_s,
        n_err=n_err,
        e_b=(n_err / n_s) if n_s else 0.0,
        alpha=max((r.stats.alpha for r in per_resource), default=1.0),
        e_p_u=e_p_u,
        n_f_simple=n_f_simple,
        n_f_tagged=n_f_tagged,
        rate_bps=(n_f_simple / len_s) if len_s else 0.0,
        clamped_at_zero=clamped,
        per_resource=per_resource,
    )


def aggregate_reports(reports: Sequence[SecureKeyReport]) -> dict[tuple[int, int], dict]:
    """Cumulative per-link totals over all blocks (Table-style layout)."""
    totals: dict[tuple[int, int], dict] = {}
    for rep in reports:
        agg = totals.setdefault(
            rep.link,
            {"n_s": 0, "n_err": 0, "n_f_simple": 0, "n_f_tagged": 0, "seconds": 0.0},
        )
        agg["n_s"] += rep.n_s
        agg["n_err"] += rep.n_err
        agg["n_f_simple"] += rep.n_f_simple
        agg["n_f_tagged"] += rep.n_f_tagged
        agg["seconds"] += rep.block_len_s
    for agg in totals.values():
        agg["e_b"] = agg["n_err"] / agg["n_s"] if agg["n_s"] else 0.0
        agg["rate_bps"] = agg["n_f_simple"] / agg["seconds"] if agg["seconds"] else 0.0
    return totals


def write_key_report_csv(reports: Sequence[SecureKeyReport], path: str | Path) -> None:
    """Key report CSV; premium links carry per-resource QBER columns 0/1."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "link", "block_index", "n_s", "e_b", "alpha", "e_p_u",
                "n_f_simple", "n_f_tagged", "rate_bps", "e_b_0", "e_b_1",
            ]
        )
        for rep in reports:
            per = rep.per_resource
            writer.writerow(
                [
                    f"{rep.link[0]}-{rep.link[1]}",
                    rep.block_index,
                    rep.n_s,
                    f"{rep.e_b:.6f}",
                    f"{rep.alpha:.4f}",
                    f"{rep.e_p_u:.6f}",
                    rep.n_f_simple,
                    rep.n_f_tagged,
                    f"{rep.rate_bps:.3f}",
                    f"{per[0].stats.e_b:.6f}" if len(per) > 0 else "",
                    f"{per[1].stats.e_b:.6f}" if len(per) > 1 else "",
                ]
            )
        for link, agg in sorted(aggregate_reports(reports).items()):
            writer.writerow(
                [
                    f"{link[0]}-{link[1]}",
                    "total",
                    agg["n_s"],
                    f"{agg['e_b']:.6f}",
                    "",
                    "",
                    agg["n_f_simple"],
                    agg["n_f_tagged"],
                    f"{agg['rate_bps']:.3f}",
                    "",
                    "",
                ]
            )
