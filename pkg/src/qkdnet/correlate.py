"""Cross-correlation, delay calibration and coincidence finding.

All operations work on the *merged* (timestamp-only) streams two users
exchange publicly.  The sign convention throughout is
``d = t_a - t_b - offset - peak_offset``: a positive calibrated offset
means stream a runs late relative to stream b.  A pair of tags is a
coincidence when ``d`` lies in the half-open window
``[-tau_c/2, +tau_c/2)``; the boundary is evaluated in exact integer
arithmetic on doubled timestamps, so a pair exactly ``tau_c/2`` apart on
the upper edge is excluded.

Because the receiver delays the long (DA-basis) path by Delta, an honest
link shows three peaks at ``-Delta, 0, +Delta`` (mixed/matched bases) in
its correlation histogram; counts at ``+-2*Delta`` are accidental-level
and feed the tagged-bit security bound.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tagio import UnsortedInput

__all__ = [
    "ZeroBinWidth",
    "NoPeakFound",
    "CorrelationHistogram",
    "CoincidenceSet",
    "PeakCounts",
    "cross_correlation",
    "calibrate_offset",
    "calibrate_offsets",
    "find_coincidences",
    "peak_counts",
    "optimize_window",
    "histogram_to_csv",
]

_PAIR_BUDGET = 8_000_000  # cap on histogram pair expansions per pass


class ZeroBinWidth(ValueError):
    """Histogram bin width / coincidence window must be positive."""


class NoPeakFound(RuntimeError):
    """Correlation histogram has no peak standing out of the background."""


@dataclass
class CorrelationHistogram:
    """Binned counts of t_a - t_b - center over [-half_range, +half_range)."""

    bin_width_ps: int
    center_offset_ps: int
    half_range_ps: int
    counts: np.ndarray

    def bin_centers(self) -> np.ndarray:
        n = self.counts.size
        left = self.center_offset_ps - self.half_range_ps
        return left + self.bin_width_ps * np.arange(n) + self.bin_width_ps // 2

    def argmax_offset(self) -> int:
        return int(self.bin_centers()[int(np.argmax(self.counts))])


@dataclass
class CoincidenceSet:
    """One-to-one matched tag indices between two streams."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    tau_c_ps: int
    offset_ps: int
    peak_offset_ps: int = 0

    def __len__(self) -> int:
        return int(self.idx_a.size)


@dataclass(frozen=True)
class PeakCounts:
    """Coincidence counts at the five receiver offsets used by the analysis."""

    n_left: int      # -Delta
    n_mid: int       # 0 (same basis: the sifted events)
    n_right: int     # +Delta
    n_2d_minus: int  # -2*Delta
    n_2d_plus: int   # +2*Delta

    @property
    def total_three(self) -> int:
        return self.n_left + self.n_mid + self.n_right


def _timestamps(stream) -> np.ndarray:
    t = np.asarray(getattr(stream, "timestamps", stream), dtype=np.int64)
    if t.ndim != 1:
        raise ValueError("expected a 1-d timestamp array")
    if t.size and np.any(np.diff(t) < 0):
        raise UnsortedInput("timestamps must be sorted")
    return t


def _flat_ranges(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flatten per-element index ranges [lo_i, hi_i) into one index vector."""
    counts = hi - lo
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), counts
    cs = np.cumsum(counts)
    offsets = np.arange(total, dtype=np.int64) - np.repeat(cs - counts, counts)
    return np.repeat(lo, counts) + offsets, counts


def cross_correlation(
    a,
    b,
    bin_width_ps: int,
    half_range_ps: int,
    center_offset_ps: int = 0,
    *,
    max_a_tags: int | None = None,
) -> CorrelationHistogram:
    """Histogram of t_a - t_b - center over [-half_range, +half_range).

    Sorted two-pointer sweep, O(N * W) with W the mean number of b-tags per
    window.  ``max_a_tags`` limits the a-side sample (contiguous prefix) for
    cheap calibration passes.
    """
    ta = _timestamps(a)
    tb = _timestamps(b)
    if bin_width_ps <= 0:
        raise ZeroBinWidth("bin width must be positive")
    if half_range_ps <= 0:
        raise ZeroBinWidth("half range must be positive")
    if max_a_tags is not None:
        ta = ta[:max_a_tags]

    n_bins = int(np.ceil(2 * half_range_ps / bin_width_ps))
    hist = np.zeros(n_bins, dtype=np.int64)
    chunk = 1 << 18
    for lo_i in range(0, ta.size, chunk):
        tc = ta[lo_i:lo_i + chunk]
        # d in [-half, half)  <=>  tb in (tc - center - half, tc - center + half]
        lo = np.searchsorted(tb, tc - center_offset_ps - half_range_ps, side="right")
        hi = np.searchsorted(tb, tc - center_offset_ps + half_range_ps, side="right")
        flat, counts = _flat_ranges(lo, hi)
        if flat.size == 0:
            continue
        d = np.repeat(tc, counts) - tb[flat] - center_offset_ps
        hist += np.bincount((d + half_range_ps) // bin_width_ps, minlength=n_bins)[:n_bins]
    return CorrelationHistogram(
        bin_width_ps=int(bin_width_ps),
        center_offset_ps=int(center_offset_ps),
        half_range_ps=int(half_range_ps),
        counts=hist,
    )


def _box_smooth(counts: np.ndarray, width_bins: int) -> np.ndarray:
    if width_bins <= 1:
        return counts.astype(np.float64)
    kernel = np.ones(width_bins)
    return np.convolve(counts, kernel, mode="same")


def calibrate_offsets(
    a,
    b,
    *,
    n_peaks: int = 1,
    delta_ps: int = 3700,
    coarse_bin_ps: int = 1000,
    coarse_half_range_ps: int = 100_000_000,
    fine_bin_ps: int = 10,
    tau_hint_ps: int = 200,
    min_peak_ratio: float = 8.0,
) -> list[int]:
    """Locate the middle-peak offsets of up to ``n_peaks`` resources.

    Two-stage search: a coarse histogram over the full delay range finds
    candidate regions, then a fine pass around each candidate picks the
    offset whose histogram shows companion peaks at +-Delta (which only the
    middle, same-basis peak has).  Offsets are returned strongest first.

    Raises :exc:`NoPeakFound` when nothing clears ``min_peak_ratio`` times
    the background.
    """
    ta = _timestamps(a)
    tb = _timestamps(b)
    if ta.size == 0 or tb.size == 0:
        raise NoPeakFound("empty stream")

    span_b = max(int(tb[-1] - tb[0]), 1)
    pairs_per_tag = max(tb.size * (2.0 * coarse_half_range_ps) / span_b, 1.0)
    max_a = max(2000, int(_PAIR_BUDGET / pairs_per_tag))

    coarse = cross_correlation(
        ta, tb, coarse_bin_ps, coarse_half_range_ps, max_a_tags=max_a
    )
    counts = coarse.counts
    background = float(np.median(counts))
    floor = max(background * min_peak_ratio, background + 6.0 * np.sqrt(background + 1.0), 4.0)
    if counts.max() < floor:
        raise NoPeakFound(
            f"no correlation peak: max {counts.max()} vs background {background:.1f}"
        )

    # candidate regions, strongest first, separated by more than one
    # three-peak cluster so one resource yields one candidate
    guard = 2 * delta_ps + 4 * tau_hint_ps + 4 * coarse_bin_ps
    order = np.argsort(counts)[::-1]
    centers = coarse.bin_centers()
    candidates: list[int] = []
    for j in order:
        if counts[j] < floor:
            break
        c = int(centers[j])
        if all(abs(c - prev) > guard for prev in candidates):
            candidates.append(c)
        if len(candidates) >= n_peaks:
            break

    offsets: list[tuple[int, int]] = []
    fine_half = 2 * delta_ps + 8 * tau_hint_ps + 2 * coarse_bin_ps
    fine_max_a = 1_500_000  # searchsorted cost cap; plenty for peak location
    for c in candidates:
        fine = cross_correlation(
            ta, tb, fine_bin_ps, fine_half, center_offset_ps=c, max_a_tags=fine_max_a
        )
        smooth = _box_smooth(fine.counts, max(3, int(round(tau_hint_ps / fine_bin_ps))))
        shift = int(round(delta_ps / fine_bin_ps))
        if shift == 0 or shift >= smooth.size:
            best = int(np.argmax(smooth))
        else:
            companions = np.minimum(np.roll(smooth, shift), np.roll(smooth, -shift))
            companions[:shift] = 0
            companions[-shift:] = 0
            best = int(np.argmax(companions + 1e-3 * smooth))
        offsets.append((int(fine.counts[best]), int(fine.bin_centers()[best])))

    if not offsets:
        raise NoPeakFound("no candidate region cleared the background")
    offsets.sort(key=lambda t: (-t[0], t[1]))
    return [off for _, off in offsets]


def calibrate_offset(a, b, **kwargs) -> int:
    """Offset that centers the (strongest) middle peak at zero."""
    return calibrate_offsets(a, b, n_peaks=1, **kwargs)[0]


def extract_zone(
    a,
    b,
    offset_ps: int,
    half_window_ps: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Indices of tags with any counterpart within ``+-half_window`` of the offset.

    Tags outside the zone are isolated in every coincidence window that fits
    inside it, so greedy matching restricted to the zone equals matching on
    the full streams.  Used to keep repeated peak matchings cheap on large
    streams.
    """
    ta = _timestamps(a)
    tb = _timestamps(b)
    lo = np.searchsorted(tb, ta - offset_ps - half_window_ps, side="left")
    hi = np.searchsorted(tb, ta - offset_ps + half_window_ps, side="right")
    ia = np.flatnonzero(hi > lo)
    delta = np.zeros(tb.size + 1, dtype=np.int32)
    np.add.at(delta, lo[ia], 1)
    np.add.at(delta, hi[ia], -1)
    ib = np.flatnonzero(np.cumsum(delta)[:-1] > 0)
    return ia, ib


def find_coincidences(
    a,
    b,
    offset_ps: int,
    tau_c_ps: int,
    peak_offset_ps: int = 0,
) -> CoincidenceSet:
    """Greedy earliest-first one-to-one matching inside the window.

    Equivalent to scanning stream a in order and pairing each tag with the
    earliest not-yet-used b-tag satisfying
    ``-tau_c/2 <= t_a - t_b - offset - peak_offset < tau_c/2``.
    Vectorized: uncontested matches are resolved in bulk and only windows
    where tags actually compete fall back to an explicit scan.
    """
    ta = _timestamps(a)
    tb = _timestamps(b)
    if tau_c_ps <= 0:
        raise ZeroBinWidth("coincidence window must be positive")
    shift = int(offset_ps) + int(peak_offset_ps)
    if ta.size == 0 or tb.size == 0:
        return CoincidenceSet(
            np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
            int(tau_c_ps), int(offset_ps), int(peak_offset_ps),
        )

    # doubled integers keep tau/2 exact: 2*tb in (2(ta-shift)-tau, 2(ta-shift)+tau]
    a2 = 2 * (ta - shift)
    b2 = 2 * tb
    lo = np.searchsorted(b2, a2 - tau_c_ps, side="right")
    hi = np.searchsorted(b2, a2 + tau_c_ps, side="right")
    cand = hi - lo

    claim_delta = np.zeros(tb.size + 1, dtype=np.int64)
    has = cand > 0
    np.add.at(claim_delta, lo[has], 1)
    np.add.at(claim_delta, hi[has], -1)
    claims = np.cumsum(claim_delta)[:-1]

    single = cand == 1
    contested_b = claims > 1
    easy = single & ~contested_b[np.minimum(lo, tb.size - 1)]
    ia = np.flatnonzero(easy)
    jb = lo[easy]

    hard = np.flatnonzero(has & ~easy)
    if hard.size:
        used = set(jb.tolist())
        extra_a: list[int] = []
        extra_b: list[int] = []
        lo_l, hi_l = lo.tolist(), hi.tolist()
        for i in hard.tolist():
            for j in range(lo_l[i], hi_l[i]):
                if j not in used:
                    used.add(j)
                    extra_a.append(i)
                    extra_b.append(j)
                    break
        if extra_a:
            ia = np.concatenate([ia, np.asarray(extra_a, dtype=np.int64)])
            jb = np.concatenate([jb, np.asarray(extra_b, dtype=np.int64)])
            order = np.argsort(ia, kind="stable")
            ia, jb = ia[order], jb[order]

    return CoincidenceSet(ia, jb, int(tau_c_ps), int(offset_ps), int(peak_offset_ps))


def peak_counts(
    a,
    b,
    offset_ps: int,
    tau_c_ps: int,
    delta_ps: int = 3700,
) -> PeakCounts:
    """Coincidence counts at receiver offsets {-2D, -D, 0, +D, +2D}."""
    at = {
        off: len(find_coincidences(a, b, offset_ps, tau_c_ps, peak_offset_ps=off))
        for off in (-2 * delta_ps, -delta_ps, 0, delta_ps, 2 * delta_ps)
    }
    return PeakCounts(
        n_left=at[-delta_ps],
        n_mid=at[0],
        n_right=at[delta_ps],
        n_2d_minus=at[-2 * delta_ps],
        n_2d_plus=at[2 * delta_ps],
    )


def optimize_window(
    a,
    b,
    detectors_a: np.ndarray,
    detectors_b: np.ndarray,
    offset_ps: int,
    candidate_taus_ps: Sequence[int],
    *,
    delta_ps: int = 3700,
    security=None,
    alpha: float | None = None,
) -> tuple[int, int]:
    """Pick the window maximizing the finite secure-key length.

    Runs the sift + key-length pipeline for each candidate and returns
    ``(tau_c_ps, key_length)``; ties go to the smaller window.  ``alpha``
    fixes the basis-bias factor, otherwise it is estimated from the peak
    counts per candidate.
    """
    from . import distill  # late import: distill drives this via blockwise reports

    if not candidate_taus_ps:
        raise ValueError("candidate_taus_ps must be non-empty")
    if security is None:
        security = distill.SecurityParams()

    taus = sorted(int(t) for t in candidate_taus_ps)
    if alpha is None:
        # the basis bias is a hardware property: estimate it once, at the
        # widest window (best statistics), instead of per candidate
        try:
            _, _, alpha = distill.estimate_basis_bias(
                peak_counts(a, b, offset_ps, taus[-1], delta_ps)
            )
        except (distill.Degenerate, distill.DomainError):
            alpha = 1.0

    best_tau = taus[0]
    best_len = -1
    for tau in taus:
        mid = find_coincidences(a, b, offset_ps, tau)
        if len(mid) == 0:
            n_f = 0
        else:
            bits_a, bits_b = distill.sift(mid, detectors_a, detectors_b)
            n_err = int(np.count_nonzero(bits_a != bits_b))
            e_b = n_err / len(mid)
            e_p = distill.phase_error_upper(e_b, len(mid), alpha, security.xi_ph)
            n_f = distill.secure_key_length(len(mid), e_b, e_p, security.f)
        if n_f > best_len:
            best_len = n_f
            best_tau = tau
    return best_tau, max(best_len, 0)


def histogram_to_csv(hist: CorrelationHistogram, path: str | Path) -> None:
    """Write (offset_ps, count) rows for external plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["offset_ps", "count"])
        for off, cnt in zip(hist.bin_centers(), hist.counts):
            writer.writerow([int(off), int(cnt)])
