"""Shared fixtures and independent reference implementations."""
from __future__ import annotations

import bisect

import numpy as np
import pytest

from qkdnet import photonsim as P
from qkdnet import topology as T


def match_bruteforce(ta, tb, offset_ps, tau_c_ps, peak_offset_ps=0):
    """Reference matcher, independent of the production implementation.

    Walks stream a in order and pairs each tag with the earliest unused
    b-tag satisfying -tau/2 <= t_a - t_b - offset - peak < tau/2 (upper
    edge open), scanning candidates linearly with a used-flag array.
    """
    shift = int(offset_ps) + int(peak_offset_ps)
    tau = int(tau_c_ps)
    tb2 = [2 * int(x) for x in tb]
    used = [False] * len(tb2)
    pairs = []
    for i, t in enumerate(ta):
        base = 2 * (int(t) - shift)
        j = bisect.bisect_right(tb2, base - tau)
        while j < len(tb2) and tb2[j] <= base + tau:
            if not used[j]:
                used[j] = True
                pairs.append((i, j))
                break
            j += 1
    return pairs


def make_station(user_id, *, loss_db=0.0, length_m=0.0, e_pol=0.0, split=0.5,
                 delta_ps=3700, efficiency=1.0, jitter_fwhm_ps=0.0,
                 dark_rate_hz=0.0, dead_time_ps=0, delay_ps=(0, 0)):
    det = tuple(
        P.DetectorConfig(
            efficiency=efficiency, jitter_fwhm_ps=jitter_fwhm_ps,
            dark_rate_hz=dark_rate_hz, dead_time_ps=dead_time_ps, delay_ps=delay_ps[d],
        )
        for d in (0, 1)
    )
    return P.StationConfig(
        user_id=user_id, fiber_loss_db=loss_db, fiber_length_m=length_m,
        pam_transmit_fraction=split, pam_delta_ps=delta_ps,
        polarization_error=e_pol, detectors=det,
    )


@pytest.fixture(scope="session")
def pair_plan():
    """Two users, one channel pair, no beamsplitters."""
    return T.plan_network(2, 1)


@pytest.fixture(scope="session")
def eight_user_plan():
    return T.plan_network(8, 2)


def random_sorted_stream(rng, n, t_max):
    return np.sort(rng.integers(0, t_max, size=n).astype(np.int64))


def single_interior_maximum(values):
    """Strict rise to one interior peak, strict fall after (a zero-clamped
    tail counts as fallen, not as a second extremum)."""
    values = list(values)
    i = max(range(len(values)), key=values.__getitem__)
    if not 0 < i < len(values) - 1:
        return False
    if not all(x < y for x, y in zip(values[:i], values[1:i + 1])):
        return False
    prev = values[i]
    for y in values[i + 1:]:
        if not (y < prev or (y == 0 and prev == 0)):
            return False
        prev = y
    return True
