from __future__ import annotations

import math

import numpy as np
import pytest

from qkdnet import correlate as C
from qkdnet import photonsim as P
from qkdnet import ratemodel as R
from qkdnet import topology as T

from conftest import make_station, single_interior_maximum


def within_poisson(count, expected_rate, duration, n_sigma=3.0):
    lam = expected_rate * duration
    return abs(count - lam) <= n_sigma * math.sqrt(max(lam, 1.0))


class TestPredictSingles:
    def test_matches_simulation_per_detector(self, pair_plan):
        src = P.SourceConfig(pair_rate_hz=2e5, heralding_efficiency=0.7)
        stations = {
            0: make_station(0, loss_db=2.0, efficiency=0.8, dark_rate_hz=1500),
            1: make_station(1, loss_db=5.0, efficiency=0.6, dark_rate_hz=300),
        }
        duration = 5.0
        streams = P.simulate_network(pair_plan, src, stations, duration, seed=50)
        for u in (0, 1):
            s0, s1 = R.predict_singles(pair_plan, src, stations, u)
            got0 = int(np.count_nonzero(streams[u].detectors == 0))
            got1 = int(np.count_nonzero(streams[u].detectors == 1))
            assert within_poisson(got0, s0, duration)
            assert within_poisson(got1, s1, duration)

    def test_asymmetric_detectors(self, pair_plan):
        det_a = (P.DetectorConfig(efficiency=0.2), P.DetectorConfig(efficiency=0.9))
        stations = {
            0: P.StationConfig(user_id=0, detectors=det_a),
            1: make_station(1, efficiency=0.5),
        }
        src = P.SourceConfig(pair_rate_hz=1e5)
        duration = 5.0
        streams = P.simulate_network(pair_plan, src, stations, duration, seed=51)
        s0, s1 = R.predict_singles(pair_plan, src, stations, 0)
        assert s0 == pytest.approx(1e5 * 0.5 * 0.2)
        assert s1 == pytest.approx(1e5 * 0.5 * 0.9)
        got0 = int(np.count_nonzero(streams[0].detectors == 0))
        got1 = int(np.count_nonzero(streams[0].detectors == 1))
        assert within_poisson(got0, s0, duration)
        assert within_poisson(got1, s1, duration)

    def test_eight_user_channel_count_drives_singles(self, eight_user_plan):
        src = P.SourceConfig(pair_rate_hz=1e5, heralding_efficiency=0.5)
        stations = {u: make_station(u, efficiency=0.8) for u in range(8)}
        s0, s1 = R.predict_singles(eight_user_plan, src, stations, 0)
        # 4 channels, each split across 2 subnets: arrival 4 * rate/2 * her
        assert s0 + s1 == pytest.approx(4 * 1e5 * 0.5 * 0.5 * 0.8)


class TestPredictLink:
    def _pair_setup(self, **kw):
        plan = T.plan_network(2, 1)
        src = P.SourceConfig(
            pair_rate_hz=kw.pop("rate", 1e5),
            heralding_efficiency=kw.pop("heralding", 0.8),
        )
        st0 = kw.pop("station0", {})
        st1 = kw.pop("station1", {})
        stations = {0: make_station(0, **st0), 1: make_station(1, **st1)}
        return plan, src, stations

    def test_true_coincidences_match_simulation(self):
        plan, src, stations = self._pair_setup(
            station0=dict(loss_db=3.0, efficiency=0.85, jitter_fwhm_ps=80),
            station1=dict(loss_db=1.0, efficiency=0.7, jitter_fwhm_ps=60),
        )
        duration = 5.0
        pred = R.predict_link(plan, src, stations, (0, 1), 250)
        streams = P.simulate_network(plan, src, stations, duration, seed=52)
        a_ids = streams[0].pair_id[streams[0].pair_id >= 0]
        b_ids = streams[1].pair_id[streams[1].pair_id >= 0]
        got = np.intersect1d(a_ids, b_ids).size
        assert within_poisson(got, pred.true_coinc_hz, duration)

    def test_true_coincidences_with_asymmetric_detectors(self):
        # detector-dependent efficiencies correlate with the shared bit;
        # the prediction enumerates the pairing exactly
        plan = T.plan_network(2, 1)
        src = P.SourceConfig(pair_rate_hz=2e5)
        stations = {
            0: P.StationConfig(
                user_id=0, polarization_error=0.05,
                detectors=(P.DetectorConfig(efficiency=0.2), P.DetectorConfig(efficiency=0.9)),
            ),
            1: P.StationConfig(
                user_id=1,
                detectors=(P.DetectorConfig(efficiency=0.8), P.DetectorConfig(efficiency=0.3)),
            ),
        }
        duration = 5.0
        pred = R.predict_link(plan, src, stations, (0, 1), 200)
        streams = P.simulate_network(plan, src, stations, duration, seed=53)
        a_ids = streams[0].pair_id[streams[0].pair_id >= 0]
        b_ids = streams[1].pair_id[streams[1].pair_id >= 0]
        got = np.intersect1d(a_ids, b_ids).size
        assert within_poisson(got, pred.true_coinc_hz, duration)

    def test_accidentals_match_displaced_windows(self):
        plan, src, stations = self._pair_setup(
            rate=2e5,
            station0=dict(dark_rate_hz=2e4, jitter_fwhm_ps=70),
            station1=dict(dark_rate_hz=2e4, jitter_fwhm_ps=70),
        )
        duration = 10.0
        tau = 300
        pred = R.predict_link(plan, src, stations, (0, 1), tau)
        streams = P.simulate_network(plan, src, stations, duration, seed=54)
        a, b = streams[0].timestamps, streams[1].timestamps
        # windows far from the three true peaks sample pure accidentals
        count = 0
        offsets = (2 * 3700, -2 * 3700, 3 * 3700, -3 * 3700)
        for off in offsets:
            count += len(C.find_coincidences(a, b, 0, tau, peak_offset_ps=off))
        assert within_poisson(count, len(offsets) * pred.accidental_hz, duration)

    def test_qber_prediction_matches_simulation(self):
        plan, src, stations = self._pair_setup(
            rate=2e5,
            station0=dict(e_pol=0.03, jitter_fwhm_ps=70, dark_rate_hz=5e3),
            station1=dict(e_pol=0.02, jitter_fwhm_ps=70, dark_rate_hz=5e3),
        )
        duration = 4.0
        tau = 300
        pred = R.predict_link(plan, src, stations, (0, 1), tau)
        streams = P.simulate_network(plan, src, stations, duration, seed=55)
        a, b = streams[0], streams[1]
        mid = C.find_coincidences(a.timestamps, b.timestamps, 0, tau)
        errs = int(np.count_nonzero(a.detectors[mid.idx_a] != b.detectors[mid.idx_b]))
        e_got = errs / len(mid)
        sigma = math.sqrt(pred.e_b_pred * (1 - pred.e_b_pred) / len(mid))
        assert abs(e_got - pred.e_b_pred) < 3 * sigma
        # and the sifted rate itself
        assert within_poisson(len(mid), pred.sifted_hz, duration)

    def test_noiseless_link_keeps_everything(self):
        plan, src, stations = self._pair_setup()
        pred = R.predict_link(plan, src, stations, (0, 1), 200)
        assert pred.e_b_pred < 1e-4
        assert pred.key_rate_bps == pytest.approx(pred.sifted_hz, rel=2e-3)

    def test_source_off_gives_pure_noise(self):
        plan, src, stations = self._pair_setup(
            rate=0.0,
            station0=dict(dark_rate_hz=1e3),
            station1=dict(dark_rate_hz=1e3),
        )
        pred = R.predict_link(plan, src, stations, (0, 1), 200)
        assert pred.true_coinc_hz == 0.0
        assert pred.e_b_pred == pytest.approx(0.5)
        assert pred.key_rate_bps == 0.0

    def test_window_efficiency_formula(self):
        plan, src, stations = self._pair_setup(
            station0=dict(jitter_fwhm_ps=100), station1=dict(jitter_fwhm_ps=100),
        )
        tau = 130
        pred = R.predict_link(plan, src, stations, (0, 1), tau)
        sigma_ab = math.hypot(100 / 2.3548200450309493, 100 / 2.3548200450309493)
        assert pred.window_efficiency == pytest.approx(
            math.erf(tau / (2 * math.sqrt(2) * sigma_ab))
        )

    def test_accidental_linear_in_tau_quadratic_in_pump(self):
        plan, _, stations = self._pair_setup(
            station0=dict(dark_rate_hz=0.0), station1=dict(dark_rate_hz=0.0),
        )
        def acc(scale, tau):
            src = P.SourceConfig(pair_rate_hz=1e5, pump_scale=scale, heralding_efficiency=0.8)
            return R.predict_link(plan, src, stations, (0, 1), tau).accidental_hz

        assert acc(1.0, 400) == pytest.approx(2 * acc(1.0, 200))
        assert acc(2.0, 200) == pytest.approx(4 * acc(1.0, 200))
        assert acc(3.0, 300) == pytest.approx(9 * 1.5 * acc(1.0, 200))

    def test_extra_splitter_halves_true_rate(self):
        plan, src, stations = self._pair_setup()
        stations[2] = make_station(2)
        base = R.predict_link(plan, src, stations, (0, 1), 200)
        split_routing = T.Routing(
            pair=plan.routings[0].pair,
            plus_recipients=(0, 2),  # extra 2-fold splitter on the plus side
            minus_recipients=(1,),
            split_fraction=0.5,
        )
        split_plan = T.NetworkPlan(
            n_users=3, k_subnets=1, routings=(split_routing,),
            link_map={(0, 1): ((0, 0.5),), (0, 2): ((0, 0.5),), (1, 2): ((0, 0.5),)},
            premium_links=frozenset(),
        )
        halved = R.predict_link(split_plan, src, stations, (0, 1), 200)
        assert halved.true_coinc_hz == pytest.approx(base.true_coinc_hz / 2)

    def test_dead_time_correction_applied(self):
        plan, src, stations = self._pair_setup(
            station0=dict(dark_rate_hz=1e5, dead_time_ps=1_000_000),
        )
        s0, _ = R.predict_singles(plan, src, stations, 0)
        raw = 1e5 * 0.8 * 0.5 + 1e5
        assert s0 == pytest.approx(raw / (1 + raw * 1e-6))


class TestSweepPump:
    def _setup(self, dark=1000.0, e_pol=0.02, n=2):
        if n == 2:
            plan = T.plan_network(2, 1)
        else:
            plan = T.plan_network(n, 2)
        src = P.SourceConfig(pair_rate_hz=5e4, heralding_efficiency=0.8)
        stations = {
            u: make_station(u, loss_db=3.0, efficiency=0.85, jitter_fwhm_ps=70,
                            dark_rate_hz=dark, e_pol=e_pol)
            for u in plan.users
        }
        return plan, src, stations

    def test_interior_maximum_with_noise(self):
        plan, src, stations = self._setup()
        scales = list(np.geomspace(1.0, 1e4, 12))
        rows = R.sweep_pump(plan, src, stations, scales, 400)
        total = [r["key_rate_bps"] for r in rows if r["link"] == "total"]
        assert single_interior_maximum(total)

    def test_noiseless_short_window_monotone(self):
        plan, src, stations = self._setup(dark=0.0, e_pol=0.0)
        scales = list(np.geomspace(0.1, 10.0, 8))
        rows = R.sweep_pump(plan, src, stations, scales, 2)
        total = [r["key_rate_bps"] for r in rows if r["link"] == "total"]
        assert all(x < y for x, y in zip(total, total[1:]))

    def test_excessive_pump_kills_key(self):
        plan, src, stations = self._setup()
        rows = R.sweep_pump(plan, src, stations, [1.0, 1e5], 300)
        total = [r["key_rate_bps"] for r in rows if r["link"] == "total"]
        assert total[0] > 0.0
        assert total[-1] == 0.0

    def test_rejects_bad_grid(self):
        plan, src, stations = self._setup()
        with pytest.raises(ValueError):
            R.sweep_pump(plan, src, stations, [2.0, 1.0], 300)


@pytest.fixture(scope="module")
def _scal_rows():
    return R.sweep_scalability(list(np.linspace(0.0, 12.0, 7)))


class TestSweepScalability:
    @pytest.fixture()
    def rows(self, _scal_rows):
        return _scal_rows

    def test_monotone_in_loss(self, rows):
        for family in {r["family"] for r in rows}:
            curve = [r["key_rate_bps"] for r in rows if r["family"] == family]
            assert all(x >= y for x, y in zip(curve, curve[1:])), family

    def test_sqrt_n_family_below_two_subnets(self, rows):
        at_zero = {r["family"]: r["key_rate_bps"] for r in rows if r["x"] == 0.0}
        assert at_zero["16u4s"] < at_zero["16u2s"]

    def test_thirtytwo_users_positive_at_low_loss(self, rows):
        at_zero = {r["family"]: r["key_rate_bps"] for r in rows if r["x"] == 0.0}
        assert at_zero["32u2s"] > 0.0

    def test_styles(self, rows):
        styles = {r["family"]: r["style"] for r in rows}
        assert styles["8u2s"] == "solid" and styles["16u2s"] == "solid"
        assert styles["16u4s"] == "dashed" and styles["49u7s"] == "dashed"

    def test_reference_link_not_premium(self, rows):
        plan = T.plan_network(16, 4)
        link = next(l for l in plan.links() if l not in plan.premium_links)
        family_links = {r["link"] for r in rows if r["family"] == "16u4s"}
        assert family_links == {f"{link[0]}-{link[1]}"}


def test_write_sweep_csv(tmp_path):
    rows = R.sweep_scalability([0.0, 5.0], families=((8, 2),))
    path = tmp_path / "sweep.csv"
    R.write_sweep_csv(rows, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("x,family,n,k,style,link,key_rate_bps")
    assert len(lines) == 3
