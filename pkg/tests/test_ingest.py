import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedflow import ingest
from fedflow.errors import DegenerateGeometryError, OrderingError, ParseError, ReferentialError
from fedflow.ingest import Adjacency, RegimeSpec, SensorMeta

META = "sensor_id,latitude,longitude,district,freeway,direction,lanes,detector_type\n"


def _write(tmp_path, flow_rows, meta_rows=("s1,33.7,-117.8,12,SR55-N,N,4,Mainline",)):
    fp, mp = tmp_path / "flows.csv", tmp_path / "meta.csv"
    fp.write_text("sensor_id,timestamp,flow\n" + "".join(r + "\n" for r in flow_rows))
    mp.write_text(META + "".join(r + "\n" for r in meta_rows))
    return fp, mp


class TestLoad:
    def test_direct_transcription(self, tmp_path):
        rows = [f"s1,2019-01-01 00:{m:02d}:00,{v}" for m, v in zip((0, 15, 30, 45), (10, 20, 30, 40))]
        t = ingest.load_flow_table(*_write(tmp_path, rows))
        assert t.flows.shape == (4, 1)
        assert t.flows[:, 0].tolist() == [10.0, 20.0, 30.0, 40.0]

    def test_gap_fill(self, tmp_path):
        rows = ["s1,2019-01-01 00:00:00,5", "s1,2019-01-01 00:45:00,7"]
        t = ingest.load_flow_table(*_write(tmp_path, rows))
        assert t.flows.shape == (4, 1)
        assert t.flows[0, 0] == 5 and t.flows[3, 0] == 7
        assert np.isnan(t.flows[1, 0]) and np.isnan(t.flows[2, 0])
        assert str(t.timestamps[1]) == "2019-01-01T00:15:00"

    def test_unknown_sensor(self, tmp_path):
        with pytest.raises(ReferentialError):
            ingest.load_flow_table(*_write(tmp_path, ["s9,2019-01-01 00:00:00,5"]))

    def test_non_monotone(self, tmp_path):
        rows = ["s1,2019-01-01 00:15:00,5", "s1,2019-01-01 00:00:00,7"]
        with pytest.raises(OrderingError):
            ingest.load_flow_table(*_write(tmp_path, rows))

    def test_parse_error_names_line(self, tmp_path):
        rows = ["s1,2019-01-01 00:00:00,5", "s1,2019-01-01 00:15:00,abc"]
        with pytest.raises(ParseError) as exc:
            ingest.load_flow_table(*_write(tmp_path, rows))
        assert exc.value.line == 3
        assert ":3:" in str(exc.value)

    def test_sensor_order_follows_meta(self, tmp_path):
        meta = ("b,33.7,-117.8,12,SR55-N,N,4,Mainline", "a,33.8,-117.8,12,SR55-N,N,4,Mainline")
        rows = ["a,2019-01-01 00:00:00,1", "b,2019-01-01 00:00:00,2"]
        t = ingest.load_flow_table(*_write(tmp_path, rows, meta))
        assert t.sensor_ids == ["b", "a"]
        assert t.flows[0].tolist() == [2.0, 1.0]


def test_roundtrip_bit_exact(tmp_path):
    t = ingest.synth_generate([("SR1-N", RegimeSpec(120, 80, noise_std=7.3, sensor_count=3))], 2, seed=5)
    flows = t.flows.copy()
    flows[3, 1] = np.nan
    t = ingest.FlowTable(t.sensors, t.timestamps, flows)
    ingest.write_flow_table(t, tmp_path / "f.csv", tmp_path / "m.csv")
    back = ingest.load_flow_table(tmp_path / "f.csv", tmp_path / "m.csv")
    assert np.array_equal(back.flows, t.flows, equal_nan=True)
    assert np.array_equal(back.timestamps, t.timestamps)
    assert back.sensors == t.sensors


class TestSynth:
    def test_deterministic(self):
        r = [("SR1-N", RegimeSpec(200, 100, noise_std=5, zero_dropout_prob=0.01, sensor_count=3, drift_std=0.05))]
        a = ingest.synth_generate(r, 3, seed=1)
        b = ingest.synth_generate(r, 3, seed=1)
        c = ingest.synth_generate(r, 3, seed=2)
        assert np.array_equal(a.flows, b.flows)
        assert not np.array_equal(a.flows, c.flows)

    def test_noise_free_equals_curve(self):
        spec = RegimeSpec(300, 150, weekend_factor=1.0, sensor_count=2)
        t = ingest.synth_generate([("SR1-N", spec)], 7, seed=3)
        hours = np.arange(7 * 96) % 96 / 4.0
        expect = ingest.diurnal_curve(spec, hours)
        for j in range(2):
            assert np.array_equal(t.flows[:, j], expect)

    def test_mean_close_to_analytic(self):
        spec = RegimeSpec(300, 200, weekend_factor=0.8, noise_std=20, zero_dropout_prob=0.01, sensor_count=5)
        t = ingest.synth_generate([("SR1-N", spec)], 28, seed=4)
        # analytic mean of the noise-free curve: base on weekdays, 0.8 * base on weekends
        hours = np.arange(96) / 4.0
        day_mean = ingest.diurnal_curve(spec, hours).mean()
        analytic = day_mean * (20 + 8 * 0.8) / 28
        assert abs(np.nanmean(t.flows) - analytic) / analytic < 0.10

    def test_layout_on_a_line(self):
        t = ingest.synth_generate([("SR1-E", RegimeSpec(10, 5, sensor_count=4))], 1, seed=0)
        lats = {s.latitude for s in t.sensors}
        lons = [s.longitude for s in t.sensors]
        assert len(lats) == 1
        assert np.allclose(np.diff(lons), 0.01)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            ingest.synth_generate([], 1, 0)
        with pytest.raises(ValueError):
            ingest.synth_generate([("SR1-N", RegimeSpec(1, 1))], 0, 0)
        with pytest.raises(ValueError):
            RegimeSpec(-1, 1)


def _meta(coords, freeway="SR1-N", direction="N"):
    return [SensorMeta(f"s{i}", lat, lon, "12", freeway, direction, 3) for i, (lat, lon) in enumerate(coords)]


class TestAdjacency:
    def test_two_sensors_degenerate(self):
        with pytest.raises(DegenerateGeometryError):
            ingest.build_adjacency(_meta([(33.7, -117.8), (33.8, -117.8)]))

    def test_identical_coordinates_degenerate(self):
        with pytest.raises(DegenerateGeometryError):
            ingest.build_adjacency(_meta([(33.7, -117.8)] * 3))

    def test_collinear_hand_computed(self):
        # spacings 1,1,1 in abstract units through the distance override
        pos = np.arange(4.0)
        D = np.abs(pos[:, None] - pos[None, :])
        iu = np.triu_indices(4, 1)
        d = D[iu]  # 1,2,3,1,2,1
        sigma = math.sqrt(sum((x - sum(d) / 6) ** 2 for x in d) / 6)
        meta = [SensorMeta(f"s{i}", 33.0 + 0.01 * i, -117.0, "12", f"F{i}-N", "N", 2) for i in range(4)]
        adj = ingest.build_adjacency(meta, epsilon=0.0, distances=D)
        for i in range(4):
            for j in range(4):
                expect = 0.0 if i == j else math.exp(-D[i, j] ** 2 / sigma ** 2)
                assert abs(adj.weights[i, j] - expect) < 1e-9

    def test_directed_same_corridor(self):
        meta = _meta([(33.70, -117.8), (33.71, -117.8), (33.72, -117.8)])
        adj = ingest.build_adjacency(meta, epsilon=0.0)
        W = adj.weights
        # northbound: lower latitude is upstream, so only i -> j with lat_i < lat_j survives
        assert W[0, 1] > 0 and W[1, 0] == 0
        assert W[1, 2] > 0 and W[2, 1] == 0
        out0, in0 = W[0].sum(), W[:, 0].sum()
        assert out0 > 0 and in0 == 0

    def test_southbound_reverses(self):
        meta = _meta([(33.70, -117.8), (33.71, -117.8), (33.72, -117.8)], "SR1-S", "S")
        W = ingest.build_adjacency(meta, epsilon=0.0).weights
        assert W[1, 0] > 0 and W[0, 1] == 0

    def test_cross_corridor_symmetric(self):
        meta = _meta([(33.70, -117.8), (33.75, -117.8)]) + [SensorMeta("x", 33.72, -117.79, "12", "SR2-E", "E", 3)]
        W = ingest.build_adjacency(meta, epsilon=0.0).weights
        assert W[0, 2] == W[2, 0] and W[1, 2] == W[2, 1]

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(33.0, 34.0), st.floats(-118.0, -117.0)), min_size=3, max_size=12),
           st.floats(0.0, 0.9))
    def test_invariants(self, coords, eps):
        meta = [SensorMeta(f"s{i}", la, lo, "12", "SR1-N" if i % 2 else "SR2-E", "N" if i % 2 else "E", 2)
                for i, (la, lo) in enumerate(coords)]
        try:
            adj = ingest.build_adjacency(meta, epsilon=eps)
        except DegenerateGeometryError:
            return
        W = adj.weights
        assert np.all(np.diag(W) == 0)
        assert np.all((W >= 0) & (W <= 1))
        assert not np.any((W > 0) & (W < eps))

    def test_triplets_roundtrip(self, tmp_path):
        meta = _meta([(33.70, -117.8), (33.71, -117.8), (33.73, -117.81)])
        adj = ingest.build_adjacency(meta)
        ingest.write_adjacency_triplets(adj, tmp_path / "a.csv")
        back = ingest.read_adjacency_triplets(tmp_path / "a.csv", [m.sensor_id for m in meta])
        assert np.array_equal(back.weights, adj.weights)
        n_lines = len((tmp_path / "a.csv").read_text().strip().splitlines()) - 1
        assert n_lines == int((adj.weights > 0).sum())


class TestDegrees:
    def test_zero(self):
        assert ingest.weighted_degrees(Adjacency(np.zeros((3, 3))), 1) == (0.0, 0.0)

    def test_two_by_two(self):
        adj = Adjacency(np.array([[0.0, 0.5], [0.25, 0.0]]))
        assert ingest.weighted_degrees(adj, 0) == (0.25, 0.5)

    def test_bruteforce(self):
        W = np.random.default_rng(0).random((5, 5))
        np.fill_diagonal(W, 0)
        adj = Adjacency(W)
        for i in range(5):
            din, dout = ingest.weighted_degrees(adj, i)
            assert din == pytest.approx(sum(W[j, i] for j in range(5)), abs=1e-12)
            assert dout == pytest.approx(sum(W[i, j] for j in range(5)), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-80, 80), st.floats(-170, 170), st.floats(-80, 80), st.floats(-170, 170))
def test_great_circle_symmetric(la1, lo1, la2, lo2):
    d1 = ingest.great_circle_km(la1, lo1, la2, lo2)
    d2 = ingest.great_circle_km(la2, lo2, la1, lo1)
    assert d1 == pytest.approx(d2, abs=1e-9)
    assert d1 >= 0
    assert ingest.great_circle_km(la1, lo1, la1, lo1) == 0.0


def test_kernel_monotone_in_distance():
    D = np.array([[0, 1, 2, 3], [1, 0, 1, 2], [2, 1, 0, 1], [3, 2, 1, 0]], dtype=float)
    W = ingest.gaussian_kernel_weights(D, epsilon=0.0)
    assert W[0, 1] > W[0, 2] > W[0, 3]


def test_sensor_meta_validation():
    with pytest.raises(ValueError):
        SensorMeta("a", 95.0, 0.0, "12", "SR1-N", "N", 2)
    with pytest.raises(ValueError):
        SensorMeta("a", 0.0, 0.0, "12", "SR1-N", "N", 0)
    with pytest.raises(ValueError):
        SensorMeta("a", 0.0, 0.0, "12", "", "N", 2)
