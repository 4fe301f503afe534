import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from builders import line_network, make_segment, trip
from unite.network import (
    BOUNDARY,
    Category,
    DataError,
    DuplicateSegment,
    FeatureScaler,
    MissingArrival,
    NonpositiveLength,
    RoadNetwork,
    UnknownCategory,
    UnknownSegment,
    WEEK_SECONDS,
    parse_network,
    parse_trajectories,
    route_context,
    tow,
    tow_distance,
    write_network,
    write_trajectories,
)

FEATS = ",".join(["0.5"] * 16)
HEADER = "segment_id,source,target,length_m,category,speed_limit_kmh," + ",".join(f"f{i}" for i in range(1, 17))

times = st.floats(0.0, WEEK_SECONDS, exclude_max=True, allow_nan=False)


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestParseNetwork:
    def test_field_mapping(self, tmp_path):
        p = _write(tmp_path, "n.csv", f"{HEADER}\ns1,a,b,120.0,motorway,36.11,{FEATS}\n")
        net = parse_network(p)
        s = net["s1"]
        assert s.length == 120.0
        assert s.category is Category.MOTORWAY
        assert s.speed_limit == pytest.approx(36.11 / 3.6)
        assert s.features == (0.5,) * 16

    def test_empty_speed_limit(self, tmp_path):
        p = _write(tmp_path, "n.csv", f"{HEADER}\ns1,a,b,120.0,urban,,{FEATS}\n")
        assert parse_network(p)["s1"].speed_limit is None

    def test_nonpositive_length_reports_line(self, tmp_path):
        p = _write(tmp_path, "n.csv", f"{HEADER}\ns1,a,b,1,urban,,{FEATS}\ns2,a,b,-5,urban,,{FEATS}\n")
        with pytest.raises(NonpositiveLength) as exc:
            parse_network(p)
        assert exc.value.line == 3

    def test_unknown_category(self, tmp_path):
        p = _write(tmp_path, "n.csv", f"{HEADER}\ns1,a,b,1,highway,,{FEATS}\n")
        with pytest.raises(UnknownCategory):
            parse_network(p)

    def test_duplicate_id(self, tmp_path):
        p = _write(tmp_path, "n.csv", f"{HEADER}\ns1,a,b,1,urban,,{FEATS}\ns1,b,c,1,urban,,{FEATS}\n")
        with pytest.raises(DuplicateSegment):
            parse_network(p)

    def test_malformed_row(self, tmp_path):
        p = _write(tmp_path, "n.csv", f"{HEADER}\ns1,a,b,1,urban\n")
        with pytest.raises(DataError, match="line 2"):
            parse_network(p)

    def test_city_flags_default_and_explicit(self, tmp_path):
        text = f"{HEADER},in_city_source,in_city_target\ns1,a,b,1,rural,,{FEATS},1,0\n"
        assert parse_network(_write(tmp_path, "a.csv", text))["s1"].in_city_source
        text = f"{HEADER}\ns1,a,b,1,urban,,{FEATS}\ns2,b,c,1,rural,,{FEATS}\n"
        net = parse_network(_write(tmp_path, "b.csv", text))
        assert net["s1"].in_city_source and not net["s2"].in_city_target

    def test_round_trip(self, tmp_path):
        net = line_network()
        write_network(net, tmp_path / "n.csv")
        back = parse_network(tmp_path / "n.csv")
        assert [back[s] for s in back.ids] == [net[s] for s in net.ids]

    def test_adjacency(self):
        net = line_network()
        assert sorted(net.successors("s1")) == ["s2", "s4"]
        assert net.connected("s2", "s3") and not net.connected("s3", "s1")


class TestParseTrajectories:
    def test_grouping_and_ordering(self, tmp_path):
        net = line_network()
        text = "trip_id,seq,segment_id,arrival_tow_s,speed_mps\nt1,1,s2,20,8\nt1,0,s1,10,9\n"
        trs = parse_trajectories(_write(tmp_path, "t.csv", text), net)
        assert len(trs) == 1
        assert trs[0].route == ("s1", "s2")
        assert trs[0].speeds == [9.0, 8.0]

    def test_missing_fields(self, tmp_path):
        net = line_network()
        text = "trip_id,seq,segment_id,arrival_tow_s,speed_mps\nt1,0,s1,10,9\nt1,1,s2,,\n"
        tr = parse_trajectories(_write(tmp_path, "t.csv", text), net)[0]
        assert tr.traversals[1].speed is None and tr.traversals[1].arrival is None

    def test_unknown_segment(self, tmp_path):
        text = "trip_id,seq,segment_id,arrival_tow_s,speed_mps\nt1,0,zz,10,9\n"
        with pytest.raises(UnknownSegment):
            parse_trajectories(_write(tmp_path, "t.csv", text), line_network())

    def test_noncontiguous(self, tmp_path):
        text = "trip_id,seq,segment_id,arrival_tow_s,speed_mps\nt1,0,s1,10,9\nt1,2,s2,20,9\n"
        with pytest.raises(DataError, match="non-contiguous"):
            parse_trajectories(_write(tmp_path, "t.csv", text), line_network())

    def test_first_arrival_required(self, tmp_path):
        text = "trip_id,seq,segment_id,arrival_tow_s,speed_mps\nt1,0,s1,,9\n"
        with pytest.raises(MissingArrival):
            parse_trajectories(_write(tmp_path, "t.csv", text), line_network())

    def test_disconnected_route(self, tmp_path):
        text = "trip_id,seq,segment_id,arrival_tow_s,speed_mps\nt1,0,s1,1,9\nt1,1,s3,2,9\n"
        with pytest.raises(DataError, match="not connected"):
            parse_trajectories(_write(tmp_path, "t.csv", text), line_network())

    def test_kmh_column_converted(self, tmp_path):
        text = "trip_id,seq,segment_id,arrival_tow_s,speed_kmh\nt1,0,s1,1,36\n"
        tr = parse_trajectories(_write(tmp_path, "t.csv", text), line_network())[0]
        assert tr.speeds[0] == pytest.approx(10.0)

    def test_round_trip(self, tmp_path):
        net = line_network()
        trs = [
            trip("t1", ["s1", "s2", "s3"], [5.0, None, 604799.5], [9.5, None, 31.25]),
            trip("t2", ["s1", "s4"], [0.0, 12.0], [None, 1e-3]),
        ]
        write_trajectories(trs, tmp_path / "t.csv")
        assert parse_trajectories(tmp_path / "t.csv", net) == trs

    def test_round_trip_synthetic(self, tmp_path, small_data):
        write_network(small_data.network, tmp_path / "n.csv")
        write_trajectories(small_data.train, tmp_path / "t.csv")
        net = parse_network(tmp_path / "n.csv")
        assert parse_trajectories(tmp_path / "t.csv", net) == small_data.train


class TestSegment:
    def test_rejects_bad_values(self):
        with pytest.raises(NonpositiveLength):
            make_segment("x", "a", "b", 0.0)
        with pytest.raises(DataError):
            make_segment("x", "a", "b", 1.0, limit=-1.0)

    def test_duplicate_in_network(self):
        with pytest.raises(DuplicateSegment):
            RoadNetwork([make_segment("x", "a", "b"), make_segment("x", "b", "c")])


class TestTimeOfWeek:
    def test_examples(self):
        assert tow_distance(60, 60) == 0
        assert tow_distance(0, 604740) == 60
        assert tow_distance(100000, 200000) == 100000

    def test_wrap(self):
        assert tow(WEEK_SECONDS + 5) == 5
        assert tow(-5) == WEEK_SECONDS - 5
        assert 0 <= tow(-1e-12) < WEEK_SECONDS

    @given(times, times)
    def test_matches_both_directions(self, a, b):
        # going forward from a to b, or forward from b to a, on the circle
        fwd = (b - a) % WEEK_SECONDS
        back = (a - b) % WEEK_SECONDS
        assert tow_distance(a, b) == pytest.approx(min(fwd, back), abs=1e-6)

    @given(times, times, times)
    def test_metric(self, a, b, c):
        d = tow_distance
        assert d(a, b) == d(b, a)
        assert 0 <= d(a, b) <= WEEK_SECONDS / 2
        assert d(a, c) <= d(a, b) + d(b, c) + 1e-6


class TestRouteContext:
    def test_examples(self):
        r = ("a", "b", "c")
        assert route_context(r, 1, 1) == ("a", "b", "c")
        assert route_context(r, 0, 1) == (BOUNDARY, "a", "b")
        assert route_context(r, 2, 2) == ("a", "b", "c", BOUNDARY, BOUNDARY)

    @given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=12), st.data())
    def test_c0_is_segment(self, route, data):
        i = data.draw(st.integers(0, len(route) - 1))
        assert route_context(route, i, 0) == (route[i],)

    @given(st.lists(st.sampled_from("abc"), min_size=1, max_size=10), st.integers(0, 4), st.data())
    def test_uniform_length(self, route, c, data):
        i = data.draw(st.integers(0, len(route) - 1))
        ctx = route_context(route, i, c)
        assert len(ctx) == 2 * c + 1 and ctx[c] == route[i]


class TestFeatureScaler:
    def test_standardizes_training_rows(self, small_data):
        sc = FeatureScaler.fit(small_data.network, small_data.train)
        rows = [small_data.network[t.segment].features for tr in small_data.train for t in tr.traversals]
        z = sc.transform(rows)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-10)
        std = z.std(axis=0)
        assert np.all((np.abs(std - 1) < 1e-10) | (std == 0))

    def test_identity_default(self):
        x = np.arange(16.0)
        np.testing.assert_array_equal(FeatureScaler().transform(x), x)
        assert math.isfinite(FeatureScaler.fit(line_network(), []).scale[0])
