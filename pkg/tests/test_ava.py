import io
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ilgnet import ava
from ilgnet.ava import RatingRecord

from oracles import exact_mean


def random_records(n, seed, max_votes=60):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        counts = rng.integers(0, max_votes, size=10)
        if counts.sum() == 0:
            counts[4] = 1
        out.append(RatingRecord(f"r{i:05d}", tuple(int(c) for c in counts)))
    return out


def brute_ava1(records, delta, test_ids):
    """Expected (train ids, label by id) computed with exact rationals."""
    labels = {r.image_id: int(exact_mean(r.counts) > 5) for r in records}
    train = [
        r.image_id
        for r in records
        if r.image_id not in test_ids and not (delta > 0 and abs(exact_mean(r.counts) - 5) <= Fraction(str(delta)))
    ]
    return train, labels


class TestParse:
    def test_all_tens(self):
        (r,) = ava.parse_metadata(["img1,0,0,0,0,0,0,0,0,0,5"])
        assert r.counts == (0,) * 9 + (5,)
        assert ava.mean_score(r) == 10.0

    def test_wrong_columns(self):
        with pytest.raises(ava.MetadataError) as exc:
            ava.parse_metadata(["a,1,1,1,1,1,1,1,1,1,1", "b,1,1,1,1,1,1,1,1,1"])
        assert exc.value.problems[0][0] == 2
        assert "line 2" in str(exc.value)

    @pytest.mark.parametrize("line", ["a,-1,1,1,1,1,1,1,1,1,1", "a,0,0,0,0,0,0,0,0,0,0", "a,x,1,1,1,1,1,1,1,1,1"])
    def test_rejects(self, line):
        with pytest.raises(ava.MetadataError):
            ava.parse_metadata([line])

    def test_round_trip(self):
        recs = random_records(50, 3)
        assert ava.parse_metadata(io.StringIO(ava.format_metadata(recs))) == recs


class TestMeanScore:
    def test_symmetric(self):
        assert ava.mean_score(RatingRecord("a", (0, 0, 0, 1, 0, 1, 0, 0, 0, 0))) == 5.0

    def test_zero_votes(self):
        with pytest.raises(ValueError):
            ava.mean_score(RatingRecord("a", (0,) * 10))

    def test_matches_rational_oracle(self):
        for r in random_records(10_000, 11, max_votes=500):
            m = ava.mean_score(r)
            assert 1 <= m <= 10
            assert abs(m - float(exact_mean(r.counts))) <= 1e-12


class TestAva1:
    @pytest.mark.parametrize("delta", [0.0, 0.5, 1.0])
    def test_against_brute_force(self, delta):
        recs = random_records(2000, 5)
        train, test = ava.ava1_split(recs, delta, seed=9, test_count=300)
        test_ids = {e.image_id for e in test}
        exp_train, labels = brute_ava1(recs, delta, test_ids)
        assert len(test) == 300
        assert [e.image_id for e in train] == exp_train
        assert all(e.label == labels[e.image_id] for e in train + test)
        assert test_ids.isdisjoint(e.image_id for e in train)

    def test_delta_keeps_test_set(self):
        recs = random_records(1000, 2)
        _, t0 = ava.ava1_split(recs, 0.0, seed=4, test_count=100)
        _, t1 = ava.ava1_split(recs, 1.0, seed=4, test_count=100)
        assert t0 == t1

    def test_exact_five_is_bad(self):
        recs = [RatingRecord("five", (0, 0, 0, 1, 0, 1, 0, 0, 0, 0))] + random_records(10, 0)
        train, test = ava.ava1_split(recs, 0.0, seed=0, test_count=1)
        ex = {e.image_id: e for e in train + test}["five"]
        assert ex.label == ava.BAD

    def test_empty_train_after_filter(self):
        recs = [RatingRecord(f"r{i}", (0, 0, 0, 1, 0, 1, 0, 0, 0, 0)) for i in range(5)]
        with pytest.raises(ava.SplitError):
            ava.ava1_split(recs, 1.0, seed=0, test_count=2)

    def test_test_count_bounds(self):
        with pytest.raises(ava.SplitError):
            ava.ava1_split(random_records(5, 0), 0.0, 0, 5)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(2, 60), seed=st.integers(0, 1000), delta=st.sampled_from([0.0, 0.3, 1.0]), data=st.data())
    def test_partition_properties(self, n, seed, delta, data):
        recs = random_records(n, seed, max_votes=6)
        tc = data.draw(st.integers(0, n - 1))
        try:
            train, test = ava.ava1_split(recs, delta, seed, tc)
        except ava.SplitError:
            return
        tr, te = {e.image_id for e in train}, {e.image_id for e in test}
        assert tr.isdisjoint(te)
        if delta == 0:
            assert tr | te == {r.image_id for r in recs}
        excluded = {r.image_id for r in recs} - tr - te
        expected = {
            r.image_id
            for r in recs
            if delta > 0 and r.image_id not in te and abs(exact_mean(r.counts) - 5) <= Fraction(str(delta))
        }
        assert excluded == expected

    @pytest.mark.parametrize("counts", [(0, 0, 0, 0, 7, 3, 0, 0, 0, 0), (0, 0, 0, 3, 7, 0, 0, 0, 0, 0)])
    def test_margin_boundary_is_inclusive(self, counts):
        # means 5.3 and 4.7 sit exactly on a 0.3 margin
        recs = [RatingRecord("edge", counts)] + random_records(10, 0)
        train, _ = ava.ava1_split(recs, 0.3, seed=0, test_count=0)
        assert "edge" not in {e.image_id for e in train}


class TestAva2:
    def test_distinct_means(self):
        # vote histograms giving 1000 distinct means
        recs = [RatingRecord(f"r{i:04d}", (1000 - i, 0, 0, 0, 0, 0, 0, 0, 0, i + 1)) for i in range(1000)]
        train, test = ava.ava2_split(recs, seed=3)
        allx = train + test
        good = [e for e in allx if e.label == ava.GOOD]
        bad = [e for e in allx if e.label == ava.BAD]
        assert len(good) == len(bad) == 100
        assert min(e.mean_score for e in good) > max(e.mean_score for e in bad)
        assert len(train) == len(test) == 100

    def test_smallest(self):
        train, test = ava.ava2_split(random_records(20, 1), seed=0)
        assert len(train) == len(test) == 2
        assert sum(e.label for e in train + test) == 2

    def test_too_few(self):
        with pytest.raises(ava.SplitError):
            ava.ava2_split(random_records(19, 1))

    def test_ties_by_id(self):
        recs = [RatingRecord(f"id{i:02d}", (0, 0, 0, 0, 1, 0, 0, 0, 0, 0)) for i in range(30)]
        train, test = ava.ava2_split(recs, seed=0)
        good = sorted(e.image_id for e in train + test if e.label == ava.GOOD)
        bad = sorted(e.image_id for e in train + test if e.label == ava.BAD)
        assert good == ["id00", "id01", "id02"]
        assert bad == ["id27", "id28", "id29"]

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(20, 300), seed=st.integers(0, 1000))
    def test_decile_properties(self, n, seed):
        recs = random_records(n, seed, max_votes=8)
        train, test = ava.ava2_split(recs, seed)
        k = math.floor(0.1 * n)
        allx = train + test
        assert sum(e.label for e in allx) == k
        assert len(allx) - k == k
        assert len(train) == len(test)
        ranked = sorted(recs, key=lambda r: (-exact_mean(r.counts), r.image_id))
        assert {e.image_id for e in allx if e.label} == {r.image_id for r in ranked[:k]}
        assert {e.image_id for e in allx if not e.label} == {r.image_id for r in ranked[n - k :]}


class TestSplitFile:
    def test_round_trip(self, tmp_path):
        train, test = ava.ava1_split(random_records(100, 0), 0.0, 0, 10)
        path = tmp_path / "split.csv"
        ava.write_split(train + test, path)
        text = path.read_text()
        first = text.splitlines()[0].split(",")
        assert len(first) == 4 and len(first[3].split(".")[1]) == 6
        back = ava.read_split(path)
        assert [(e.image_id, e.label, e.partition) for e in back] == [
            (e.image_id, e.label, e.partition) for e in train + test
        ]

    def test_counts(self):
        train, test = ava.ava2_split(random_records(100, 0), seed=0)
        c = ava.split_counts(train + test)
        assert c["good"] == c["bad"] == 10
        assert c["train"] == c["test"] == 10
