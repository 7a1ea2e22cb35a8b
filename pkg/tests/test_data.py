import itertools

import numpy as np
import pytest

from conftest import random_records
from mocsurv.data import (
    Cohort,
    CohortLoadError,
    ContrastPair,
    FeatureSet,
    SurvivalRecord,
    SynthConfig,
    build_pairs,
    generate_synthetic,
    kfold_split,
    load_cohort,
    read_bag,
    save_cohort,
    write_bag,
)
from mocsurv.metrics import c_index


def brute_force_pairs(records):
    """Each sample searches partners; unordered duplicates collapse in a set."""
    found = set()
    for a in records:
        for b in records:
            if a.id == b.id:
                continue
            if a.event and b.event:
                if a.time < b.time:
                    found.add((a.id, b.id))
                elif b.time < a.time:
                    found.add((b.id, a.id))
            elif a.event and not b.event:
                if a.time < b.time:
                    found.add((a.id, b.id))
            elif b.event and not a.event:
                if b.time < a.time:
                    found.add((b.id, a.id))
    return [ContrastPair(h, l) for h, l in sorted(found)]


R = SurvivalRecord


class TestBuildPairs:
    def test_worked_example(self):
        recs = [R("a", 2, True), R("b", 5, True), R("c", 4, False)]
        assert build_pairs(recs) == [ContrastPair("a", "b"), ContrastPair("a", "c")]

    def test_all_censored(self):
        assert build_pairs([R("a", 1, False), R("b", 2, False), R("c", 3, False)]) == []

    def test_tied_uncensored(self):
        assert build_pairs([R("a", 3, True), R("b", 3, True)]) == []

    def test_censor_equal_to_event_time_excluded(self):
        assert build_pairs([R("a", 3, True), R("b", 3, False)]) == []

    def test_empty(self):
        assert build_pairs([]) == []

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 201))
        recs = random_records(rng, n, censor_frac=rng.uniform(0, 0.9), tie_prob=0.3)
        pairs = build_pairs(recs)
        assert pairs == brute_force_pairs(recs)
        assert len(pairs) <= n * (n - 1) // 2
        by_id = {r.id: r for r in recs}
        for p in pairs:
            hi, lo = by_id[p.higher_id], by_id[p.lower_id]
            assert hi.event
            assert hi.time < lo.time

    def test_accepts_cohort(self, tiny_synth):
        assert build_pairs(tiny_synth) == build_pairs(tiny_synth.records)


class TestRecords:
    def test_nonpositive_time_rejected(self):
        with pytest.raises(ValueError):
            R("a", 0.0, True)

    def test_duplicate_ids_rejected(self):
        f = FeatureSet(np.ones((1, 2)), np.ones(3))
        with pytest.raises(ValueError):
            Cohort([R("a", 1, True), R("a", 2, True)], {"a": f})


class TestSynthetic:
    def test_reproducible(self):
        cfg = SynthConfig(n=50, seed=9)
        a, b = generate_synthetic(cfg), generate_synthetic(cfg)
        assert a.records == b.records
        assert a.latent == b.latent
        for pid in a.ids:
            assert a.features[pid].bag.tobytes() == b.features[pid].bag.tobytes()
            assert a.features[pid].gene.tobytes() == b.features[pid].gene.tobytes()

    def test_no_censoring(self):
        c = generate_synthetic(SynthConfig(n=60, censor_frac=0.0))
        assert all(r.event for r in c.records)

    def test_censor_share(self):
        c = generate_synthetic(SynthConfig(n=100, censor_frac=0.3))
        assert sum(not r.event for r in c.records) == 30

    def test_shapes(self):
        c = generate_synthetic(SynthConfig(n=20, d_p=7, d_g=5, bag_mean=3))
        assert c.d_p == 7 and c.d_g == 5
        assert all(f.bag.shape[0] >= 1 for f in c.features.values())

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_no_signal(self, seed):
        c = generate_synthetic(SynthConfig(n=400, beta=0.0, noise_sigma=0.0, seed=seed))
        # feature-derived score under a null hazard
        score = {pid: float(c.features[pid].gene[0]) for pid in c.ids}
        assert abs(c_index(c.records, score) - 0.5) <= 0.05

    def test_latent_oracle_strength(self):
        c = generate_synthetic(SynthConfig(n=400, beta=3.0, noise_sigma=0.1))
        assert c_index(c.records, c.latent) >= 0.80

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SynthConfig(n=3)
        with pytest.raises(ValueError):
            SynthConfig(noise_sigma=-1)


class TestKFold:
    def test_even(self):
        folds = kfold_split([f"x{i}" for i in range(10)], 5, 0)
        assert [len(v) for _, v in folds] == [2] * 5

    def test_remainder(self):
        folds = kfold_split([f"x{i}" for i in range(11)], 5, 0)
        assert sorted((len(v) for _, v in folds), reverse=True) == [3, 2, 2, 2, 2]

    def test_partition_and_determinism(self):
        ids = [f"x{i}" for i in range(37)]
        a = kfold_split(ids, 4, 3)
        assert a == kfold_split(ids, 4, 3)
        vals = [v for _, v in a]
        assert sorted(itertools.chain(*vals)) == sorted(ids)
        for train, val in a:
            assert not set(train) & set(val)
            assert sorted(train + val) == sorted(ids)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            kfold_split(["a", "b"], 3, 0)


def _write_manifest(tmp_path, rows):
    (tmp_path / "manifest.csv").write_text(
        "id,time,event,gene_path,bag_path\n" + "".join(f"{r}\n" for r in rows))
    return tmp_path / "manifest.csv"


@pytest.fixture
def feature_files(tmp_path):
    for pid in ("a", "b", "c"):
        (tmp_path / f"{pid}.txt").write_text("0.5\n-1.25\n")
        write_bag(tmp_path / f"{pid}.bin", np.arange(6, dtype=float).reshape(2, 3))
    return tmp_path


class TestLoadCohort:
    def test_well_formed(self, feature_files):
        m = _write_manifest(feature_files, [f"{p},{t},1,{p}.txt,{p}.bin" for p, t in
                                            (("a", 1.5), ("b", 2), ("c", 3))])
        c = load_cohort(m)
        assert len(c.records) == 3
        assert c.d_g == 2 and c.d_p == 3
        np.testing.assert_array_equal(c.features["a"].gene, [0.5, -1.25])

    def test_zero_time(self, feature_files):
        m = _write_manifest(feature_files, ["a,1,1,a.txt,a.bin", "b,0,1,b.txt,b.bin"])
        with pytest.raises(CohortLoadError) as err:
            load_cohort(m)
        assert err.value.problems[0][0] == 3
        assert "'b'" in str(err.value)

    def test_missing_gene_file(self, feature_files):
        m = _write_manifest(feature_files, ["a,1,1,nope.txt,a.bin"])
        with pytest.raises(CohortLoadError, match="nope.txt"):
            load_cohort(m)

    def test_duplicate_id(self, feature_files):
        m = _write_manifest(feature_files, ["a,1,1,a.txt,a.bin", "a,2,0,b.txt,b.bin"])
        with pytest.raises(CohortLoadError, match="duplicate"):
            load_cohort(m)

    def test_all_problems_reported(self, feature_files):
        m = _write_manifest(feature_files, ["a,-1,1,a.txt,a.bin", "b,1,2,b.txt,b.bin", "c,1,1,x.txt,c.bin"])
        with pytest.raises(CohortLoadError) as err:
            load_cohort(m)
        assert [r for r, _ in err.value.problems] == [2, 3, 4]

    def test_round_trip(self, tmp_path, tiny_synth):
        c = load_cohort(save_cohort(tiny_synth, tmp_path))
        assert c.records == tiny_synth.records
        assert c.latent == tiny_synth.latent
        for pid in c.ids:
            np.testing.assert_array_equal(c.features[pid].bag, tiny_synth.features[pid].bag)
            np.testing.assert_array_equal(c.features[pid].gene, tiny_synth.features[pid].gene)


class TestBagFormat:
    def test_layout(self, tmp_path):
        write_bag(tmp_path / "x.bin", np.array([[1.0, 2.0]]))
        raw = (tmp_path / "x.bin").read_bytes()
        assert raw == b"MOCB" + bytes([1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]) + \
            np.array([1.0, 2.0], dtype="<f4").tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(ValueError, match="magic"):
            read_bag(tmp_path / "x.bin")

    def test_truncated(self, tmp_path):
        write_bag(tmp_path / "x.bin", np.ones((3, 2)))
        raw = (tmp_path / "x.bin").read_bytes()
        (tmp_path / "x.bin").write_bytes(raw[:-4])
        with pytest.raises(ValueError):
            read_bag(tmp_path / "x.bin")
