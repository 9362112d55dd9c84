import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cyclefuse.cohort import (
    Cohort, CohortError, SubjectRecord, SyntheticSpec, devectorize, generate_synthetic_cohort,
    load_cohort, n_components_from_length, save_cohort, stratified_kfold, vectorize_upper_triangle,
)
from cyclefuse.metrics import volume_tmap


def random_symmetric(rng, c):
    m = rng.uniform(-1, 1, (c, c))
    m = (m + m.T) / 2
    np.fill_diagonal(m, 1.0)
    return m


class TestVectorize:
    def test_paper_length(self):
        assert vectorize_upper_triangle(np.eye(53)).size == 1378

    def test_three_components(self):
        m = np.array([[1, 0.1, 0.2], [0.1, 1, 0.3], [0.2, 0.3, 1]])
        np.testing.assert_array_equal(vectorize_upper_triangle(m), [0.1, 0.2, 0.3])

    def test_five_components(self):
        assert vectorize_upper_triangle(np.eye(5)).size == 10

    def test_rejects_asymmetric(self):
        m = np.eye(3)
        m[0, 1] = 0.5
        with pytest.raises(CohortError):
            vectorize_upper_triangle(m)

    def test_rejects_out_of_range(self):
        m = np.eye(3)
        m[0, 1] = m[1, 0] = 1.5
        with pytest.raises(CohortError):
            vectorize_upper_triangle(m)

    def test_devectorize_small(self):
        m = devectorize([0.1, 0.2, 0.3])
        assert m[0, 1] == 0.1 and m[0, 2] == 0.2 and m[1, 2] == 0.3
        np.testing.assert_array_equal(np.diag(m), 1.0)
        np.testing.assert_array_equal(m, m.T)

    def test_devectorize_rejects_non_triangular(self):
        with pytest.raises(CohortError):
            devectorize(np.zeros(7))

    def test_round_trip_8(self):
        m = random_symmetric(np.random.default_rng(0), 8)
        back = devectorize(vectorize_upper_triangle(m))
        off = ~np.eye(8, dtype=bool)
        np.testing.assert_array_equal(back[off], m[off])

    @given(st.integers(2, 20), st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_property(self, c, seed):
        m = random_symmetric(np.random.default_rng(seed), c)
        v = vectorize_upper_triangle(m)
        assert v.size == c * (c - 1) // 2
        assert n_components_from_length(v.size) == c
        off = ~np.eye(c, dtype=bool)
        np.testing.assert_array_equal(devectorize(v)[off], m[off])


class TestRecords:
    def test_needs_a_modality(self):
        with pytest.raises(CohortError):
            SubjectRecord("s", "CN")

    def test_bad_diagnosis(self):
        with pytest.raises(CohortError):
            SubjectRecord("s", "MCI", fnc=np.zeros(3))

    def test_cohort_dims_enforced(self):
        r = SubjectRecord("s", "CN", fnc=np.zeros(6))
        with pytest.raises(CohortError):
            Cohort((r,), fnc_dim=3, volume_shape=(2, 2, 2))

    def test_arrays_are_read_only(self):
        r = SubjectRecord("s", "CN", fnc=np.zeros(3))
        with pytest.raises(ValueError):
            r.fnc[0] = 1


class TestSynthetic:
    def test_table1_fnc_column(self):
        c, _ = generate_synthetic_cohort(SyntheticSpec(n_cn=207, n_ad=207, volume_shape=(4, 4, 4), seed=1))
        assert len(c.paired()) == 414

    def test_all_fnc_missing(self):
        c, _ = generate_synthetic_cohort(SyntheticSpec(n_cn=5, n_ad=5, missing_fnc_fraction=1.0))
        assert len(c.paired()) == 0
        assert all(r.t1 is not None for r in c)

    def test_missingness_stratified(self):
        c, _ = generate_synthetic_cohort(SyntheticSpec(n_cn=100, n_ad=100, missing_fnc_fraction=0.3,
                                                       volume_shape=(4, 4, 4)))
        counts = c.counts()
        assert counts["CN"]["paired"] == 70 and counts["AD"]["paired"] == 70

    def test_errors(self):
        with pytest.raises(CohortError):
            generate_synthetic_cohort(SyntheticSpec(n_cn=0))
        with pytest.raises(CohortError):
            generate_synthetic_cohort(SyntheticSpec(missing_fnc_fraction=1.5))
        with pytest.raises(CohortError):
            generate_synthetic_cohort(SyntheticSpec(missing_fnc_fraction=0.6, missing_t1_fraction=0.6))

    def test_deterministic(self):
        spec = SyntheticSpec(n_cn=6, n_ad=6, missing_fnc_fraction=0.5, seed=3)
        a, ga = generate_synthetic_cohort(spec)
        b, gb = generate_synthetic_cohort(spec)
        assert a.same_as(b)
        np.testing.assert_array_equal(ga.affected_pairs, gb.affected_pairs)
        c, _ = generate_synthetic_cohort(SyntheticSpec(n_cn=6, n_ad=6, missing_fnc_fraction=0.5, seed=4))
        assert not a.same_as(c)

    def test_ranges(self):
        c, gt = generate_synthetic_cohort(SyntheticSpec(n_cn=10, n_ad=10, effect_size=2.0))
        assert np.abs(c.t1_array()).max() <= 1 and np.abs(c.fnc_array()).max() <= 1
        assert gt.region_mask(c.volume_shape).sum() == 4**3
        assert set(gt.latents) == set(c.ids)

    def test_null_tmap_below_bonferroni(self):
        # effect_size = 0: Bonferroni-corrected max |t| stays below threshold in >= 95% of seeds
        passes = 0
        for seed in range(100):
            c, _ = generate_synthetic_cohort(SyntheticSpec(n_cn=15, n_ad=15, effect_size=0.0,
                                                           volume_shape=(8, 8, 8), seed=seed))
            ad = [r.t1 for r in c if r.diagnosis == "AD"]
            cn = [r.t1 for r in c if r.diagnosis == "CN"]
            t = volume_tmap(ad, cn)
            n_vox = t.size
            # conservative df for Welch: min(n_a, n_b) - 1
            thr = stats.t.ppf(1 - 0.05 / (2 * n_vox), df=min(len(ad), len(cn)) - 1)
            passes += np.abs(t).max() < thr
        assert passes >= 95

    def test_effect_peak_in_region(self):
        hits = 0
        for seed in range(20):
            c, gt = generate_synthetic_cohort(SyntheticSpec(n_cn=20, n_ad=20, effect_size=0.3,
                                                            noise_sigma=0.1, seed=seed))
            ad = [r.t1 for r in c if r.diagnosis == "AD"]
            cn = [r.t1 for r in c if r.diagnosis == "CN"]
            t = np.abs(volume_tmap(ad, cn))
            peak = np.unravel_index(np.argmax(t), t.shape)
            hits += gt.region_mask(c.volume_shape)[peak]
        assert hits >= 18


def _toy_cohort(n_cn, n_ad):
    recs = [SubjectRecord(f"s{i}", "CN" if i < n_cn else "AD", fnc=np.zeros(3)) for i in range(n_cn + n_ad)]
    return Cohort(tuple(recs), fnc_dim=3, volume_shape=(2, 2, 2))


class TestFolds:
    def test_exact_balance(self):
        c = _toy_cohort(10, 10)
        for _, test in stratified_kfold(c, 5, seed=0):
            dx = [c.record(i).diagnosis for i in test]
            assert dx.count("CN") == 2 and dx.count("AD") == 2

    def test_partition(self):
        c = _toy_cohort(10, 10)
        tests = [set(te) for _, te in stratified_kfold(c, 5, 0)]
        assert set().union(*tests) == set(c.ids)
        assert sum(len(t) for t in tests) == len(c)
        for tr, te in stratified_kfold(c, 5, 0):
            assert not set(tr) & set(te)

    def test_table1_paired_ad(self):
        c = _toy_cohort(207, 195)
        ad_counts = [sum(c.record(i).diagnosis == "AD" for i in te) for _, te in stratified_kfold(c, 5, 1)]
        assert ad_counts == [39] * 5

    def test_deterministic(self):
        c = _toy_cohort(12, 9)
        assert stratified_kfold(c, 3, 7) == stratified_kfold(c, 3, 7)

    def test_too_few(self):
        with pytest.raises(CohortError):
            stratified_kfold(_toy_cohort(3, 10), 5, 0)
        with pytest.raises(CohortError):
            stratified_kfold(_toy_cohort(10, 10), 1, 0)


class TestFiles:
    def _write(self, tmp_path, raw_max=4095.0):
        import nibabel as nib

        vdir = tmp_path / "vols"
        vdir.mkdir()
        rng = np.random.default_rng(0)
        for i in range(3):
            data = rng.uniform(0, raw_max, (4, 5, 6))
            data.flat[0] = 0.0
            data.flat[1] = raw_max
            nib.save(nib.Nifti1Image(data.astype(np.float32), np.diag([2, 2, 2, 1])), str(vdir / f"s{i}.nii.gz"))
        fnc = tmp_path / "fnc.csv"
        rows = rng.uniform(-1, 1, (2, 1378))
        np.savetxt(fnc, rows, delimiter=",")
        man = tmp_path / "manifest.csv"
        man.write_text(
            "subject_id,diagnosis,volume_path,fnc_row_index\n"
            "s0,CN,s0.nii.gz,0\ns1,AD,s1.nii.gz,1\ns2,AD,s2.nii.gz,\n"
        )
        return vdir, fnc, man

    def test_load(self, tmp_path):
        c = load_cohort(*self._write(tmp_path))
        assert len(c) == 3 and len(c.paired()) == 2
        assert c.n_components == 53
        vols = c.t1_array()
        assert vols.min() == -1.0 and vols.max() == 1.0

    def test_dangling_reference(self, tmp_path):
        vdir, fnc, man = self._write(tmp_path)
        man.write_text("subject_id,diagnosis,volume_path,fnc_row_index\nsX,CN,missing.nii,\n")
        with pytest.raises(CohortError, match="not found"):
            load_cohort(vdir, fnc, man)

    def test_shape_mismatch(self, tmp_path):
        import nibabel as nib

        vdir, fnc, man = self._write(tmp_path)
        nib.save(nib.Nifti1Image(np.zeros((3, 3, 3), np.float32), np.eye(4)), str(vdir / "s2.nii.gz"))
        with pytest.raises(CohortError, match="shape"):
            load_cohort(vdir, fnc, man)

    def test_bad_fnc_length(self, tmp_path):
        vdir, fnc, man = self._write(tmp_path)
        np.savetxt(fnc, np.zeros((2, 7)), delimiter=",")
        with pytest.raises(CohortError, match="C\\*\\(C-1\\)/2"):
            load_cohort(vdir, fnc, man)

    def test_save_load_round_trip(self, tmp_path):
        c, _ = generate_synthetic_cohort(SyntheticSpec(n_cn=4, n_ad=4, missing_fnc_fraction=0.5,
                                                       volume_shape=(6, 6, 6)))
        paths = save_cohort(c, tmp_path / "out")
        back = load_cohort(paths["volume_dir"], paths["fnc_table"], paths["manifest"], intensity_range=(-1, 1))
        assert back.same_as(c)

    def test_save_is_byte_stable(self, tmp_path):
        c, _ = generate_synthetic_cohort(SyntheticSpec(n_cn=3, n_ad=3, volume_shape=(4, 4, 4)))
        a = save_cohort(c, tmp_path / "a")
        b = save_cohort(c, tmp_path / "b")
        for key in ("fnc_table", "manifest"):
            assert a[key].read_bytes() == b[key].read_bytes()
        for f in sorted(a["volume_dir"].iterdir()):
            assert f.read_bytes() == (b["volume_dir"] / f.name).read_bytes()
