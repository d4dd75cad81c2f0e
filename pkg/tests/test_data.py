import numpy as np
import pytest

from metafit import (
    ArmTable,
    DataError,
    EffectSizeTable,
    SamplingCovariance,
    diag_vcv,
    escalc,
    load_arm_table,
    load_table,
    read_vcv,
    vcalc_constant_rho,
    write_vcv,
)

from conftest import make_table


class TestLoadTable:
    def test_assink_first_row(self, assink8_path):
        t = load_table(assink8_path, {"y": "yi", "v": "vi", "cluster": "study", "obs": "id"})
        assert t.cluster_id[0] == "1"
        assert t.obs_id[0] == "1"
        assert t.y[0] == 0.9066
        assert t.v[0] == 0.0740
        assert t.moderators["esid"][0] == 1.0

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("yi,vi\n")
        with pytest.raises(DataError, match="no rows"):
            load_table(p, {"y": "yi", "v": "vi"})

    def test_na_in_v_names_row(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("yi,vi\n0.1,0.2\n0.2,0.3\n0.3,NA\n")
        with pytest.raises(DataError, match="row 3"):
            load_table(p, {"y": "yi", "v": "vi"})

    def test_missing_column(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(DataError, match="not in file"):
            load_table(p, {"y": "yi"})

    def test_duplicate_obs(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("yi,id\n0.1,1\n0.2,1\n")
        with pytest.raises(DataError, match="duplicate"):
            load_table(p, {"y": "yi", "obs": "id"})

    def test_negative_v(self, tmp_path):
        p = tmp_path / "n.csv"
        p.write_text("yi,vi\n0.1,-0.2\n")
        with pytest.raises(DataError, match="negative"):
            load_table(p, {"y": "yi", "v": "vi"})

    def test_obs_synthesized_and_v_optional(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("yi\n0.1\n0.2\n")
        t = load_table(p, {"y": "yi"})
        assert t.obs_id == ("1", "2")
        assert np.all(t.v == 0.0)


class TestTableInvariants:
    def test_immutable_arrays(self):
        t = make_table([0.1, 0.2], [0.1, 0.1])
        with pytest.raises(ValueError):
            t.y[0] = 5.0

    def test_duplicate_obs_rejected(self):
        with pytest.raises(DataError):
            EffectSizeTable(["1", "1"], ["a", "b"], [0.0, 0.0], [1.0, 1.0])

    def test_negative_v_rejected(self):
        with pytest.raises(DataError):
            make_table([0.1], [-1.0])


class TestDiagVcv:
    def test_assink_first_five(self, assink8_path):
        t = load_table(assink8_path, {"y": "yi", "v": "vi", "cluster": "study", "obs": "id"})
        cov = diag_vcv(t)
        assert np.allclose(np.diag(cov.matrix)[:5], t.v[:5])
        # the printed 3-decimal block from the source listing
        assert np.round(np.diag(cov.matrix)[:5], 3).tolist() == [
            0.074, 0.04, 0.048, 0.024, 0.033,
        ]
        off = cov.matrix - np.diag(np.diag(cov.matrix))
        assert np.all(off == 0.0)

    def test_single_row(self):
        cov = diag_vcv(make_table([0.5], [1.0]))
        assert cov.matrix.tolist() == [[1.0]]

    def test_two_rows(self):
        cov = diag_vcv(make_table([0.0, 0.0], [2.0, 3.0]))
        assert cov.matrix.tolist() == [[2.0, 0.0], [0.0, 3.0]]

    def test_zero_v_rejected(self):
        with pytest.raises(DataError, match="v > 0"):
            diag_vcv(make_table([0.1, 0.1], [0.0, 1.0]))


class TestVcalc:
    def test_assink_offdiagonal(self, assink8_path):
        t = load_table(assink8_path, {"y": "yi", "v": "vi", "cluster": "study", "obs": "id"})
        cov = vcalc_constant_rho(t, 0.6)
        assert cov.matrix[0, 1] == pytest.approx(0.6 * np.sqrt(0.0740 * 0.0398))
        assert round(cov.matrix[0, 1], 3) == 0.033

    def test_rho_zero_equals_diag(self):
        t = make_table([0.1, 0.2, 0.3], [0.2, 0.3, 0.4], cluster=["a", "a", "b"])
        assert np.array_equal(vcalc_constant_rho(t, 0.0).matrix, diag_vcv(t).matrix)

    def test_singleton_clusters_stay_diagonal(self):
        t = make_table([0.1, 0.2], [0.2, 0.3], cluster=["a", "b"])
        cov = vcalc_constant_rho(t, 0.9)
        assert np.array_equal(cov.matrix, np.diag([0.2, 0.3]))

    def test_bad_rho(self):
        t = make_table([0.1], [0.2])
        for rho in (-1.0, 1.0, 1.5):
            with pytest.raises(DataError):
                vcalc_constant_rho(t, rho)

    def test_exact_symmetry_bitwise(self):
        rng = np.random.default_rng(0)
        t = make_table(rng.normal(size=9), rng.uniform(0.01, 2, 9),
                       cluster=["a"] * 4 + ["b"] * 3 + ["c"] * 2)
        m = vcalc_constant_rho(t, 0.73).matrix
        assert np.array_equal(m, m.T)

    def test_positive_definite_random_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            n = rng.integers(2, 12)
            k = rng.integers(1, n + 1)
            cluster = rng.integers(0, k, n).astype(str)
            m_max = max(np.bincount(np.unique(cluster, return_inverse=True)[1]))
            lo = -1.0 / (m_max - 1) + 1e-3 if m_max > 1 else -0.99
            rho = rng.uniform(max(lo, -0.99), 0.99)
            t = make_table(rng.normal(size=n), rng.uniform(0.01, 3, n), cluster=cluster)
            m = vcalc_constant_rho(t, rho).matrix
            assert np.linalg.eigvalsh(m)[0] > 0

    def test_invalid_negative_rho_for_large_cluster(self):
        t = make_table([0.0] * 4, [1.0] * 4, cluster=["a"] * 4)
        with pytest.raises(DataError, match="valid constant correlation"):
            vcalc_constant_rho(t, -0.5)

    def test_zero_across_clusters(self):
        t = make_table([0.0] * 4, [1.0] * 4, cluster=["a", "a", "b", "b"])
        m = vcalc_constant_rho(t, 0.5).matrix
        assert np.all(m[:2, 2:] == 0.0)
        assert np.all(m[2:, :2] == 0.0)


class TestSamplingCovariance:
    def test_asymmetric_rejected(self):
        m = np.array([[1.0, 0.5], [0.4, 1.0]])
        with pytest.raises(DataError, match="symmetric"):
            SamplingCovariance(m, ["1", "2"], {})

    def test_indefinite_rejected(self):
        m = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(DataError, match="semidefinite"):
            SamplingCovariance(m, ["1", "2"], {})

    def test_nonpositive_diagonal_rejected(self):
        with pytest.raises(DataError, match="diagonal"):
            SamplingCovariance(np.diag([1.0, 0.0]), ["1", "2"], {})

    def test_aligned_reorders(self):
        m = np.array([[1.0, 0.2], [0.2, 2.0]])
        cov = SamplingCovariance(m, ["a", "b"], {"a": (0,), "b": (1,)})
        out = cov.aligned(["b", "a"])
        assert out.matrix.tolist() == [[2.0, 0.2], [0.2, 1.0]]
        assert out.row_labels == ("b", "a")

    def test_aligned_label_mismatch(self):
        cov = SamplingCovariance(np.eye(2), ["a", "b"], {})
        with pytest.raises(DataError, match="labels"):
            cov.aligned(["a", "c"])

    def test_write_read_roundtrip_bits(self, tmp_path):
        rng = np.random.default_rng(5)
        t = make_table(rng.normal(size=6), rng.uniform(0.01, 1, 6),
                       cluster=["a", "a", "b", "b", "c", "c"])
        cov = vcalc_constant_rho(t, 0.6)
        path = tmp_path / "vcv.csv"
        write_vcv(cov, path)
        again = read_vcv(path)
        assert np.array_equal(again.matrix, cov.matrix)
        assert again.row_labels == cov.row_labels


class TestEscalc:
    def test_smd_symmetric_arms(self):
        t = escalc("SMD", {"m1": [5.0], "sd1": [2.0], "n1": [20.0],
                           "m2": [5.0], "sd2": [2.0], "n2": [20.0]})
        assert t.y[0] == 0.0
        assert t.v[0] == pytest.approx(2.0 / 20.0)

    def test_smd_hand_computed_correction(self):
        # m1=1, m2=0, sd=1, n=20 per arm: J = 1 - 3/(4*38 - 1)
        t = escalc("SMD", {"m1": [1.0], "sd1": [1.0], "n1": [20.0],
                           "m2": [0.0], "sd2": [1.0], "n2": [20.0]})
        j = 1.0 - 3.0 / (4.0 * 38.0 - 1.0)
        assert j == pytest.approx(0.9801324503311258)
        assert t.y[0] == pytest.approx(j)
        assert t.v[0] == pytest.approx(0.1 + j**2 / 80.0)

    def test_smd_d_variance_option(self):
        args = {"m1": [1.0], "sd1": [1.0], "n1": [20.0],
                "m2": [0.0], "sd2": [1.0], "n2": [20.0]}
        tg = escalc("SMD", args, smd_variance="g")
        td = escalc("SMD", args, smd_variance="d")
        assert td.v[0] == pytest.approx(0.1 + 1.0 / 80.0)
        assert td.v[0] > tg.v[0]

    def test_lnor_balanced_table(self):
        t = escalc("lnOR", {"a": [10.0], "b": [10.0], "c": [10.0], "d": [10.0]})
        assert t.y[0] == 0.0
        assert t.v[0] == pytest.approx(0.4)

    def test_lnor_antisymmetric_under_arm_swap(self):
        fwd = escalc("lnOR", {"a": [12.0], "b": [8.0], "c": [5.0], "d": [15.0]})
        rev = escalc("lnOR", {"a": [5.0], "b": [15.0], "c": [12.0], "d": [8.0]})
        assert rev.y[0] == pytest.approx(-fwd.y[0])
        assert rev.v[0] == pytest.approx(fwd.v[0])

    def test_lnirr_antisymmetric_under_arm_swap(self):
        fwd = escalc("lnIRR", {"x1": [9.0], "t1": [2.0], "x2": [4.0], "t2": [3.0]})
        rev = escalc("lnIRR", {"x1": [4.0], "t1": [3.0], "x2": [9.0], "t2": [2.0]})
        assert rev.y[0] == pytest.approx(-fwd.y[0])
        assert rev.v[0] == pytest.approx(fwd.v[0])

    def test_lnrr_requires_positive_means(self):
        with pytest.raises(DataError, match="positive"):
            escalc("lnRR", {"m1": [-1.0], "sd1": [1.0], "n1": [10.0],
                            "m2": [2.0], "sd2": [1.0], "n2": [10.0]})

    def test_lnrr_values(self):
        t = escalc("lnRR", {"m1": [4.0], "sd1": [1.0], "n1": [10.0],
                            "m2": [2.0], "sd2": [2.0], "n2": [20.0]})
        assert t.y[0] == pytest.approx(np.log(2.0))
        assert t.v[0] == pytest.approx(1.0 / (10 * 16) + 4.0 / (20 * 4))

    def test_zero_cell_requires_continuity(self):
        stats = {"a": [0.0], "b": [10.0], "c": [5.0], "d": [5.0]}
        with pytest.raises(DataError, match="continuity"):
            escalc("lnOR", stats)
        t = escalc("lnOR", stats, continuity=True)
        assert t.y[0] == pytest.approx(np.log(0.5 * 5.5 / (10.5 * 5.5)))
        assert t.moderators["continuity"][0] == 1.0

    def test_continuity_only_touches_zero_studies(self):
        stats = {"a": [0.0, 3.0], "b": [10.0, 7.0], "c": [5.0, 4.0], "d": [5.0, 6.0]}
        t = escalc("lnOR", stats, continuity=True)
        assert t.moderators["continuity"].tolist() == [1.0, 0.0]
        assert t.y[1] == pytest.approx(np.log(3 * 6 / (7 * 4)))

    def test_lnirr_zero_events(self):
        stats = {"x1": [0.0], "t1": [1.0], "x2": [2.0], "t2": [1.0]}
        with pytest.raises(DataError, match="continuity"):
            escalc("lnIRR", stats)
        t = escalc("lnIRR", stats, continuity=True)
        assert t.y[0] == pytest.approx(np.log(0.5 / 2.5))


class TestArmTable:
    def test_pairing_enforced(self):
        with pytest.raises(DataError, match="exactly one treatment"):
            ArmTable(["1", "1"], ["treatment", "treatment"], [1, 2], [10, 10])

    def test_paired_order(self):
        t = ArmTable(["b", "b", "a", "a"],
                     ["control", "treatment", "treatment", "control"],
                     [1, 2, 3, 4], [10, 10, 10, 10])
        studies, et, st, ec, sc = t.paired()
        assert studies == ("b", "a")
        assert et.tolist() == [2.0, 3.0]
        assert ec.tolist() == [1.0, 4.0]

    def test_load_arm_table(self, tmp_path):
        p = tmp_path / "arms.csv"
        p.write_text("study,arm,events,n\n1,T,3,20\n1,C,1,25\n2,t,0,30\n2,c,2,30\n")
        t = load_arm_table(p, {"study": "study", "arm": "arm",
                               "events": "events", "size": "n"})
        assert t.k == 2
        assert t.arm[0] == "treatment"

    def test_bad_arm_label(self, tmp_path):
        p = tmp_path / "arms.csv"
        p.write_text("study,arm,events,n\n1,X,3,20\n1,C,1,25\n")
        with pytest.raises(DataError, match="arm label"):
            load_arm_table(p, {"study": "study", "arm": "arm",
                               "events": "events", "size": "n"})
