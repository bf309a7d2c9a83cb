"""Round-trip tests for chain persistence and summaries."""

import numpy as np
import pytest

from mixinv import chainio
from mixinv.exceptions import DataError


@pytest.fixture()
def chain_file(tmp_path):
    rng = np.random.default_rng(0)
    n = 30
    states = rng.standard_normal((n, 4))
    logp = rng.standard_normal(n)
    logp[0] = -np.inf  # stage-1 draws may carry zero density
    sig = np.abs(rng.standard_normal(n))
    sig[0] = np.nan
    meta = {
        "q": 3,
        "n_par": 2,
        "a_scale": 1.0,
        "b_scale": 1.0,
        "d_scale": 100.0,
        "stage_marks": (0, 10, 20),
        "acceptance": (1.0, 0.25, 0.5),
        "config_digest": "sha256:deadbeef",
    }
    path = tmp_path / "chain.csv"
    chainio.write_chain(path, states, logp, sig, meta)
    return path, states, logp, sig


class TestRoundTrip:
    def test_exact_float_round_trip(self, chain_file):
        path, states, logp, sig = chain_file
        rec = chainio.read_chain(path)
        np.testing.assert_array_equal(rec.m, states[:, :3])
        np.testing.assert_array_equal(rec.t, states[:, 3])
        np.testing.assert_array_equal(rec.log_density, logp)
        np.testing.assert_array_equal(rec.sigma_max_sq[1:], sig[1:])
        assert np.isnan(rec.sigma_max_sq[0])
        assert rec.log_density[0] == -np.inf

    def test_stage_assignment(self, chain_file):
        path, *_ = chain_file
        rec = chainio.read_chain(path)
        assert list(np.unique(rec.stage)) == [1, 2, 3]
        assert rec.stage[0] == 1 and rec.stage[10] == 2 and rec.stage[20] == 3

    def test_meta_preserved(self, chain_file):
        path, *_ = chain_file
        rec = chainio.read_chain(path)
        assert rec.meta["config_digest"] == "sha256:deadbeef"
        assert rec.meta["stage_marks"] == [0, 10, 20]
        np.testing.assert_array_equal(rec.scales, [1.0, 1.0, 100.0])

    def test_missing_header_field(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("# mixinv-chain v1\n# q=3\nindex,stage\n")
        with pytest.raises(DataError):
            chainio.read_chain(bad)


class TestSummarize:
    def test_std_matches_sample_covariance(self, chain_file):
        path, states, *_ = chain_file
        rec = chainio.read_chain(path)
        rep = chainio.summarize(rec, stage=3)
        stage3 = states[20:]
        coords = np.column_stack([stage3[:, :3] * [1.0, 1.0, 100.0], stage3[:, 3]])
        expected_std = np.sqrt(np.diag(np.cov(coords.T, ddof=1)))
        for key, value in zip(("a", "b", "d", "log10_c"), expected_std):
            assert rep.std[key] == pytest.approx(value, rel=1e-12)

    def test_empty_stage_is_error(self, chain_file):
        path, *_ = chain_file
        rec = chainio.read_chain(path)
        with pytest.raises(DataError):
            chainio.summarize(rec, stage=7)

    def test_series_columns(self, chain_file, tmp_path):
        path, *_ = chain_file
        rec = chainio.read_chain(path)
        series = tmp_path / "series.csv"
        chainio.write_series(series, rec)
        lines = series.read_text().splitlines()
        assert lines[0].split(",")[:3] == ["index", "stage", "log10_density"]
        assert len(lines) == 1 + rec.n_samples
