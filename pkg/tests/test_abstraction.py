import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from dlsim.abstraction import (FadingSample, LutDigestWarning, LutFormatError, MiesmParams,
                               SnrCqiMap, bicm_mi, build_lut, build_mi_table, build_snr_cqi_map,
                               calibrate_alphas, default_alpha_grid, default_mi_table, eesm,
                               fit_alphas, lut_load, lut_save, mi_inverse, miesm, miesm_masked,
                               prediction_loss, sinr_to_cqi, threshold_crossing)
from dlsim.linksim import BlerCurve, BlerPoint, constellation


def mi_monte_carlo(m, snr_db, n=1_000_000, seed=0):
    """BICM MI by direct sampling of the exact bit posteriors."""
    rng = np.random.default_rng(seed)
    pts = constellation(m)
    nv = 10 ** (-snr_db / 10)
    lab = rng.integers(0, 2 ** m, n)
    y = pts[lab] + rng.normal(0, math.sqrt(nv / 2), (n, 2)) @ np.array([1, 1j])
    total = 0.0
    chunk = 100_000
    bits = np.array([[(v >> (m - 1 - j)) & 1 for j in range(m)] for v in range(2 ** m)])
    for s in range(0, n, chunk):
        yy, ll = y[s:s + chunk], lab[s:s + chunk]
        metric = -np.abs(yy[:, None] - pts[None, :]) ** 2 / nv
        full = logsumexp(metric, axis=1)
        for j in range(m):
            same = bits[:, j][None, :] == bits[ll, j][:, None]
            sub = logsumexp(np.where(same, metric, -np.inf), axis=1)
            total += np.sum(full - sub) / math.log(2)
    return m - total / n


@pytest.mark.parametrize("m,snr", [(2, -3.0), (2, 3.0), (4, 5.0), (4, 12.0), (6, 10.0),
                                   (6, 18.0)])
def test_bicm_mi_against_monte_carlo(m, snr):
    assert bicm_mi(m, snr) == pytest.approx(mi_monte_carlo(m, snr), abs=0.01)


@pytest.mark.parametrize("m", [2, 4, 6])
def test_mi_table_shape(m):
    t = default_mi_table(m)
    assert t.snr_db[0] == -30.0 and t.snr_db[-1] == 40.0
    assert t.spacing == pytest.approx(0.1)
    assert t.mi[0] == 0.0 and t.mi[-1] == m
    assert np.all(np.diff(t.mi) >= 0)
    assert 0 < t.mi_at(0.0) < m
    with pytest.raises(ValueError):
        build_mi_table(m, (-10.0, 40.0, 0.1))


def test_mi_inverse_round_trip():
    t = default_mi_table(4)
    for s in (-5.0, 0.0, 7.3, 15.0):
        assert mi_inverse(t, float(t.mi_at(s))) == pytest.approx(s, abs=1e-6)
    for bad in (0.0, 4.0, -1.0):
        with pytest.raises(ValueError):
            mi_inverse(t, bad)


def miesm_oracle(sinr_db, m, a1=1.0, a2=1.0):
    """Bisection inverse of the quadrature MI, no table involved."""
    x = np.asarray(sinr_db) - 10 * math.log10(a2)
    target = float(np.mean(bicm_mi(m, x)))
    lo, hi = -30.0, 40.0
    for _ in range(60):
        mid = (lo + hi) / 2
        if bicm_mi(m, mid) < target:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2 + 10 * math.log10(a1)


@pytest.mark.parametrize("m", [2, 4, 6])
def test_miesm_against_direct_oracle(m):
    rng = np.random.default_rng(m)
    for _ in range(5):
        s = rng.uniform(-5, 20, 12)
        for a1, a2 in ((1.0, 1.0), (1.5, 0.8)):
            got = miesm(s, MiesmParams(a1, a2), default_mi_table(m))
            assert got == pytest.approx(miesm_oracle(s, m, a1, a2), abs=0.02)


def test_miesm_identity_and_bounds_examples():
    t = default_mi_table(2)
    assert miesm([4.2] * 6, MiesmParams(), t) == pytest.approx(4.2, abs=1e-12)
    v = miesm([0.0, 10.0], MiesmParams(), t)
    assert 0.0 < v < 10.0
    with pytest.raises(ValueError):
        miesm([], MiesmParams(), t)
    with pytest.raises(ValueError):
        MiesmParams(0.0, 1.0)


def test_miesm_masked_rows_and_empty_mask():
    t = default_mi_table(4)
    x = np.array([[1.0, 5.0, 9.0], [3.0, 3.0, 3.0]])
    mask = np.array([[True, False, True], [False, False, False]])
    out = miesm_masked(x, t, mask=mask)
    assert out[0] == pytest.approx(miesm([1.0, 9.0], MiesmParams(), t))
    assert np.isnan(out[1])


def eesm_oracle(sinr_db, beta):
    g = 10 ** (np.asarray(sinr_db) / 10)
    return 10 * math.log10(-beta * math.log(np.mean(np.exp(-g / beta))))


def test_eesm_against_formula():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = rng.uniform(-5, 10, 8)
        beta = rng.uniform(0.5, 5)
        assert eesm(s, beta) == pytest.approx(eesm_oracle(s, beta), abs=1e-9)
    # stable where exp(-g) underflows: the weaker RB dominates, mean -> 1/2
    assert eesm([60.0, 61.0], 1.0) == pytest.approx(10 * math.log10(1e6 + math.log(2)), abs=1e-9)
    with pytest.raises(ValueError):
        eesm([1.0], 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-20, 35), min_size=1, max_size=20),
       st.floats(0.25, 4.0), st.sampled_from([2, 4, 6]))
def test_mapping_properties(xs, beta, m):
    t = default_mi_table(m)
    lo, hi = min(xs), max(xs)
    for f in (lambda v: miesm(v, MiesmParams(), t), lambda v: eesm(v, beta)):
        y = f(xs)
        assert lo - 1e-9 <= y <= hi + 1e-9
        assert f(list(reversed(xs))) == pytest.approx(y, abs=1e-12)
        assert f([v + 1.0 for v in xs]) >= y - 1e-9


def test_threshold_golden():
    pts = (BlerPoint(0.0, 0.2, 100, 20), BlerPoint(1.0, 0.05, 100, 5))
    assert threshold_crossing(BlerCurve(1, pts)) == pytest.approx(0.5)


def test_threshold_zero_neighbour_and_never_crossing():
    pts = (BlerPoint(0.0, 0.5, 100, 50), BlerPoint(1.0, 0.0, 100, 0))
    # floored at half an error: 0.005
    expected = (math.log10(0.1) - math.log10(0.5)) / (math.log10(0.005) - math.log10(0.5))
    assert threshold_crossing(BlerCurve(1, pts)) == pytest.approx(expected)
    flat = (BlerPoint(0.0, 0.5, 100, 50), BlerPoint(1.0, 0.4, 100, 40))
    with pytest.raises(ValueError, match="CQI 3"):
        threshold_crossing(BlerCurve(3, flat))


def test_snr_cqi_map(synth_curves):
    mp = build_snr_cqi_map(synth_curves)
    thr = [s for _, s in mp.thresholds]
    assert np.allclose(np.diff(thr), 1.9, atol=0.05)
    assert sinr_to_cqi(mp, thr[0] - 0.01) == 0
    assert sinr_to_cqi(mp, thr[0]) == 1
    assert sinr_to_cqi(mp, thr[6]) == 7
    assert sinr_to_cqi(mp, 100.0) == 15
    assert mp.threshold(15) == thr[-1]
    assert np.isnan(mp.snr_for_cqi(0))
    with pytest.raises(ValueError):
        SnrCqiMap(((1, 0.0), (2, 0.0)))


def _fading_samples(curve, m, a_true, n=150, seed=0):
    """Samples whose BLER follows MIESM with the given alphas exactly."""
    rng = np.random.default_rng(seed)
    t = default_mi_table(m)
    out = []
    base = threshold_crossing(curve)
    for _ in range(n):
        s = base + rng.normal(0, 4, 8) + rng.uniform(-2, 2)
        eff = miesm(s, MiesmParams(a_true, a_true), t)
        out.append(FadingSample(tuple(s), float(curve.bler_at(eff))))
    return out


def test_fit_alphas_matches_exhaustive_oracle(synth_curves):
    curve = synth_curves[6]
    t = default_mi_table(4)
    samples = _fading_samples(curve, 4, 1.6)
    grid = 2.0 ** np.linspace(-1, 1, 9)
    got = fit_alphas(curve, t, samples, grid)
    losses = {(a1, a2): prediction_loss(curve, t, samples, a1, a2) for a1 in grid for a2 in grid}
    best = min(losses.values())
    assert losses[(got.alpha1, got.alpha2)] == pytest.approx(best, rel=1e-9, abs=1e-15)


def test_fit_alphas_recovers_generating_value(synth_curves):
    curve = synth_curves[2]
    t = default_mi_table(2)
    got = fit_alphas(curve, t, _fading_samples(curve, 2, 2.0, seed=1))
    assert got.alpha1 == pytest.approx(2.0, rel=0.08)
    assert got.alpha2 == pytest.approx(2.0, rel=0.08)


def test_fit_alphas_flat_samples_give_identity(synth_curves):
    s = [FadingSample((3.0,) * 4, 0.2), FadingSample((5.0,) * 4, 0.01)]
    assert fit_alphas(synth_curves[0], default_mi_table(2), s) == MiesmParams(1.0, 1.0)
    with pytest.raises(ValueError):
        fit_alphas(synth_curves[0], default_mi_table(2), [])


def test_alpha_grid_contains_one():
    g = default_alpha_grid()
    assert np.min(np.abs(g - 1.0)) < 1e-12
    assert g[0] == 0.25 and g[-1] == 4.0


def test_calibrate_alphas(synth_curves):
    samples = {7: _fading_samples(synth_curves[6], 4, 1.0, n=40)}
    out = calibrate_alphas(synth_curves, samples, grid=[0.5, 1.0, 2.0])
    assert out == {7: MiesmParams(1.0, 1.0)}
    with pytest.raises(ValueError):
        calibrate_alphas(synth_curves[:3], {9: samples[7]})


def test_lut_round_trip(tmp_path, synth_curves):
    lut = build_lut(synth_curves, 0.1, seed=7, config_digest="abc",
                    alphas={c: MiesmParams(1.25, 0.75) for c in range(1, 16)})
    p = tmp_path / "lut.txt"
    lut_save(lut, p)
    back = lut_load(p)
    assert back == lut
    text = p.read_text()
    assert text.startswith("dlsim-lut 1\n")
    assert "[thresholds]" in text and "[alphas]" in text and "[mi 6]" in text


def test_lut_version_digest_and_malformed(tmp_path, synth_lut):
    p = tmp_path / "lut.txt"
    lut_save(synth_lut, p)
    text = p.read_text()
    p.write_text(text.replace("dlsim-lut 1", "dlsim-lut 2", 1))
    with pytest.raises(LutFormatError, match="version"):
        lut_load(p)
    p.write_text(text.replace("[alphas]\ncqi,alpha1,alpha2\n1,1.0,1.0",
                              "[alphas]\ncqi,alpha1,alpha2\n1,1.0,2.0"))
    with pytest.warns(LutDigestWarning):
        assert lut_load(p).params(1) == MiesmParams(1.0, 2.0)
    p.write_text(text.replace("[end]\n", ""))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LutDigestWarning)
        with pytest.raises(LutFormatError):
            lut_load(p)
    p.write_text("hello\n")
    with pytest.raises(LutFormatError):
        lut_load(p)
