import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal

from widepth import csi
from widepth.csi import (CorruptWindowError, CsiWindow, PhaseDifferenceFeature, PreprocessConfig,
                         RawCsiWindow)
from widepth.nn import Rng


def _raw(values):
    return RawCsiWindow(np.asarray(values, np.complex128))


def _random_raw(seed, shape=(3, 3, 30, 300)):
    r = Rng(seed)
    return _raw(r.normal(shape) + 1j * r.normal(shape) + 2.0)


# reference division --------------------------------------------------------
def test_division_cancels_common_offsets():
    raw = _random_raw(0)
    psi = Rng(1).uniform(0, 2 * np.pi, raw.values.shape[1:])      # any (rx, sub, packet) offset
    off = _raw(raw.values * np.exp(1j * psi)[None])
    a = csi.reference_divide(raw).values
    b = csi.reference_divide(off).values
    assert np.max(np.abs(a - b)) / np.max(np.abs(a)) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 10))
def test_division_offset_invariance_property(seed, gain):
    raw = _random_raw(seed, (2, 2, 4, 12))
    r = Rng(seed).child("off")
    off = gain * np.exp(1j * r.uniform(0, 2 * np.pi, raw.values.shape[1:]))
    a = csi.reference_divide(raw, 0, 1).values
    b = csi.reference_divide(_raw(raw.values * off[None]), 0, 1).values
    assert np.max(np.abs(a - b)) <= 1e-9 * np.max(np.abs(a))


def test_division_identical_links_give_ones():
    v = _random_raw(2).values
    v[1] = v[0]
    out = csi.reference_divide(_raw(v))
    np.testing.assert_allclose(out.values, 1.0)
    assert out.values.shape == (300, 30, 3)
    assert out.provenance == csi.RAW


def test_division_single_entry_ratio():
    v = np.array([3 + 4j, 1 - 1j]).reshape(2, 1, 1, 1)
    out = csi.reference_divide(_raw(v)).values
    assert abs(out[0, 0, 0]) == pytest.approx(np.sqrt(2) / 5)


def test_division_rejects_zero_reference():
    v = _random_raw(3).values
    v[0, 1, 4, 7] = 0
    with pytest.raises(CorruptWindowError):
        csi.reference_divide(_raw(v))


# dynamic extraction --------------------------------------------------------
def _window(x):
    x = np.asarray(x, np.complex128)
    return CsiWindow(x.reshape(len(x), 1, 1), csi.RAW, 1000.0)


def test_constant_link_becomes_zero():
    out = csi.extract_dynamic(_window(np.full(300, 2 - 3j)))
    assert np.max(np.abs(out.values)) < 1e-12


def test_fifty_hz_passes_with_high_gain():
    t = np.arange(300) / 1000.0
    out = csi.extract_dynamic(_window(np.exp(2j * np.pi * 50 * t) + 1.5))
    amp = np.abs(out.values[:, 0, 0])
    # oracle: forward-backward first-order Butterworth magnitude squared at 50 Hz
    b, a = signal.butter(1, 2.0, btype="highpass", fs=1000.0)
    _, h = signal.freqz(b, a, worN=[50.0], fs=1000.0)
    assert abs(h[0]) ** 2 > 0.998
    assert np.median(amp) / 1.0 > 0.95
    assert amp.min() > 0.95


def test_output_has_zero_mean_per_link():
    r = Rng(4)
    x = r.normal((300, 30, 3)) + 1j * r.normal((300, 30, 3)) + 5
    out = csi.extract_dynamic(CsiWindow(x, csi.RAW)).values
    rms = np.sqrt(np.mean(np.abs(out) ** 2, axis=0))
    assert np.all(np.abs(out.mean(axis=0)) < 1e-6 * rms)


def test_savgol_reproduces_cubic():
    t = np.arange(11, dtype=float)
    cubic = 0.02 * t ** 3 - 0.3 * t ** 2 + t - 2
    y = cubic - cubic.mean()
    np.testing.assert_allclose(csi.smooth(y, 11, 3), y, atol=1e-10)
    z = y + 1j * (2 * y)
    np.testing.assert_allclose(csi.smooth(z, 11, 3), z, atol=1e-10)


def test_extract_rejects_short_window_and_wrong_provenance():
    with pytest.raises(CorruptWindowError):
        csi.extract_dynamic(_window(np.ones(10)))
    with pytest.raises(ValueError):
        csi.extract_dynamic(CsiWindow(np.ones((300, 1, 1), complex), csi.SMOOTHED))


def test_config_validation():
    with pytest.raises(ValueError):
        PreprocessConfig(sg_window=10).validate()
    with pytest.raises(ValueError):
        PreprocessConfig(sg_window=3, sg_order=3).validate()
    with pytest.raises(ValueError):
        PreprocessConfig(cutoff_hz=600).validate(1000.0)


# phase differences ---------------------------------------------------------
def test_rank_one_antenna_phase():
    theta = 0.7
    steer = np.exp(1j * theta * np.arange(3))
    r = Rng(5)
    time_sub = r.normal((300, 30)) + 1j * r.normal((300, 30))
    v = time_sub[:, :, None] * steer[None, None, :]
    feat = csi.phase_differences(CsiWindow(v, csi.SMOOTHED))
    np.testing.assert_allclose(np.angle(feat.antenna), -theta, atol=1e-6)


def test_all_ones_gives_zero_phase():
    feat = csi.phase_differences(CsiWindow(np.ones((300, 30, 3), complex), csi.SMOOTHED))
    for z in (feat.antenna, feat.subcarrier):
        assert np.all(z.real > 0)
        np.testing.assert_allclose(np.angle(z), 0.0, atol=1e-12)


def test_principal_vector_matches_gram_eigenvector():
    r = Rng(6)
    m = r.normal((3, 9000)) + 1j * r.normal((3, 9000))
    m[0] *= 3.0
    u = csi.principal_vector(m)
    w, vecs = np.linalg.eigh(m @ m.conj().T)
    oracle = vecs[:, np.argmax(w)]
    assert abs(np.vdot(oracle, u)) > 1 - 1e-8


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100), st.floats(-np.pi, np.pi))
def test_phase_features_scale_invariant(seed, mag, ang):
    r = Rng(seed)
    v = r.normal((100, 30, 3)) + 1j * r.normal((100, 30, 3))
    v[..., 0] *= 2.0     # separate the leading singular value from the rest
    a = csi.phase_differences(CsiWindow(v, csi.SMOOTHED))
    b = csi.phase_differences(CsiWindow(v * mag * np.exp(1j * ang), csi.SMOOTHED))
    np.testing.assert_allclose(a.as_real(), b.as_real(), atol=1e-6)


def test_phase_feature_lengths_and_magnitudes():
    r = Rng(7)
    v = r.normal((300, 30, 3)) + 1j * r.normal((300, 30, 3))
    f = csi.phase_differences(CsiWindow(v, csi.SMOOTHED))
    assert f.antenna.shape == (2,) and f.subcarrier.shape == (29,)
    assert np.all(np.abs(f.antenna) <= 1) and np.all(np.abs(f.subcarrier) <= 1)
    vec = f.as_real()
    assert vec.shape == (62,) and vec.dtype == np.float32
    back = PhaseDifferenceFeature.from_real(vec)
    np.testing.assert_allclose(back.antenna, f.antenna, atol=1e-6)


def test_phase_of_zero_window_rejected():
    with pytest.raises(CorruptWindowError):
        csi.phase_differences(CsiWindow(np.zeros((300, 30, 3), complex), csi.SMOOTHED))


def test_svd_failure_reports_diagnostics():
    m = np.full((3, 4), np.nan + 0j)
    with pytest.raises(CorruptWindowError, match="finite=False"):
        csi.principal_vector(m)


# full window and file format -------------------------------------------------
def test_preprocess_shapes():
    tensor, feat = csi.preprocess_window(_random_raw(8))
    assert tensor.shape == (2, 300, 30, 3) and tensor.dtype == np.float32
    assert feat.as_real().shape == (62,)


def test_raw_record_round_trip(tmp_path):
    raw = _random_raw(9, (3, 3, 30, 20))
    raw.t_start = 1.25
    p = tmp_path / "w.wcsi"
    csi.write_raw(p, raw)
    assert p.stat().st_size == csi.record_size(3, 3, 30, 20)
    back = csi.read_raw(p)
    np.testing.assert_allclose(back.values, raw.values.astype(np.complex64), rtol=1e-6)
    assert back.t_start == 1.25 and back.sample_rate == 1000.0
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CorruptWindowError):
        csi.read_raw(p)
