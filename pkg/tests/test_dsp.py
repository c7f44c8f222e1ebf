import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asatse.dsp import (Waveform, apply_reverb, ipd, read_wav, reverb_ir, sisdr, stft, stft_geometry,
                        wrap_phase, write_wav)
from asatse.errors import InvalidArgumentError

SR = 8000


def noise(seed, n=8000):
    return Waveform(np.random.default_rng(seed).normal(size=n), SR)


def test_waveform_validation():
    assert Waveform(np.zeros(4000)).duration == 0.5
    with pytest.raises(InvalidArgumentError):
        Waveform(np.array([0.0, np.nan]))
    with pytest.raises(InvalidArgumentError):
        Waveform(np.zeros((2, 4)))


def test_stft_geometry_and_shape():
    assert stft_geometry(8000, 32, 16) == (256, 128, 256)
    spec = stft(noise(0, 8000))
    assert spec.shape == (129, (8000 - 256) // 128 + 1)
    assert np.all(stft(Waveform(np.zeros(2000))) == 0)
    with pytest.raises(InvalidArgumentError):
        stft(Waveform(np.zeros(100)))


def test_stft_sine_peaks_at_nearest_bin():
    t = np.arange(8000) / SR
    spec = np.abs(stft(Waveform(np.sin(2 * np.pi * 1000 * t))))
    peak_bin = int(np.argmax(spec.mean(axis=1)))
    assert peak_bin == round(1000 * 256 / SR)


def test_wrap_phase():
    assert wrap_phase(np.array(1.5 * np.pi)) == pytest.approx(-0.5 * np.pi)
    assert wrap_phase(np.array(np.pi)) == pytest.approx(np.pi)
    vals = wrap_phase(np.linspace(-20, 20, 101))
    assert np.all(vals > -np.pi) and np.all(vals <= np.pi)


def test_ipd_identical_channels_is_zero():
    w = noise(1)
    assert np.all(ipd(w, w) == 0)


@pytest.mark.parametrize("delay", [1, 2, 3])
def test_ipd_matches_delay_phase(delay):
    # channel 1 lags channel 2 by `delay` samples, so angle(X1) - angle(X2) = -2 pi f D / fs
    w = noise(2, 16000)
    lagged = Waveform(np.concatenate([np.zeros(delay), w.samples[:-delay]]), SR)
    spec = stft(w)
    phase = ipd(lagged, w)
    freqs = np.arange(spec.shape[0]) * SR / 256
    expected = wrap_phase(-2 * np.pi * freqs * delay / SR)[:, None]
    energy = np.abs(spec) ** 2
    strong = energy > np.median(energy)
    err = np.abs(wrap_phase(phase - expected))[strong]
    assert np.median(err) < 0.05
    # averaging over frames tightens the estimate on every bin
    mean_err = np.abs(wrap_phase(np.angle(np.exp(1j * (phase - expected)).mean(axis=1))))
    assert np.max(mean_err[1:-1]) < 0.05
    # swapping the channels flips the sign
    np.testing.assert_allclose(np.sin(ipd(w, lagged)), -np.sin(phase), atol=1e-12)


def test_ipd_errors():
    with pytest.raises(InvalidArgumentError):
        ipd(noise(0, 4000), noise(1, 4001))
    with pytest.raises(InvalidArgumentError):
        ipd(Waveform(np.zeros(4000), 8000), Waveform(np.zeros(4000), 16000))


def test_sisdr_clamps_and_scale():
    ref = noise(3).samples
    assert sisdr(ref, ref) == 60.0
    assert sisdr(3.7 * ref, ref) == 60.0
    t = np.arange(8000)
    a = np.sin(2 * np.pi * 5 * t / 8000)
    b = np.cos(2 * np.pi * 5 * t / 8000)
    assert sisdr(b, a) == -60.0
    assert sisdr(np.zeros(8000), a) == -60.0
    with pytest.raises(InvalidArgumentError):
        sisdr(a, np.zeros(8000))
    with pytest.raises(InvalidArgumentError):
        sisdr(a, a[:-1])


def test_sisdr_known_value():
    rng = np.random.default_rng(4)
    ref = rng.normal(size=4000)
    ref -= ref.mean()
    n = rng.normal(size=4000)
    n -= n.mean()
    n -= (n @ ref) / (ref @ ref) * ref  # orthogonal to the reference
    n *= math.sqrt((ref @ ref) / (n @ n)) / math.sqrt(10)  # 10 dB below
    assert sisdr(ref + n, ref) == pytest.approx(10.0, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 2**31 - 1))
def test_sisdr_scale_invariance(scale, seed):
    rng = np.random.default_rng(seed)
    ref = rng.normal(size=500)
    est = ref + rng.normal(size=500)
    assert abs(sisdr(scale * est, ref) - sisdr(est, ref)) < 1e-9


def test_reverb_identity_and_determinism():
    w = noise(5)
    assert apply_reverb(w, 0.0, seed=1) is w
    a = apply_reverb(w, 0.3, seed=9).samples
    b = apply_reverb(w, 0.3, seed=9).samples
    assert np.array_equal(a, b) and len(a) == len(w)
    with pytest.raises(InvalidArgumentError):
        apply_reverb(w, -0.1, seed=0)
    with pytest.raises(InvalidArgumentError):
        reverb_ir(1.5)


def test_reverb_impulse_response_envelope():
    imp = np.zeros(4000)
    imp[0] = 1.0
    out = apply_reverb(Waveform(imp), 0.2, seed=3).samples
    ir = reverb_ir(0.2, SR, seed=3)
    np.testing.assert_allclose(out[:len(ir)], ir, rtol=0, atol=1e-14)
    # fit the decay of the tail envelope in 10 ms frames and extrapolate to 0.2 s
    tail = out[1:len(ir)]
    frame = 80
    k = len(tail) // frame
    env_db = 10 * np.log10((tail[:k * frame].reshape(k, frame) ** 2).mean(axis=1))
    centres = (np.arange(k) * frame + frame / 2 + 1) / SR
    slope, intercept = np.polyfit(centres, env_db, 1)
    at_rt60 = slope * 0.2 + intercept
    assert slope == pytest.approx(-300.0, rel=0.1)  # -60 dB over 0.2 s
    assert at_rt60 <= -60.0
    assert np.max(np.abs(out[len(ir):])) < 1e-14


@pytest.mark.parametrize("fmt", ["float32", "pcm16"])
def test_wav_round_trip(tmp_path, fmt):
    rng = np.random.default_rng(6)
    chans = [Waveform(0.3 * rng.uniform(-1, 1, 1000)), Waveform(0.3 * rng.uniform(-1, 1, 1000))]
    path = tmp_path / "x.wav"
    write_wav(path, chans, SR, fmt)
    back, sr = read_wav(path)
    assert sr == SR and len(back) == 2
    tol = 1e-7 if fmt == "float32" else 1 / 32767
    for a, b in zip(chans, back):
        np.testing.assert_allclose(b.samples, a.samples, atol=tol)


def test_read_wav_rejects_other_formats(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"RIFF\x00\x00\x00\x00WAVEjunk")
    with pytest.raises(InvalidArgumentError):
        read_wav(path)
