import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile
from sklearn.base import clone

from melrvq.dsp import (
    AudioClip,
    DspConfig,
    InputStats,
    MelFeaturizer,
    load_mels,
    load_wav,
    mel_spectrogram,
    pool_frames,
    resample,
    save_mels,
)
from melrvq.errors import ChecksumError, FormatError, TooShortError, UnsupportedCodecError
from melrvq.synth import sine


def htk_centers(n_mels, f_lo, f_hi):
    # written out independently of melrvq.dsp
    lo = 2595.0 * np.log10(1 + f_lo / 700.0)
    hi = 2595.0 * np.log10(1 + f_hi / 700.0)
    step = (hi - lo) / (n_mels + 1)
    return [700.0 * (10 ** ((lo + step * (i + 1)) / 2595.0) - 1) for i in range(n_mels)]


def test_load_silence(tmp_path):
    path = tmp_path / "silence.wav"
    wavfile.write(path, 24000, np.zeros(24000, dtype=np.int16))
    clip = load_wav(path)
    assert clip.sample_rate_hz == 24000
    assert clip.samples.shape == (24000,)
    assert not clip.samples.any()


def test_stereo_is_averaged(tmp_path):
    path = tmp_path / "stereo.wav"
    left = np.full(1000, 0.5, dtype=np.float32)
    wavfile.write(path, 24000, np.stack([left, -left], axis=1))
    assert np.array_equal(load_wav(path).samples, np.zeros(1000))


def test_bundled_sine(data_dir):
    clip = load_wav(data_dir / "sine440.wav")
    assert clip.samples.shape == (48000,)
    assert abs(np.abs(clip.samples).max() - 0.8) < 1e-3


def test_int16_scaling(tmp_path):
    path = tmp_path / "x.wav"
    wavfile.write(path, 8000, np.array([-32768, 0, 16384], dtype=np.int16))
    np.testing.assert_array_equal(load_wav(path).samples, [-1.0, 0.0, 0.5])


def test_malformed_header(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"RIFF\x00\x00\x00\x00WAVEjunk")
    with pytest.raises(FormatError):
        load_wav(path)
    path.write_bytes(b"not a wav file at all")
    with pytest.raises(FormatError):
        load_wav(path)


@pytest.mark.parametrize("dtype", [np.uint8, np.int32, np.float64])
def test_unsupported_encoding(tmp_path, dtype):
    path = tmp_path / "odd.wav"
    wavfile.write(path, 24000, np.zeros(100, dtype=dtype))
    with pytest.raises(UnsupportedCodecError):
        load_wav(path)


def test_resample_identity():
    clip = AudioClip(np.random.default_rng(0).uniform(-1, 1, 2400), 24000)
    out = resample(clip, 24000)
    assert out.samples.tobytes() == clip.samples.tobytes()


def test_resample_dc():
    out = resample(AudioClip(np.full(48000, 0.3), 48000), 24000)
    assert np.max(np.abs(out.samples - 0.3)) <= 1e-3


@pytest.mark.parametrize("src,dst,n", [(48000, 24000, 48001), (44100, 24000, 44100), (16000, 24000, 999)])
def test_resample_length(src, dst, n):
    out = resample(AudioClip(np.zeros(n), src), dst)
    assert abs(len(out.samples) - round(n * dst / src)) <= 1
    assert out.sample_rate_hz == dst


def test_resample_keeps_pitch():
    out = resample(sine(440.0, 2.0, 48000), 24000)
    spectrum = np.abs(np.fft.rfft(out.samples))
    freqs = np.fft.rfftfreq(len(out.samples), 1 / 24000)
    assert abs(freqs[spectrum.argmax()] - 440.0) <= 2.0


def test_thirty_seconds_gives_750_frames():
    spec = mel_spectrogram(AudioClip(np.zeros(30 * 24000), 24000))
    assert spec.frames.shape == (750, 128)
    assert spec.frame_rate_hz == 25.0


def test_silence_hits_log_floor():
    spec = mel_spectrogram(AudioClip(np.zeros(24000), 24000))
    np.testing.assert_allclose(spec.frames, np.log(1e-5), rtol=0, atol=1e-12)


def test_sine_peak_bin(data_dir):
    spec = mel_spectrogram(load_wav(data_dir / "sine440.wav"))
    expected = int(np.argmin(np.abs(np.array(htk_centers(128, 0.0, 12000.0)) - 440.0)))
    assert set(spec.frames.argmax(axis=1)) == {expected}


def test_too_short():
    with pytest.raises(TooShortError):
        mel_spectrogram(AudioClip(np.zeros(1023), 24000))


def test_deterministic(corpus_clips):
    a = mel_spectrogram(corpus_clips[0]).frames
    b = mel_spectrogram(corpus_clips[0]).frames
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=0.05, max_value=12.0))
def test_frame_count_law(duration):
    n = int(round(duration * 24000))
    spec = mel_spectrogram(AudioClip(np.zeros(n), 24000))
    assert abs(spec.n_frames - n / 24000 * 25) <= 1


def test_fixture_frame_counts(corpus_clips, corpus_specs):
    for clip, spec in zip(corpus_clips, corpus_specs):
        assert abs(spec.n_frames - clip.duration_s * 25) <= 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(min_value=1.0, max_value=50.0))
def test_louder_never_lowers_log_mel(seed, gain):
    x = np.random.default_rng(seed).uniform(-0.02, 0.02, 4800)
    quiet = mel_spectrogram(AudioClip(x, 24000)).frames
    loud = mel_spectrogram(AudioClip(gain * x, 24000)).frames
    assert np.all(loud >= quiet)


def test_pooling_law(corpus_clips):
    clip = corpus_clips[1]
    base = mel_spectrogram(clip, DspConfig(pool_factor=1))
    assert base.frame_rate_hz == 100.0
    pooled = mel_spectrogram(clip, DspConfig(pool_factor=4))
    np.testing.assert_allclose(pool_frames(base.frames, 4), pooled.frames, rtol=0, atol=1e-6)


def test_mels_round_trip(tmp_path, corpus_specs):
    path = tmp_path / "a.mels"
    save_mels(corpus_specs[0], path)
    first = path.read_bytes()
    spec = load_mels(path)
    assert spec.frames.shape == corpus_specs[0].frames.shape
    np.testing.assert_array_equal(spec.frames, corpus_specs[0].frames.astype(np.float32))
    save_mels(spec, path)
    assert path.read_bytes() == first


def test_mels_corruption(tmp_path, corpus_specs):
    path = tmp_path / "a.mels"
    save_mels(corpus_specs[0], path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_mels(path)


def test_input_stats_round_trip():
    x = np.random.default_rng(1).normal(3.0, 2.0, size=(500, 6))
    stats = InputStats.fit(x)
    z = stats.standardize(x)
    np.testing.assert_allclose(z.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(0), 1, atol=1e-12)
    np.testing.assert_allclose(stats.destandardize(z), x, atol=1e-12)


def test_featurizer_estimator(corpus_clips):
    feat = MelFeaturizer(n_mels=64)
    assert clone(feat).get_params() == feat.get_params()
    feat.fit(corpus_clips[:2])
    assert feat.stats_.dim == 64
    out = feat.transform([resample(corpus_clips[0], 48000)])
    assert out[0].frames.shape == (750, 64)
