"""Deterministic synthetic music used as a desk-scale corpus.

Each clip repeats a short melodic motif on a harmonic instrument over a bass
drone, with percussive noise bursts on a beat grid. Motifs repeat, so masked
stretches are predictable from context, which is what masked-token training
needs to have anything to learn.
"""

import numpy as np

from .dsp import AudioClip

PENTATONIC = np.array([0, 2, 4, 7, 9])


def sine(freq_hz, seconds, sample_rate_hz=24000, amplitude=0.8, phase=0.0):
    t = np.arange(int(round(seconds * sample_rate_hz))) / sample_rate_hz
    return AudioClip(amplitude * np.sin(2 * np.pi * freq_hz * t + phase), sample_rate_hz)


def _tone(f0, n, sr, harmonics, rng):
    t = np.arange(n) / sr
    vibrato = 1 + 0.003 * np.sin(2 * np.pi * rng.uniform(4, 6) * t)
    phase = 2 * np.pi * f0 * np.cumsum(vibrato) / sr
    tone = sum(a * np.sin((h + 1) * phase) for h, a in enumerate(harmonics) if (h + 1) * f0 < sr / 2)
    attack = min(n, int(0.02 * sr))
    env = np.exp(-np.arange(n) / (0.6 * n + 1)) * 0.8 + 0.2
    env[:attack] *= np.linspace(0, 1, attack)
    env[-attack:] *= np.linspace(1, 0, attack)
    return tone * env


def synth_clip(seed, seconds=30.0, sample_rate_hz=24000):
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate_hz))
    out = np.zeros(n)
    root = 110.0 * 2 ** (rng.integers(0, 12) / 12)
    harmonics = rng.uniform(0.1, 1.0, size=int(rng.integers(3, 9)))
    harmonics /= np.arange(1, harmonics.size + 1) ** rng.uniform(0.5, 1.5)
    motif = [(int(rng.choice(PENTATONIC) + 12 * rng.integers(1, 3)), float(rng.choice([0.4, 0.6, 0.8, 1.2])))
             for _ in range(int(rng.integers(4, 8)))]
    pos = 0
    while pos < n:
        for semitone, dur in motif:
            if rng.random() < 0.1:
                semitone += int(rng.choice([-2, 2]))
            length = min(int(dur * sample_rate_hz), n - pos)
            if length <= 0:
                break
            out[pos:pos + length] += _tone(root * 2 ** (semitone / 12), length, sample_rate_hz, harmonics, rng)
            pos += length
    drone = _tone(root / 2, n, sample_rate_hz, [1.0, 0.5, 0.25], rng) * 0.3
    out += drone
    beat = int(rng.choice([0.4, 0.5, 0.6]) * sample_rate_hz)
    burst = int(0.05 * sample_rate_hz)
    decay = np.exp(-np.arange(burst) / (0.01 * sample_rate_hz))
    for start in range(0, n - burst, beat):
        out[start:start + burst] += 0.5 * rng.standard_normal(burst) * decay
    out += 0.003 * rng.standard_normal(n)
    out *= 0.9 / max(1e-9, np.abs(out).max())
    return AudioClip(out, sample_rate_hz)


def synth_corpus(n_clips=20, seconds=30.0, seed=0, sample_rate_hz=24000):
    """``n_clips`` clips; the defaults give ten minutes of audio."""
    return [synth_clip(seed * 100003 + i, seconds, sample_rate_hz) for i in range(n_clips)]
