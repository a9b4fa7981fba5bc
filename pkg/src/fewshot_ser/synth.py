"""Synthetic audio generators.

Stand-in corpus so the whole pipeline runs without any licensed audio:
silence is near-zero noise, neutral is a flat-prosody harmonic voice, and
the emotion corpus is a parametric voice where each emotion occupies a
disjoint range of pitch-slope and syllable-rate values. "Languages" differ
by base formant frequencies; per-clip speaker and noise nuisances make
few-shot learning from scratch genuinely hard.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import (
    TARGET_RATE,
    FeatureClip,
    MfccConfig,
    Waveform,
    cepstral_mean_normalize,
    mfcc,
)

FIXED_LABELS = ("silence", "neutral")
EMOTIONS = ("fear", "disgust", "happiness", "anger", "sadness")

# counts per emotion shaped after the EmoFilm language totals (341/410/356)
TABLE1_SHAPED_COUNTS = {
    "syn_a": {"fear": 72, "disgust": 50, "happiness": 69, "anger": 76, "sadness": 74},
    "syn_b": {"fear": 83, "disgust": 68, "happiness": 93, "anger": 73, "sadness": 93},
    "syn_c": {"fear": 63, "disgust": 50, "happiness": 76, "anger": 82, "sadness": 85},
}

# per-emotion prosody parameter ranges; pitch slope (Hz/s) and syllable
# rate (Hz) are pairwise disjoint across emotions by construction
EMOTION_PARAMS = {
    "anger": dict(slope=(45.0, 60.0), tempo=(5.5, 6.4), jitter=(0.030, 0.050), tilt=(1.2, 1.5)),
    "happiness": dict(slope=(20.0, 35.0), tempo=(4.0, 5.0), jitter=(0.015, 0.025), tilt=(1.4, 1.7)),
    "fear": dict(slope=(5.0, 15.0), tempo=(6.6, 7.5), jitter=(0.040, 0.060), tilt=(1.6, 1.9)),
    "disgust": dict(slope=(-28.0, -16.0), tempo=(2.6, 3.4), jitter=(0.010, 0.020), tilt=(2.0, 2.3)),
    # sadness sits deliberately close to the flat-prosody neutral voice: a
    # shallow pitch fall, slow amplitude drift, and near-neutral spectral
    # tilt make the sadness/neutral boundary hard to place from a few shots
    "sadness": dict(slope=(-10.0, -3.0), tempo=(0.5, 1.2), jitter=(0.002, 0.008), tilt=(1.9, 2.3)),
}

# base formant frequencies (Hz) per synthetic language
LANGUAGE_FORMANTS = {
    "syn_a": (500.0, 1500.0, 2500.0),
    "syn_b": (560.0, 1650.0, 2700.0),
    "syn_c": (440.0, 1350.0, 2300.0),
}
DEFAULT_FORMANTS = (500.0, 1500.0, 2500.0)

MAX_HARMONICS = 25


@dataclass(frozen=True)
class CorpusSpec:
    """Recipe for a synthetic emotion corpus."""

    languages: tuple = tuple(TABLE1_SHAPED_COUNTS)
    emotions: tuple = EMOTIONS
    clips_per_emotion: object = None  # int, {emotion: n}, or {lang: {emotion: n}}
    seed: int = 0
    clip_seconds: float = 3.5
    clip_seconds_std: float = 0.3
    mfcc_config: MfccConfig = field(default_factory=MfccConfig)
    # cepstral mean normalization is applied at batch assembly, not here,
    # so raw per-clip spectral statistics stay inspectable
    apply_cmn: bool = False

    def counts_for(self, language: str) -> dict:
        c = self.clips_per_emotion
        if c is None:
            if language in TABLE1_SHAPED_COUNTS:
                return {e: TABLE1_SHAPED_COUNTS[language][e] for e in self.emotions}
            raise ValueError(f"no default counts for language {language!r}")
        if isinstance(c, int):
            return {e: c for e in self.emotions}
        if language in c and isinstance(c[language], dict):
            return {e: c[language][e] for e in self.emotions}
        return {e: c[e] for e in self.emotions}


def _draw_duration(rng, mean, std, min_s=0.20):
    return max(min_s, rng.normal(mean, std))


def synth_silence(duration: float | None = None, rng=None) -> Waveform:
    """Near-zero Gaussian noise (sigma = 1e-4)."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if duration is None:
        duration = _draw_duration(rng, 3.5, 0.3)
    if duration <= 0.030:
        raise ValueError("duration must exceed one analysis frame")
    n = int(round(duration * TARGET_RATE))
    samples = np.clip(rng.normal(0.0, 1e-4, n), -1.0, 1.0)
    return Waveform(samples, TARGET_RATE)


def _formant_gain(freqs, formants, bandwidths=(90.0, 120.0, 160.0), floor=0.3):
    freqs = np.asarray(freqs, dtype=np.float64)
    gain = np.full_like(freqs, floor)
    for f0, bw in zip(formants, bandwidths):
        gain = gain + 1.0 / (1.0 + ((freqs - f0) / bw) ** 2)
    return gain


def _smooth_noise(rng, n, cutoff_samples):
    raw = rng.normal(0.0, 1.0, n)
    kernel = np.ones(cutoff_samples) / cutoff_samples
    sm = np.convolve(raw, kernel, mode="same")
    denom = np.max(np.abs(sm))
    return sm / denom if denom > 0 else sm


def _voiced(
    rng,
    duration,
    f0_base,
    slope=0.0,
    jitter=0.0,
    tempo=0.0,
    tilt=2.0,
    formants=DEFAULT_FORMANTS,
    noise_level=0.0,
    rms=0.15,
):
    """Harmonic voice: pitch contour, jitter, syllabic AM, formant shaping."""
    n = int(round(duration * TARGET_RATE))
    t = np.arange(n) / TARGET_RATE
    f0 = f0_base + slope * t
    if jitter > 0:
        f0 = f0 * (1.0 + jitter * _smooth_noise(rng, n, cutoff_samples=320))
    f0 = np.clip(f0, 60.0, 400.0)
    phase = 2.0 * np.pi * np.cumsum(f0) / TARGET_RATE
    n_harm = min(MAX_HARMONICS, int((TARGET_RATE / 2 - 100) // max(f0.max(), 1.0)))
    k = np.arange(1, n_harm + 1)
    amp = k ** (-float(tilt)) * _formant_gain(k * float(np.mean(f0)), formants)
    sig = (amp[:, None] * np.sin(np.outer(k, phase))).sum(axis=0)
    if tempo > 0:
        am_phase = rng.uniform(0.0, 2.0 * np.pi)
        sig = sig * (1.0 - 0.6 * 0.5 * (1.0 - np.cos(2.0 * np.pi * tempo * t + am_phase)))
    # attack/decay envelope
    edge = max(1, int(0.02 * TARGET_RATE))
    env = np.ones(n)
    env[:edge] = np.linspace(0.0, 1.0, edge)
    env[-edge:] = np.linspace(1.0, 0.0, edge)
    sig = sig * env
    if noise_level > 0:
        sig = sig + rng.normal(0.0, noise_level, n)
    cur = np.sqrt(np.mean(sig**2))
    if cur > 0:
        sig = sig * (rms / cur)
    peak = np.max(np.abs(sig))
    if peak > 0.95:
        sig = sig * (0.95 / peak)
    return Waveform(sig, TARGET_RATE)


def synth_neutral(duration: float | None = None, rng=None) -> Waveform:
    """Flat-prosody voice: constant 120 Hz pitch, fixed formants."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if duration is None:
        duration = _draw_duration(rng, 3.5, 0.3)
    return _voiced(rng, duration, f0_base=120.0, tilt=2.0, rms=0.15)


def _emotion_clip(rng, emotion, language, duration):
    p = EMOTION_PARAMS[emotion]
    formants = np.array(LANGUAGE_FORMANTS.get(language, DEFAULT_FORMANTS))
    # speaker/channel nuisances, independent of the emotion label
    formants = formants * rng.uniform(0.85, 1.20)
    f0_base = rng.uniform(95.0, 150.0)
    noise_level = rng.uniform(0.005, 0.03)
    rms = rng.uniform(0.08, 0.25)
    return _voiced(
        rng,
        duration,
        f0_base=f0_base,
        slope=rng.uniform(*p["slope"]),
        jitter=rng.uniform(*p["jitter"]),
        tempo=rng.uniform(*p["tempo"]),
        tilt=rng.uniform(*p["tilt"]),
        formants=formants,
        noise_level=noise_level,
        rms=rms,
    )


def _to_clip(wave_in, emotion, language, source_id, cfg, apply_cmn):
    coeffs = mfcc(wave_in, cfg)
    if apply_cmn:
        coeffs = cepstral_mean_normalize(coeffs)
    return FeatureClip(coeffs, emotion=emotion, language=language, source_id=source_id)


def synth_emotion_corpus(spec: CorpusSpec) -> list[FeatureClip]:
    """Deterministic synthetic corpus of MFCC feature clips."""
    if len(spec.emotions) < 2:
        raise ValueError("need at least two emotions")
    if len(spec.languages) < 1:
        raise ValueError("need at least one language")
    rng = np.random.default_rng(spec.seed)
    clips = []
    for language in spec.languages:
        counts = spec.counts_for(language)
        for emotion in spec.emotions:
            for i in range(counts[emotion]):
                duration = _draw_duration(rng, spec.clip_seconds, spec.clip_seconds_std)
                w = _emotion_clip(rng, emotion, language, duration)
                clips.append(
                    _to_clip(
                        w,
                        emotion,
                        language,
                        f"{language}/{emotion}/{i:04d}",
                        spec.mfcc_config,
                        spec.apply_cmn,
                    )
                )
    return clips


def synth_fixed_pool(
    n_per_class: int,
    seed: int = 0,
    clip_seconds: float = 3.5,
    clip_seconds_std: float = 0.3,
    mfcc_config: MfccConfig | None = None,
    apply_cmn: bool = False,
) -> list[FeatureClip]:
    """Shared silence/neutral clips (language-neutral, tagged 'shared')."""
    cfg = mfcc_config or MfccConfig()
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n_per_class):
        d = _draw_duration(rng, clip_seconds, clip_seconds_std)
        w = synth_silence(d, rng)
        clips.append(_to_clip(w, "silence", "shared", f"shared/silence/{i:04d}", cfg, apply_cmn))
    for i in range(n_per_class):
        d = _draw_duration(rng, clip_seconds, clip_seconds_std)
        w = synth_neutral(d, rng)
        clips.append(_to_clip(w, "neutral", "shared", f"shared/neutral/{i:04d}", cfg, apply_cmn))
    return clips


def synth_waveform(emotion: str, language: str, duration: float, rng) -> Waveform:
    """Single raw waveform for a label; used when writing WAV corpora."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if emotion == "silence":
        return synth_silence(duration, rng)
    if emotion == "neutral":
        return synth_neutral(duration, rng)
    return _emotion_clip(rng, emotion, language, duration)
