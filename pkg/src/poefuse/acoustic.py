"""Phonation and prosody features from PCM WAV audio.

The pipeline is classical frame-based analysis:

1. 40 ms frames every 10 ms; per-frame normalized autocorrelation gives an
   F0 estimate (parabolic peak interpolation for sub-sample lag accuracy)
   and a voicing decision against a normalized-peak threshold.
2. Pitch marks are picked period-synchronously inside voiced stretches of
   the waveform; consecutive mark spacings and interpolated peak amplitudes
   feed jitter and shimmer.
3. Frame log-energies (floored at -80 dB) drive pause detection: maximal
   unvoiced low-energy runs lasting at least 150 ms.

Everything aggregates into a fixed 10-dimensional summary vector. All
steps are pure functions of the samples, so identical files give
bit-identical vectors.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VECTOR_SIZE = 10
FEATURE_NAMES = (
    "f0_mean_hz",
    "f0_std_hz",
    "jitter_pct",
    "shimmer_pct",
    "voiced_fraction",
    "log_energy_mean_db",
    "log_energy_std_db",
    "speech_rate_per_s",
    "pause_mean_s",
    "pause_rate_per_s",
)


class AudioError(Exception):
    """Unsupported or unreadable audio input."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray  # mono, float64 in [-1, 1]
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class AcousticConfig:
    frame_s: float = 0.040
    hop_s: float = 0.010
    f0_min_hz: float = 60.0
    f0_max_hz: float = 400.0
    voicing_threshold: float = 0.3  # on the normalized autocorrelation peak
    pause_min_s: float = 0.150
    energy_floor_db: float = -80.0
    silence_abs_db: float = -60.0
    silence_rel_db: float = 30.0  # below the loudest frame
    peak_pick_threshold: float = 0.4  # of the voiced stretch maximum

    def frame_len(self, sample_rate: int) -> int:
        return int(round(self.frame_s * sample_rate))

    def hop_len(self, sample_rate: int) -> int:
        return int(round(self.hop_s * sample_rate))


# ---------------------------------------------------------------------------
# WAV ingestion
# ---------------------------------------------------------------------------

def read_wav(path) -> AudioClip:
    """Load 16-bit PCM WAV; stereo is averaged to mono, samples scale to
    [-1, 1] by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            nframes = wf.getnframes()
            raw = wf.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        raise AudioError(f"{path.name}: unsupported codec or corrupt file ({exc})") from None
    if width != 2:
        raise AudioError(f"{path.name}: unsupported bit depth {8 * width}, expected 16")
    if channels not in (1, 2):
        raise AudioError(f"{path.name}: unsupported channel count {channels}")
    if len(raw) < nframes * width * channels:
        raise AudioError(f"{path.name}: truncated data chunk "
                         f"({len(raw)} bytes for {nframes} frames)")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        data = data.reshape(-1, 2).mean(axis=1)
    return AudioClip(samples=data, sample_rate=rate)


def write_wav(path, clip: AudioClip) -> None:
    """Inverse helper (16-bit PCM mono), mainly for synthesizing fixtures."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Framing, F0 contour, energy
# ---------------------------------------------------------------------------

def _frames(clip: AudioClip, config: AcousticConfig) -> np.ndarray:
    frame = config.frame_len(clip.sample_rate)
    hop = config.hop_len(clip.sample_rate)
    if len(clip.samples) < frame:
        raise AudioError(f"clip of {len(clip.samples)} samples is shorter than "
                         f"one {frame}-sample frame")
    n = 1 + (len(clip.samples) - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    return clip.samples[idx]


def _parabolic_vertex(ym1: float, y0: float, yp1: float) -> tuple[float, float]:
    """Vertex offset in [-0.5, 0.5] and value of the parabola through three
    equally spaced points centered on the middle one."""
    denom = ym1 - 2.0 * y0 + yp1
    if denom == 0.0:
        return 0.0, y0
    delta = 0.5 * (ym1 - yp1) / denom
    delta = float(np.clip(delta, -0.5, 0.5))
    value = y0 - 0.25 * (ym1 - yp1) * delta
    return delta, value


def estimate_f0_contour(clip: AudioClip, config: AcousticConfig = AcousticConfig()
                        ) -> np.ndarray:
    """Per-frame F0 in Hz, 0.0 for unvoiced frames.

    A frame is voiced when the normalized autocorrelation has an interior
    local maximum above the voicing threshold inside the configured lag
    range; the lag is refined by parabolic interpolation.
    """
    if clip.sample_rate < 8000:
        raise AudioError(f"sample rate {clip.sample_rate} too low, need >= 8000")
    sr = clip.sample_rate
    frames = _frames(clip, config)
    frames = frames - frames.mean(axis=1, keepdims=True)
    frame = frames.shape[1]

    nfft = 1 << int(np.ceil(np.log2(2 * frame)))
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    acf = np.fft.irfft(spec.real ** 2 + spec.imag ** 2, n=nfft, axis=1)[:, :frame]
    # The raw autocorrelation carries a 1 - lag/N taper. Peak *selection*
    # keeps it (it favors the fundamental over its multiples), but the
    # taper tilts each peak toward smaller lags, so the sub-sample vertex
    # is interpolated on taper-corrected values.
    taper_fix = frame / (frame - np.arange(frame, dtype=np.float64))

    lag_min = max(2, int(np.ceil(sr / config.f0_max_hz)))
    lag_max = min(frame - 2, int(np.floor(sr / config.f0_min_hz)))
    f0 = np.zeros(frames.shape[0])
    if lag_max <= lag_min:
        return f0
    for i in range(frames.shape[0]):
        r0 = acf[i, 0]
        if r0 <= 1e-12:
            continue  # silent frame
        r = acf[i] / r0
        window = r[lag_min:lag_max + 1]
        left = r[lag_min - 1:lag_max]
        right = r[lag_min + 1:lag_max + 2]
        peaks = np.nonzero((window > left) & (window >= right))[0]
        if peaks.size == 0:
            continue
        best = peaks[np.argmax(window[peaks])]
        lag = best + lag_min
        if r[lag] < config.voicing_threshold:
            continue
        c = r[lag - 1:lag + 2] * taper_fix[lag - 1:lag + 2]
        delta, _ = _parabolic_vertex(c[0], c[1], c[2])
        candidate = sr / (lag + delta)
        if config.f0_min_hz <= candidate <= config.f0_max_hz:
            f0[i] = candidate
    return f0


def frame_log_energy(clip: AudioClip, config: AcousticConfig = AcousticConfig()
                     ) -> np.ndarray:
    """Per-frame energy in dB, floored at the configured -80 dB."""
    frames = _frames(clip, config)
    energy = np.mean(frames ** 2, axis=1)
    db = 10.0 * np.log10(np.maximum(energy, 1e-300))
    return np.maximum(db, config.energy_floor_db)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal (start, length) runs of True."""
    runs = []
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i - start))
            start = None
    if start is not None:
        runs.append((start, len(mask) - start))
    return runs


# ---------------------------------------------------------------------------
# Phonation: pitch periods, jitter, shimmer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhonationMetrics:
    jitter_pct: float
    shimmer_pct: float
    sufficient: bool  # enough consecutive voiced periods to measure


def extract_pitch_periods(clip: AudioClip, f0: np.ndarray,
                          config: AcousticConfig = AcousticConfig()
                          ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per voiced stretch: consecutive pitch periods (seconds) and the
    interpolated waveform peak amplitude closing each period.

    Pitch marks are waveform peaks at least half a minimum period apart and
    above a fraction of the stretch maximum; sub-sample positions come from
    parabolic interpolation, which keeps quantization out of the jitter.
    """
    sr = clip.sample_rate
    hop = config.hop_len(sr)
    frame = config.frame_len(sr)
    min_sep = max(2, int(round(0.5 * sr / config.f0_max_hz)))
    period_lo = 0.5 / config.f0_max_hz
    period_hi = 2.0 / config.f0_min_hz

    all_periods: list[np.ndarray] = []
    all_amps: list[np.ndarray] = []
    for start_frame, length in _runs(f0 > 0):
        lo = start_frame * hop
        hi = min(len(clip.samples), (start_frame + length - 1) * hop + frame)
        seg = clip.samples[lo:hi]
        if seg.size < 3:
            continue
        if seg.max() < -seg.min():
            seg = -seg  # analyze the dominant polarity
        threshold = config.peak_pick_threshold * seg.max()
        if threshold <= 0:
            continue
        interior = seg[1:-1]
        cand = np.nonzero((interior > seg[:-2]) & (interior >= seg[2:])
                          & (interior >= threshold))[0] + 1
        marks_t, marks_a = [], []
        last = -min_sep
        for p in cand:
            if p - last < min_sep:
                continue
            last = p
            delta, amp = _parabolic_vertex(seg[p - 1], seg[p], seg[p + 1])
            marks_t.append(p + delta)
            marks_a.append(amp)
        if len(marks_t) < 2:
            continue
        periods = np.diff(marks_t) / sr
        amps = np.asarray(marks_a[1:])
        valid = (periods >= period_lo) & (periods <= period_hi)
        for vstart, vlen in _runs(valid):
            if vlen >= 1:
                all_periods.append(periods[vstart:vstart + vlen])
                all_amps.append(amps[vstart:vstart + vlen])
    return all_periods, all_amps


def _as_run_list(values) -> list[np.ndarray]:
    if len(values) and np.isscalar(values[0]):
        return [np.asarray(values, dtype=np.float64)]
    return [np.asarray(v, dtype=np.float64) for v in values]


def phonation_metrics(periods, amplitudes) -> PhonationMetrics:
    """Jitter: mean absolute difference of consecutive pitch periods over
    the mean period, in percent. Shimmer: the same statistic on per-period
    peak amplitudes. Inputs are flat arrays or lists of per-stretch arrays;
    differences never straddle stretch boundaries.

    With fewer than two consecutive periods anywhere, both metrics are
    reported as 0 with ``sufficient=False``.
    """
    period_runs = _as_run_list(periods)
    amp_runs = _as_run_list(amplitudes)
    t_all = np.concatenate(period_runs) if period_runs else np.zeros(0)
    a_all = np.concatenate(amp_runs) if amp_runs else np.zeros(0)
    dt = [np.abs(np.diff(run)) for run in period_runs if run.size >= 2]
    da = [np.abs(np.diff(run)) for run in amp_runs if run.size >= 2]
    if not dt or t_all.size < 2 or np.mean(t_all) <= 0:
        return PhonationMetrics(0.0, 0.0, sufficient=False)
    jitter = 100.0 * float(np.mean(np.concatenate(dt))) / float(np.mean(t_all))
    if not da or a_all.size < 2 or np.mean(a_all) <= 0:
        return PhonationMetrics(jitter, 0.0, sufficient=False)
    shimmer = 100.0 * float(np.mean(np.concatenate(da))) / float(np.mean(a_all))
    return PhonationMetrics(jitter, shimmer, sufficient=True)


# ---------------------------------------------------------------------------
# Prosody: energy, pauses, speech rate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProsodyMetrics:
    log_energy_mean_db: float
    log_energy_std_db: float
    voiced_fraction: float
    voiced_segment_count: int
    speech_rate_per_s: float
    pause_count: int
    pause_mean_s: float
    pause_rate_per_s: float


def prosody_metrics(clip: AudioClip, f0: np.ndarray,
                    config: AcousticConfig = AcousticConfig()) -> ProsodyMetrics:
    """Frame energy statistics, pause statistics, and a speech-rate proxy
    (voiced segment count per second).

    A pause is a maximal run of frames that are unvoiced and quiet (below
    the absolute silence level or far enough below the loudest frame),
    lasting at least ``pause_min_s``. A run of n frames spans
    (n-1)*hop + frame seconds.
    """
    energy_db = frame_log_energy(clip, config)
    n = len(energy_db)
    quiet = energy_db <= max(config.silence_abs_db,
                             float(energy_db.max()) - config.silence_rel_db)
    pause_frame = (f0 <= 0) & quiet

    frame_s = config.frame_len(clip.sample_rate) / clip.sample_rate
    hop_s = config.hop_len(clip.sample_rate) / clip.sample_rate
    durations = []
    for _, length in _runs(pause_frame):
        span = (length - 1) * hop_s + frame_s
        if span >= config.pause_min_s:
            durations.append(span)

    voiced_runs = _runs(f0 > 0)
    duration = clip.duration
    return ProsodyMetrics(
        log_energy_mean_db=float(energy_db.mean()),
        log_energy_std_db=float(energy_db.std()),
        voiced_fraction=float(np.count_nonzero(f0 > 0)) / n,
        voiced_segment_count=len(voiced_runs),
        speech_rate_per_s=len(voiced_runs) / duration,
        pause_count=len(durations),
        pause_mean_s=float(np.mean(durations)) if durations else 0.0,
        pause_rate_per_s=len(durations) / duration,
    )


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def aggregate_acoustic_vector(f0: np.ndarray, phonation: PhonationMetrics,
                              prosody: ProsodyMetrics) -> tuple[np.ndarray, list[str]]:
    """Assemble the 10 summary statistics in FEATURE_NAMES order. Metrics
    that could not be measured come back as zeros plus a warning."""
    warnings = []
    voiced = f0[f0 > 0]
    if voiced.size:
        f0_mean = float(voiced.mean())
        f0_std = float(voiced.std())
    else:
        f0_mean = f0_std = 0.0
        warnings.append("no voiced frames; F0 statistics zeroed")
    if not phonation.sufficient:
        warnings.append("insufficient consecutive voiced periods; "
                        "jitter/shimmer zeroed")
    vector = np.array([
        f0_mean,
        f0_std,
        phonation.jitter_pct,
        phonation.shimmer_pct,
        prosody.voiced_fraction,
        prosody.log_energy_mean_db,
        prosody.log_energy_std_db,
        prosody.speech_rate_per_s,
        prosody.pause_mean_s,
        prosody.pause_rate_per_s,
    ])
    return vector, warnings


def extract_acoustic_vector(clip: AudioClip,
                            config: AcousticConfig = AcousticConfig()
                            ) -> tuple[np.ndarray, list[str]]:
    """Full pipeline: contour, pitch periods, prosody, aggregation."""
    f0 = estimate_f0_contour(clip, config)
    periods, amps = extract_pitch_periods(clip, f0, config)
    phonation = phonation_metrics(periods, amps)
    prosody = prosody_metrics(clip, f0, config)
    return aggregate_acoustic_vector(f0, phonation, prosody)
