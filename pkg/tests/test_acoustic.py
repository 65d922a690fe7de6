"""WAV ingestion, F0 contour, phonation, prosody, aggregation."""

import struct

import numpy as np
import pytest

from poefuse.acoustic import (
    AcousticConfig,
    AudioClip,
    AudioError,
    FEATURE_NAMES,
    VECTOR_SIZE,
    aggregate_acoustic_vector,
    estimate_f0_contour,
    extract_acoustic_vector,
    extract_pitch_periods,
    frame_log_energy,
    phonation_metrics,
    prosody_metrics,
    read_wav,
    write_wav,
)

from conftest import SR, pulse_train_clip, silence_clip, tone_clip


class TestReadWav:
    def test_silence_roundtrip(self, tmp_path):
        path = tmp_path / "sil.wav"
        write_wav(path, silence_clip(1.0))
        clip = read_wav(path)
        assert clip.sample_rate == SR
        assert len(clip.samples) == SR
        assert np.array_equal(clip.samples, np.zeros(SR))
        assert clip.duration == 1.0

    def test_full_scale_square_wave_scaling(self, tmp_path):
        pcm = np.tile(np.array([32767, -32767], dtype="<i2"), 100)
        path = tmp_path / "sq.wav"
        import wave
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(SR)
            wf.writeframes(pcm.tobytes())
        clip = read_wav(path)
        full = 32767.0 / 32768.0
        assert np.array_equal(np.unique(clip.samples), [-full, full])

    def test_stereo_averaged_to_mono(self, tmp_path):
        import wave
        left = np.full(50, 1000, dtype="<i2")
        right = np.full(50, 3000, dtype="<i2")
        inter = np.empty(100, dtype="<i2")
        inter[0::2], inter[1::2] = left, right
        path = tmp_path / "st.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(SR)
            wf.writeframes(inter.tobytes())
        clip = read_wav(path)
        assert np.allclose(clip.samples, 2000.0 / 32768.0, atol=1e-12)

    def test_mulaw_format_rejected(self, tmp_path):
        # hand-built RIFF container with format tag 7 (mu-law)
        data = b"\x00" * 32
        fmt = struct.pack("<HHIIHH", 7, 1, 8000, 8000, 1, 8)
        body = (b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
                + b"data" + struct.pack("<I", len(data)) + data)
        path = tmp_path / "ulaw.wav"
        path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        with pytest.raises(AudioError, match="unsupported codec"):
            read_wav(path)

    def test_eight_bit_rejected(self, tmp_path):
        import wave
        path = tmp_path / "u8.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(1)
            wf.setframerate(8000)
            wf.writeframes(b"\x80" * 100)
        with pytest.raises(AudioError, match="bit depth"):
            read_wav(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "tr.wav"
        write_wav(path, tone_clip(220.0, duration=0.2))
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 1000])
        with pytest.raises(AudioError):
            read_wav(path)


class TestF0Contour:
    def test_pure_tone_all_voiced_near_nominal(self):
        f0 = estimate_f0_contour(tone_clip(220.0))
        assert np.all(f0 > 0)
        assert np.all((f0 >= 217.0) & (f0 <= 223.0))

    def test_silence_all_unvoiced(self):
        f0 = estimate_f0_contour(silence_clip(0.5))
        assert np.all(f0 == 0.0)

    def test_tone_below_range_rejected(self):
        f0 = estimate_f0_contour(tone_clip(50.0))
        assert np.all(f0 == 0.0)

    def test_clip_shorter_than_frame_rejected(self):
        with pytest.raises(AudioError, match="shorter"):
            estimate_f0_contour(AudioClip(np.zeros(100), SR))

    def test_low_sample_rate_rejected(self):
        with pytest.raises(AudioError, match="sample rate"):
            estimate_f0_contour(AudioClip(np.zeros(8000), 4000))

    def test_accuracy_sweep(self):
        # at least 95% of voiced frames within 1.5% across the speech range
        t = np.arange(SR) / SR
        for f in range(80, 351, 15):
            clip = AudioClip(0.5 * np.sin(2 * np.pi * f * t), SR)
            contour = estimate_f0_contour(clip)
            voiced = contour[contour > 0]
            assert voiced.size >= 0.9 * contour.size, f"{f} Hz undervoiced"
            frac = np.mean(np.abs(voiced - f) / f <= 0.015)
            assert frac >= 0.95, f"{f} Hz: only {frac:.2%} within 1.5%"

    def test_custom_framing_changes_frame_count(self):
        clip = tone_clip(220.0)
        default = estimate_f0_contour(clip)
        wide = estimate_f0_contour(clip, AcousticConfig(frame_s=0.08, hop_s=0.02))
        assert len(wide) < len(default)


class TestPhonation:
    def test_pure_tone_has_negligible_jitter_and_shimmer(self):
        clip = tone_clip(220.0)
        f0 = estimate_f0_contour(clip)
        periods, amps = extract_pitch_periods(clip, f0)
        m = phonation_metrics(periods, amps)
        assert m.sufficient
        assert m.jitter_pct < 0.5
        assert m.shimmer_pct < 0.5

    def test_alternating_periods_reach_twenty_percent(self):
        periods = np.array([4.5e-3, 5.5e-3] * 10)
        amps = np.ones_like(periods)
        m = phonation_metrics(periods, amps)
        assert m.jitter_pct == pytest.approx(20.0, abs=1e-9)
        assert m.shimmer_pct == 0.0

    def test_constant_amplitude_train_zero_shimmer(self):
        m = phonation_metrics(np.full(12, 5e-3), np.full(12, 0.7))
        assert m.shimmer_pct == 0.0
        assert m.jitter_pct == 0.0

    def test_alternating_amplitudes(self):
        # mean |dA| = 0.2, mean A = 0.5 -> 40%
        amps = np.array([0.4, 0.6] * 8)
        m = phonation_metrics(np.full(16, 5e-3), amps)
        assert m.shimmer_pct == pytest.approx(40.0, abs=1e-9)

    def test_insufficient_periods_flagged(self):
        m = phonation_metrics(np.array([5e-3]), np.array([0.5]))
        assert not m.sufficient
        assert m.jitter_pct == 0.0 and m.shimmer_pct == 0.0

    def test_jittered_pulse_train_end_to_end(self):
        clip = pulse_train_clip([72, 88] * 90)  # 4.5 / 5.5 ms at 16 kHz
        f0 = estimate_f0_contour(clip)
        periods, amps = extract_pitch_periods(clip, f0)
        m = phonation_metrics(periods, amps)
        assert m.jitter_pct == pytest.approx(20.0, abs=0.5)

    def test_scale_invariance(self):
        t = np.arange(SR) / SR
        base = 0.3 * np.sin(2 * np.pi * 150 * t) * (1 + 0.05 * np.sin(2 * np.pi * 3 * t))

        def measure(scale):
            clip = AudioClip(scale * base, SR)
            f0 = estimate_f0_contour(clip)
            return phonation_metrics(*extract_pitch_periods(clip, f0))

        a, b = measure(1.0), measure(2.5)
        assert a.jitter_pct == pytest.approx(b.jitter_pct, abs=1e-9)
        assert a.shimmer_pct == pytest.approx(b.shimmer_pct, abs=1e-9)


class TestProsody:
    def test_silence_is_one_big_pause(self):
        clip = silence_clip(1.0)
        f0 = estimate_f0_contour(clip)
        m = prosody_metrics(clip, f0)
        assert m.voiced_segment_count == 0
        assert m.pause_count == 1
        assert m.pause_mean_s == pytest.approx(1.0, abs=0.05)
        assert m.log_energy_mean_db == -80.0
        assert m.log_energy_std_db == 0.0

    def test_tone_silence_tone(self):
        tone = tone_clip(220.0, duration=0.5).samples
        clip = AudioClip(np.concatenate([tone, np.zeros(SR // 2), tone]), SR)
        f0 = estimate_f0_contour(clip)
        m = prosody_metrics(clip, f0)
        assert m.pause_count == 1
        assert m.pause_mean_s == pytest.approx(0.5, abs=0.011)  # one hop
        assert m.voiced_segment_count == 2

    def test_constant_tone_energy_flat(self):
        clip = tone_clip(220.0)
        f0 = estimate_f0_contour(clip)
        m = prosody_metrics(clip, f0)
        assert m.log_energy_std_db < 0.2
        assert m.pause_count == 0
        assert m.speech_rate_per_s == pytest.approx(1.0, abs=1e-9)

    def test_short_gap_is_not_a_pause(self):
        tone = tone_clip(220.0, duration=0.4).samples
        gap = np.zeros(int(0.08 * SR))  # 80 ms < 150 ms threshold
        clip = AudioClip(np.concatenate([tone, gap, tone]), SR)
        f0 = estimate_f0_contour(clip)
        assert prosody_metrics(clip, f0).pause_count == 0


class TestAggregation:
    def test_vector_layout(self):
        assert len(FEATURE_NAMES) == VECTOR_SIZE == 10

    def test_pure_tone_vector(self):
        vec, warnings = extract_acoustic_vector(tone_clip(220.0))
        assert vec.shape == (10,)
        assert warnings == []
        assert abs(vec[0] - 220.0) < 3.0  # mean F0
        assert vec[4] > 0.95  # voiced fraction
        assert vec[2] < 0.5 and vec[3] < 0.5  # jitter, shimmer
        assert vec[8] == 0.0 and vec[9] == 0.0  # no pauses

    def test_silence_vector_flags(self):
        vec, warnings = extract_acoustic_vector(silence_clip(1.0))
        assert vec[0] == 0.0 and vec[4] == 0.0
        assert len(warnings) == 2

    def test_whole_hop_shift_invariance(self):
        tone = tone_clip(220.0, duration=0.5).samples
        a = AudioClip(np.concatenate([np.zeros(int(0.2 * SR)), tone,
                                      np.zeros(int(0.3 * SR))]), SR)
        b = AudioClip(np.concatenate([np.zeros(int(0.3 * SR)), tone,
                                      np.zeros(int(0.2 * SR))]), SR)
        va, _ = extract_acoustic_vector(a)
        vb, _ = extract_acoustic_vector(b)
        assert np.max(np.abs(va - vb)) < 1e-9

    def test_deterministic_over_reruns(self, tmp_path):
        path = tmp_path / "tone.wav"
        write_wav(path, tone_clip(173.0, duration=0.7))
        v1, _ = extract_acoustic_vector(read_wav(path))
        v2, _ = extract_acoustic_vector(read_wav(path))
        assert v1.tobytes() == v2.tobytes()

    def test_all_entries_finite(self):
        for clip in (tone_clip(100.0), silence_clip(0.5),
                     pulse_train_clip([80, 80] * 40)):
            vec, _ = extract_acoustic_vector(clip)
            assert np.all(np.isfinite(vec))

    def test_aggregate_from_parts_matches_pipeline(self):
        clip = tone_clip(220.0)
        f0 = estimate_f0_contour(clip)
        phon = phonation_metrics(*extract_pitch_periods(clip, f0))
        pros = prosody_metrics(clip, f0)
        vec_parts, _ = aggregate_acoustic_vector(f0, phon, pros)
        vec_full, _ = extract_acoustic_vector(clip)
        assert np.array_equal(vec_parts, vec_full)


class TestEnergy:
    def test_floor_applied(self):
        db = frame_log_energy(silence_clip(0.5))
        assert np.all(db == -80.0)

    def test_louder_is_higher(self):
        quiet = frame_log_energy(tone_clip(220.0, amplitude=0.05))
        loud = frame_log_energy(tone_clip(220.0, amplitude=0.5))
        assert loud.mean() > quiet.mean()
