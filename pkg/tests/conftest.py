"""Shared builders for synthetic records, rosters, and audio fixtures."""

from __future__ import annotations

import numpy as np
import pytest

from poefuse.acoustic import AudioClip
from poefuse.datamodel import FeatureRecord, build_manifest

DIMS = (4, 3, 10)  # d_s, d_t, d_a used by most fixtures


def make_record(i: int, language: str, gender: str, label: str,
                rng: np.random.Generator, dims=DIMS,
                participant: str | None = None, mmse: float | None = None
                ) -> FeatureRecord:
    d_s, d_t, d_a = dims
    sid = f"rec-{i:04d}"
    return FeatureRecord(
        sample_id=sid,
        participant_id=participant or sid,
        language=language,
        gender=gender,
        age=60.0 + (i % 30),
        label=label,
        mmse=mmse if mmse is not None else 18.0 + (i % 12),
        speech_vec=rng.standard_normal(d_s),
        text_vec=rng.standard_normal(d_t),
        acoustic_vec=rng.standard_normal(d_a),
    )


def clinical_roster(dims=DIMS, seed: int = 7) -> list[FeatureRecord]:
    """387 records with the reference study's marginals: English 123 F /
    63 M and 123 MCI / 63 NC; Chinese 114 F / 87 M and 99 MCI / 102 NC."""
    rng = np.random.default_rng(seed)
    records = []
    i = 0
    for language, genders, labels in (
        ("en", ("f",) * 123 + ("m",) * 63, ("mci",) * 123 + ("nc",) * 63),
        ("zh", ("f",) * 114 + ("m",) * 87, ("mci",) * 99 + ("nc",) * 102),
    ):
        for gender, label in zip(genders, labels):
            records.append(make_record(i, language, gender, label, rng, dims))
            i += 1
    return records


@pytest.fixture(scope="session")
def roster387():
    return clinical_roster()


def roster_manifest(records, dims=DIMS):
    return build_manifest(records, *dims)


SR = 16000


def tone_clip(freq: float, duration: float = 1.0, sr: int = SR,
              amplitude: float = 0.5) -> AudioClip:
    t = np.arange(int(round(duration * sr))) / sr
    return AudioClip(samples=amplitude * np.sin(2 * np.pi * freq * t), sample_rate=sr)


def silence_clip(duration: float = 1.0, sr: int = SR) -> AudioClip:
    return AudioClip(samples=np.zeros(int(round(duration * sr))), sample_rate=sr)


def pulse_train_clip(intervals_samples: list[int], sr: int = SR,
                     amplitude: float = 0.8, tail: int = 100) -> AudioClip:
    """Impulses separated by the given sample counts (cycled)."""
    marks = np.cumsum([0] + intervals_samples)
    samples = np.zeros(marks[-1] + tail)
    samples[marks] = amplitude
    return AudioClip(samples=samples, sample_rate=sr)
