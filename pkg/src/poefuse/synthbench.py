"""Synthetic spurious-correlation benchmark.

Records get three feature blocks. The core modality carries the label as a
pair of Gaussian clusters whose overlap (noise_sigma) caps attainable
accuracy. The shortcut modality is a much tighter cluster pair that agrees
with the label only with probability rho: rho_train on the training split,
rho_test on the test split. The remaining modality is pure noise. Training
with rho_train near 1 and testing at rho_test = 0.5 measures how much a
model leans on the shortcut: anything it learned from the shortcut block is
worthless out of distribution.

The ablation trains two models that differ only in whether expert heads are
enabled, and reports their out-of-distribution accuracy gap per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import INDEX_TO_LABEL
from .datamodel import DatasetManifest, FeatureRecord, build_manifest
from .poe import MODALITIES, PoEConfig, build_bundle, predict_batch, train_classification

# Cluster geometry: class centers sit 2.0 apart in every informative block;
# the shortcut block's spread is a quarter of the core's, so the shortcut is
# the easier signal whenever it is available.
CLUSTER_SEPARATION = 2.0
SHORTCUT_NOISE_RATIO = 0.25

_MODALITY_DIM_ATTR = {"s": "d_s", "t": "d_t", "a": "d_a"}


@dataclass(frozen=True)
class ShortcutSpec:
    n_train: int = 2000
    n_test: int = 2000
    d_s: int = 6
    d_t: int = 6
    d_a: int = 6
    core_modality: str = "s"
    shortcut_modality: str = "t"
    train_corr: float = 0.9
    test_corr: float = 0.5
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.core_modality not in MODALITIES or self.shortcut_modality not in MODALITIES:
            raise ValueError(f"modalities must be among {MODALITIES}")
        if self.core_modality == self.shortcut_modality:
            raise ValueError("core and shortcut modalities must differ")
        for name in ("d_s", "d_t", "d_a"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("train_corr", "test_corr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.n_train <= 0 or self.n_test <= 0:
            raise ValueError("n_train and n_test must be positive")

    def dim(self, modality: str) -> int:
        return getattr(self, _MODALITY_DIM_ATTR[modality])


def class_center(class_index: int, dim: int) -> np.ndarray:
    """Cluster center for a class: +/- half the separation along the
    all-ones direction, scaled so center distance is dim-independent."""
    sign = 1.0 if class_index == 0 else -1.0
    return np.full(dim, sign * (CLUSTER_SEPARATION / 2.0) / np.sqrt(dim))


def _split(spec: ShortcutSpec, n: int, corr: float, prefix: str,
           rng: np.random.Generator) -> list[FeatureRecord]:
    labels = np.tile([0, 1], (n + 1) // 2)[:n]
    labels = labels[rng.permutation(n)]
    aligned = rng.random(n) < corr

    blocks = {}
    for modality in MODALITIES:
        d = spec.dim(modality)
        noise = rng.standard_normal((n, d))
        if modality == spec.core_modality:
            centers = np.stack([class_center(y, d) for y in labels])
            blocks[modality] = centers + spec.noise_sigma * noise
        elif modality == spec.shortcut_modality:
            cluster = np.where(aligned, labels, 1 - labels)
            centers = np.stack([class_center(c, d) for c in cluster])
            blocks[modality] = centers + SHORTCUT_NOISE_RATIO * spec.noise_sigma * noise
        else:
            blocks[modality] = noise

    records = []
    for i in range(n):
        y = int(labels[i])
        records.append(FeatureRecord(
            sample_id=f"{prefix}-{i:05d}",
            participant_id=f"{prefix}-{i:05d}",
            language="en" if i % 2 == 0 else "zh",
            gender="f" if (i // 2) % 2 == 0 else "m",
            age=70.0,
            label=INDEX_TO_LABEL[y],
            mmse=26.0 if y == 0 else 29.0,
            speech_vec=blocks["s"][i],
            text_vec=blocks["t"][i],
            acoustic_vec=blocks["a"][i],
        ))
    return records


def generate_shortcut_dataset(spec: ShortcutSpec) -> tuple[DatasetManifest, DatasetManifest]:
    """Train and test manifests; identical distributions except the
    shortcut-label correlation. Byte-reproducible for a fixed seed."""
    rng = np.random.default_rng(spec.seed)
    train = _split(spec, spec.n_train, spec.train_corr, "train", rng)
    test = _split(spec, spec.n_test, spec.test_corr, "test", rng)
    dims = (spec.d_s, spec.d_t, spec.d_a)
    return (build_manifest(train, *dims), build_manifest(test, *dims))


def shortcut_alignment(manifest: DatasetManifest, spec: ShortcutSpec) -> np.ndarray:
    """Recover, per record, whether the shortcut block sits in the cluster
    matching the label (nearest-center rule; reliable because the shortcut
    clusters are tight)."""
    from . import LABEL_TO_INDEX
    from .poe import MODALITY_FIELDS

    d = spec.dim(spec.shortcut_modality)
    c0 = class_center(0, d)
    c1 = class_center(1, d)
    out = np.zeros(len(manifest.records), dtype=bool)
    for i, rec in enumerate(manifest.records):
        x = rec.vector(MODALITY_FIELDS[spec.shortcut_modality])
        cluster = 0 if np.sum((x - c0) ** 2) <= np.sum((x - c1) ** 2) else 1
        out[i] = LABEL_TO_INDEX[rec.label] == cluster
    return out


# ---------------------------------------------------------------------------
# PoE-vs-plain ablation
# ---------------------------------------------------------------------------

def default_benchmark_config() -> PoEConfig:
    """Desk-scale trainer settings: high learning rate, narrow heads, few
    epochs, so one run takes seconds instead of the production defaults."""
    return PoEConfig(experts_enabled=MODALITIES, epochs=6, lr=1e-2,
                     weight_decay=0.01, batch_size=32, hidden_dim=16, seed=0)


@dataclass
class AblationResult:
    spec: ShortcutSpec
    seeds: list[int]
    per_seed: dict[int, dict[str, float]]
    mean_poe_acc: float
    mean_nopoe_acc: float
    mean_delta: float

    def to_dict(self) -> dict:
        return {
            "spec": {
                "n_train": self.spec.n_train, "n_test": self.spec.n_test,
                "d_s": self.spec.d_s, "d_t": self.spec.d_t, "d_a": self.spec.d_a,
                "core_modality": self.spec.core_modality,
                "shortcut_modality": self.spec.shortcut_modality,
                "train_corr": self.spec.train_corr, "test_corr": self.spec.test_corr,
                "noise_sigma": self.spec.noise_sigma, "seed": self.spec.seed,
            },
            "seeds": self.seeds,
            "per_seed": {str(s): self.per_seed[s] for s in self.seeds},
            "mean_poe_acc": self.mean_poe_acc,
            "mean_nopoe_acc": self.mean_nopoe_acc,
            "mean_delta": self.mean_delta,
        }


def _accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(preds == labels))


def run_ablation_seed(spec: ShortcutSpec, config: PoEConfig, seed: int,
                      experts: tuple[str, ...]) -> dict[str, float]:
    """Train the PoE and the plain model on one seeded dataset and score
    both on the out-of-distribution test split."""
    from . import LABEL_TO_INDEX
    from .evaluation import f1_score

    train_m, test_m = generate_shortcut_dataset(replace(spec, seed=seed))
    labels = np.array([LABEL_TO_INDEX[r.label] for r in test_m.records])
    out: dict[str, float] = {}
    for tag, enabled in (("poe", experts), ("nopoe", ())):
        bundle = build_bundle(spec.d_s, spec.d_t, spec.d_a,
                              hidden_dim=config.hidden_dim, seed=seed)
        cfg = replace(config, experts_enabled=enabled, seed=seed)
        train_classification(bundle, list(train_m.records), cfg)
        probs = predict_batch(bundle, list(test_m.records))
        preds = np.argmax(probs, axis=1)
        out[f"{tag}_acc"] = _accuracy(preds, labels)
        out[f"{tag}_f1"] = f1_score(preds, labels)
    out["delta_acc"] = out["poe_acc"] - out["nopoe_acc"]
    return out


def _run_ablation_seed_packed(args) -> tuple[int, dict[str, float]]:
    spec, config, seed, experts = args
    return seed, run_ablation_seed(spec, config, seed, experts)


def run_poe_ablation(spec: ShortcutSpec, config: PoEConfig | None = None,
                     n_seeds: int = 10, experts: tuple[str, ...] | None = None,
                     jobs: int = 1) -> AblationResult:
    """Per-seed and mean out-of-distribution deltas between the PoE model
    and the plain model.

    The PoE arm defaults to enabling just the shortcut modality's expert:
    at this scale, an expert sitting on the core signal absorbs it and
    starves the fused head of gradient, which masks the mitigation effect
    being measured. Pass ``experts`` to ablate other subsets. Seeds run
    independently; the aggregation is a mean over the sorted seed list, so
    results do not depend on ``jobs``.
    """
    if config is None:
        config = default_benchmark_config()
    if experts is None:
        experts = (spec.shortcut_modality,)
    seeds = sorted(spec.seed + i for i in range(n_seeds))
    args = [(spec, config, s, experts) for s in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            pairs = list(pool.map(_run_ablation_seed_packed, args))
    else:
        pairs = [_run_ablation_seed_packed(a) for a in args]
    per_seed = dict(pairs)
    poe = float(np.mean([per_seed[s]["poe_acc"] for s in seeds]))
    nopoe = float(np.mean([per_seed[s]["nopoe_acc"] for s in seeds]))
    return AblationResult(spec=spec, seeds=seeds, per_seed=per_seed,
                          mean_poe_acc=poe, mean_nopoe_acc=nopoe,
                          mean_delta=poe - nopoe)


# ---------------------------------------------------------------------------
# Small synthetic sets for exercising the evaluation harness
# ---------------------------------------------------------------------------

def generate_separable_dataset(n: int = 120, d_s: int = 4, d_t: int = 3,
                               d_a: int = 3, seed: int = 0,
                               margin: float = 3.0) -> DatasetManifest:
    """Labels are a wide-margin threshold on the first speech feature;
    every other coordinate is noise. Any sane trainer reaches F1 = UAR = 1."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        y = i % 2
        xs = rng.uniform(-0.5, 0.5, size=d_s)
        xs[0] = (margin if y == 0 else -margin) + rng.uniform(-0.5, 0.5)
        records.append(FeatureRecord(
            sample_id=f"sep-{i:04d}", participant_id=f"sep-{i:04d}",
            language="en" if i % 2 == 0 else "zh",
            gender="f" if (i // 2) % 2 == 0 else "m",
            age=70.0, label=INDEX_TO_LABEL[y], mmse=26.0 if y == 0 else 29.0,
            speech_vec=xs,
            text_vec=rng.uniform(-0.5, 0.5, size=d_t),
            acoustic_vec=rng.uniform(-0.5, 0.5, size=d_a),
        ))
    return build_manifest(records, d_s, d_t, d_a)


def generate_linear_regression_dataset(n: int = 120, d_s: int = 4, d_t: int = 3,
                                       d_a: int = 3, seed: int = 0) -> DatasetManifest:
    """Targets are an exact linear function of the features, kept inside
    the valid MMSE range, so a linear head can drive RMSE to ~0."""
    rng = np.random.default_rng(seed)
    d_all = d_s + d_t + d_a
    weights = rng.uniform(-1.0, 1.0, size=d_all)
    weights *= 6.0 / np.sum(np.abs(weights))
    records = []
    for i in range(n):
        x = rng.uniform(-1.0, 1.0, size=d_all)
        mmse = 21.0 + float(weights @ x)
        records.append(FeatureRecord(
            sample_id=f"lin-{i:04d}", participant_id=f"lin-{i:04d}",
            language="en" if i % 2 == 0 else "zh",
            gender="f" if (i // 2) % 2 == 0 else "m",
            age=70.0, label="mci" if i % 2 == 0 else "nc", mmse=mmse,
            speech_vec=x[:d_s],
            text_vec=x[d_s:d_s + d_t],
            acoustic_vec=x[d_s + d_t:],
        ))
    return build_manifest(records, d_s, d_t, d_a)
