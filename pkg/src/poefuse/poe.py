"""Product-of-experts fusion of a multi-feature head with per-modality
expert heads.

The multi-feature head scores the concatenation [speech; text; acoustic].
During training its log-distribution is summed with the log-distributions
of the enabled single-modality experts and renormalized; the cross-entropy
loss is taken on that combined distribution. Samples an expert already
predicts confidently and correctly contribute less gradient, so the
multi-feature head is pushed towards signals no single modality explains
away. At inference only the multi-feature head is consulted.

Expert heads and the multi-feature head share no parameters, so the
combined loss automatically treats expert outputs as constants when
differentiating the multi-feature head (and vice versa); the
``detach_experts_from_multi`` flag records that contract and would only
change behaviour if heads ever grew a shared trunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import LABEL_TO_INDEX
from .datamodel import FeatureRecord
from .nn import (
    DenseNet,
    dense_net,
    load_checkpoint,
    log_softmax,
    log_softmax_backward,
    make_optimizer,
    save_checkpoint,
    softmax,
)

MODALITIES = ("s", "t", "a")
MODALITY_FIELDS = {"s": "speech_vec", "t": "text_vec", "a": "acoustic_vec"}

MMSE_RANGE = (0.0, 30.0)


@dataclass(frozen=True)
class PoEConfig:
    """Training hyperparameters and expert wiring."""

    experts_enabled: tuple[str, ...] = ("s", "t", "a")
    detach_experts_from_multi: bool = True
    epochs: int = 10
    lr: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 16
    seed: int = 0
    task: str = "classification"  # "classification" | "regression"
    regression_uses_poe: bool = False
    hidden_dim: int = 256
    optimizer: str = "adam"  # "adam" | "sgd"
    clamp_regression: bool = False

    def __post_init__(self):
        object.__setattr__(self, "experts_enabled", tuple(self.experts_enabled))
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        bad = [m for m in self.experts_enabled if m not in MODALITIES]
        if bad or len(set(self.experts_enabled)) != len(self.experts_enabled):
            raise ValueError(f"experts_enabled must be a subset of {MODALITIES}")
        if self.regression_uses_poe:
            raise ValueError("product-of-experts regression is not supported; "
                             "regression always trains the plain fusion head")

    def with_seed(self, seed: int) -> "PoEConfig":
        return replace(self, seed=seed)


@dataclass
class ModelBundle:
    """The multi-feature head, the three expert heads, and the regression
    head, all sized from the manifest dims."""

    d_s: int
    d_t: int
    d_a: int
    ffn_m: DenseNet
    ffn_s: DenseNet
    ffn_t: DenseNet
    ffn_a: DenseNet
    reg_head: DenseNet

    def expert(self, modality: str) -> DenseNet:
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        return {"s": self.ffn_s, "t": self.ffn_t, "a": self.ffn_a}[modality]

    def nets(self) -> dict[str, DenseNet]:
        return {"ffn_m": self.ffn_m, "ffn_s": self.ffn_s, "ffn_t": self.ffn_t,
                "ffn_a": self.ffn_a, "reg_head": self.reg_head}


def build_bundle(d_s: int, d_t: int, d_a: int, hidden_dim: int = 256,
                 seed: int = 0) -> ModelBundle:
    """Fresh bundle with seeded Glorot init. ``hidden_dim=0`` gives purely
    linear heads (handy for closed-form checks)."""
    ss = np.random.SeedSequence(seed)
    streams = [np.random.default_rng(child) for child in ss.spawn(5)]
    d_all = d_s + d_t + d_a

    def head(in_dim, out_dim, rng):
        dims = [in_dim, out_dim] if hidden_dim == 0 else [in_dim, hidden_dim, out_dim]
        return dense_net(dims, rng)

    return ModelBundle(
        d_s=d_s, d_t=d_t, d_a=d_a,
        ffn_m=head(d_all, 2, streams[0]),
        ffn_s=head(d_s, 2, streams[1]),
        ffn_t=head(d_t, 2, streams[2]),
        ffn_a=head(d_a, 2, streams[3]),
        reg_head=head(d_all, 1, streams[4]),
    )


# ---------------------------------------------------------------------------
# Forward paths
# ---------------------------------------------------------------------------

def concat_features(rec: FeatureRecord) -> np.ndarray:
    """Fixed fusion order: [speech; text; acoustic]."""
    return np.concatenate([rec.speech_vec, rec.text_vec, rec.acoustic_vec])


def multi_forward(bundle: ModelBundle, rec: FeatureRecord) -> np.ndarray:
    """Logits (dim 2) of the multi-feature head on one record."""
    y, _ = bundle.ffn_m.forward(concat_features(rec))
    return y


def expert_forward(bundle: ModelBundle, rec: FeatureRecord, modality: str,
                   config: PoEConfig | None = None) -> np.ndarray:
    """Logits (dim 2) of one modality's expert head."""
    if config is not None and modality not in config.experts_enabled:
        raise ValueError(f"expert {modality!r} is disabled in this configuration")
    x = rec.vector(MODALITY_FIELDS[modality])
    y, _ = bundle.expert(modality).forward(x)
    return y


def poe_combine(z_m: np.ndarray, expert_logits: Sequence[np.ndarray] = ()) -> np.ndarray:
    """Combine logits into one log-distribution: normalize each head's
    logits, sum the log-distributions, renormalize. This is the log-space
    element-wise product of the expert distributions.

    With no experts the result is exactly log_softmax(z_m) (a second
    normalization would only add float noise).
    """
    z_m = np.asarray(z_m, dtype=np.float64)
    if not np.all(np.isfinite(z_m)):
        raise ValueError("non-finite logits")
    combined = log_softmax(z_m)
    if not expert_logits:
        return combined
    for z_u in expert_logits:
        z_u = np.asarray(z_u, dtype=np.float64)
        if not np.all(np.isfinite(z_u)):
            raise ValueError("non-finite logits")
        combined = combined + log_softmax(z_u)
    return log_softmax(combined)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    bundle: ModelBundle
    trace: list[tuple[int, int, float]]  # (epoch, batch, mean batch loss)
    epoch_losses: list[float]


@dataclass
class _Batch:
    xs: np.ndarray
    xt: np.ndarray
    xa: np.ndarray
    xcat: np.ndarray
    y: np.ndarray | None  # class indices (classification)
    targets: np.ndarray | None  # mmse (regression)


def _stack(records: Sequence[FeatureRecord], bundle: ModelBundle,
           need_labels: bool) -> _Batch:
    if not records:
        raise ValueError("empty record set")
    xs = np.stack([r.speech_vec for r in records])
    xt = np.stack([r.text_vec for r in records])
    xa = np.stack([r.acoustic_vec for r in records])
    dims = (xs.shape[1], xt.shape[1], xa.shape[1])
    if dims != (bundle.d_s, bundle.d_t, bundle.d_a):
        raise ValueError(f"record dims {dims} do not match bundle "
                         f"({bundle.d_s}, {bundle.d_t}, {bundle.d_a})")
    xcat = np.concatenate([xs, xt, xa], axis=1)
    y = np.array([LABEL_TO_INDEX[r.label] for r in records]) if need_labels else None
    targets = np.array([r.mmse for r in records], dtype=np.float64)
    return _Batch(xs=xs, xt=xt, xa=xa, xcat=xcat, y=y, targets=targets)


def _expert_input(batch: _Batch, modality: str) -> np.ndarray:
    return {"s": batch.xs, "t": batch.xt, "a": batch.xa}[modality]


def classification_loss_and_grads(bundle: ModelBundle, batch: _Batch,
                                  experts: tuple[str, ...],
                                  expert_logdists: dict[str, np.ndarray] | None = None,
                                  ) -> tuple[float, dict[str, list[np.ndarray]]]:
    """Mean combined-loss over a batch plus gradients per trained head.

    ``expert_logdists`` substitutes precomputed (frozen) expert
    log-distributions; the multi-head gradient must be bit-identical either
    way, which is the stop-gradient contract.
    """
    n = batch.xcat.shape[0]
    z_m, tape_m = bundle.ffn_m.forward(batch.xcat)
    lm = log_softmax(z_m)
    expert_states = []
    s = lm
    for mod in experts:
        if expert_logdists is not None:
            lu = expert_logdists[mod]
            expert_states.append((mod, None, None))
        else:
            z_u, tape_u = bundle.expert(mod).forward(_expert_input(batch, mod))
            lu = log_softmax(z_u)
            expert_states.append((mod, z_u, tape_u))
        s = s + lu
    combined = log_softmax(s) if experts else lm

    rows = np.arange(n)
    loss = float(-combined[rows, batch.y].mean())

    onehot = np.zeros_like(combined)
    onehot[rows, batch.y] = 1.0
    if experts:
        g_s = (np.exp(combined) - onehot) / n  # through the final renormalization
    else:
        g_s = -onehot / n

    grads: dict[str, list[np.ndarray]] = {}
    g_zm = log_softmax_backward(z_m, g_s)
    grads["m"], _ = bundle.ffn_m.backward(tape_m, g_zm)
    for mod, z_u, tape_u in expert_states:
        if z_u is None:
            continue  # frozen expert: no gradient flows to it
        g_zu = log_softmax_backward(z_u, g_s)
        grads[mod], _ = bundle.expert(mod).backward(tape_u, g_zu)
    return loss, grads


def regression_loss_and_grads(bundle: ModelBundle, batch: _Batch,
                              ) -> tuple[float, list[np.ndarray]]:
    """Mean squared error of the regression head over a batch."""
    n = batch.xcat.shape[0]
    pred, tape = bundle.reg_head.forward(batch.xcat)
    diff = pred[:, 0] - batch.targets
    loss = float(np.mean(diff ** 2))
    grads, _ = bundle.reg_head.backward(tape, (2.0 * diff / n)[:, None])
    return loss, grads


def _check_classification_records(records: Sequence[FeatureRecord]) -> None:
    labels = {r.label for r in records}
    if len(labels) < 2:
        raise ValueError(f"training set contains a single class: {sorted(labels)}")


def train_classification(bundle: ModelBundle, records: Sequence[FeatureRecord],
                         config: PoEConfig) -> TrainResult:
    """Minimize the combined-distribution cross entropy with seeded
    mini-batch shuffling. Deterministic given (bundle, records, config)."""
    _check_classification_records(records)
    data = _stack(records, bundle, need_labels=True)
    experts = tuple(m for m in MODALITIES if m in config.experts_enabled)

    opts = {"m": make_optimizer(config.optimizer, config.lr, config.weight_decay)}
    for mod in experts:
        opts[mod] = make_optimizer(config.optimizer, config.lr, config.weight_decay)

    rng = np.random.default_rng(config.seed)
    trace: list[tuple[int, int, float]] = []
    epoch_losses: list[float] = []
    n = data.xcat.shape[0]
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            sub = _Batch(xs=data.xs[idx], xt=data.xt[idx], xa=data.xa[idx],
                         xcat=data.xcat[idx], y=data.y[idx], targets=data.targets[idx])
            loss, grads = classification_loss_and_grads(bundle, sub, experts)
            opts["m"].step(bundle.ffn_m.parameters(), grads["m"])
            for mod in experts:
                opts[mod].step(bundle.expert(mod).parameters(), grads[mod])
            trace.append((epoch, bi, loss))
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    return TrainResult(bundle=bundle, trace=trace, epoch_losses=epoch_losses)


def train_regression(bundle: ModelBundle, records: Sequence[FeatureRecord],
                     config: PoEConfig) -> TrainResult:
    """Minimize mean squared error of the fusion regression head (no
    product of experts; experts only shape the classification loss)."""
    data = _stack(records, bundle, need_labels=False)
    opt = make_optimizer(config.optimizer, config.lr, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    trace: list[tuple[int, int, float]] = []
    epoch_losses: list[float] = []
    n = data.xcat.shape[0]
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            sub = _Batch(xs=data.xs[idx], xt=data.xt[idx], xa=data.xa[idx],
                         xcat=data.xcat[idx], y=None, targets=data.targets[idx])
            loss, grads = regression_loss_and_grads(bundle, sub)
            opt.step(bundle.reg_head.parameters(), grads)
            trace.append((epoch, bi, loss))
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    return TrainResult(bundle=bundle, trace=trace, epoch_losses=epoch_losses)


# ---------------------------------------------------------------------------
# Inference: the multi-feature head only
# ---------------------------------------------------------------------------

def predict(bundle: ModelBundle, rec: FeatureRecord, task: str = "classification",
            clamp_regression: bool = False):
    """Classification: class probabilities from the multi-feature head
    alone (experts are never consulted at inference). Regression: the
    fusion head's scalar, optionally clamped to the valid MMSE range."""
    if task == "classification":
        return softmax(multi_forward(bundle, rec))
    if task == "regression":
        y, _ = bundle.reg_head.forward(concat_features(rec))
        value = float(y[0])
        if clamp_regression:
            value = min(max(value, MMSE_RANGE[0]), MMSE_RANGE[1])
        return value
    raise ValueError(f"unknown task {task!r}")


def predict_batch(bundle: ModelBundle, records: Sequence[FeatureRecord],
                  task: str = "classification", clamp_regression: bool = False) -> np.ndarray:
    """Vectorized predict(): (n, 2) probabilities or (n,) regression values."""
    data = _stack(records, bundle, need_labels=False)
    if task == "classification":
        z, _ = bundle.ffn_m.forward(data.xcat)
        return softmax(z)
    if task == "regression":
        y, _ = bundle.reg_head.forward(data.xcat)
        values = y[:, 0]
        if clamp_regression:
            values = np.clip(values, MMSE_RANGE[0], MMSE_RANGE[1])
        return values
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_bundle(base_path, bundle: ModelBundle, seed: int) -> None:
    save_checkpoint(base_path, bundle.nets(), seed=seed,
                    extra={"d_s": bundle.d_s, "d_t": bundle.d_t, "d_a": bundle.d_a})


def load_bundle(base_path) -> ModelBundle:
    nets, meta = load_checkpoint(base_path)
    dims = meta["extra"]
    return ModelBundle(d_s=dims["d_s"], d_t=dims["d_t"], d_a=dims["d_a"],
                       ffn_m=nets["ffn_m"], ffn_s=nets["ffn_s"],
                       ffn_t=nets["ffn_t"], ffn_a=nets["ffn_a"],
                       reg_head=nets["reg_head"])
