"""Product-of-experts training for multimodal MCI screening models.

The package bundles five pieces that are usually scattered across ad-hoc
experiment scripts:

* ``datamodel``  - dataset manifests (JSON Lines + binary feature sidecars),
* ``nn``         - a small dense-network kernel with exact backpropagation,
* ``poe``        - multi-feature fusion trained against per-modality expert
  heads via a product of experts, so the fused model cannot lean on a single
  shortcut modality,
* ``evaluation`` - stratified k-fold cross validation with subgroup metrics
  and disparity gaps,
* ``synthbench`` - a synthetic spurious-correlation benchmark that measures
  how much the product-of-experts training actually helps out of
  distribution,
* ``acoustic``   - phonation and prosody features (F0, jitter, shimmer,
  energy, pauses) from PCM WAV files.

Everything is seeded and deterministic: identical inputs produce
byte-identical manifests, checkpoints and reports.
"""

__version__ = "0.1.0"

CLASS_MCI = 0
CLASS_NC = 1
LABEL_TO_INDEX = {"mci": CLASS_MCI, "nc": CLASS_NC}
INDEX_TO_LABEL = {CLASS_MCI: "mci", CLASS_NC: "nc"}
