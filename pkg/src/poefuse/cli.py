"""Command-line entry point.

Subcommands: extract (WAV dir -> manifest with acoustic features), train
(single model + checkpoint), cv (stratified k-fold report), synth (shortcut
benchmark), report (re-render a report JSON as a table).

Exit codes: 0 success, 1 runtime or data failure, 2 usage error. Every
output JSON carries a reproducibility block (seed, config hash, package
version); reruns with identical seed and configuration produce
byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .acoustic import (
    AcousticConfig,
    AudioError,
    extract_acoustic_vector,
    read_wav,
)
from .datamodel import (
    DatasetManifest,
    FeatureRecord,
    ManifestError,
    build_manifest,
    parse_manifest,
    serialize_manifest,
    serialize_manifest_with_sidecars,
)
from .evaluation import CVConfig, cross_validate, render_report
from .poe import (
    MODALITIES,
    PoEConfig,
    build_bundle,
    save_bundle,
    train_classification,
    train_regression,
)
from .synthbench import ShortcutSpec, run_poe_ablation

EXTRACT_DEFAULTS = {
    "participant_id": None,  # defaults to the sample id
    "language": "en",
    "gender": "f",
    "age": 70.0,
    "label": "nc",
    "mmse": 30.0,
}


def _config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(canon).hexdigest()


def _repro_block(seed: int, config_payload: dict) -> dict:
    return {"seed": seed, "config_hash": _config_hash(config_payload),
            "version": __version__}


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise ManifestError(f"{path}: config file must hold a JSON object")
    return obj


def _poe_config(args, file_cfg: dict) -> PoEConfig:
    """Config file first, then command-line flags override."""
    cfg = PoEConfig(**{k: v for k, v in file_cfg.items()
                       if k in PoEConfig.__dataclass_fields__})
    updates = {}
    if getattr(args, "task", None):
        updates["task"] = args.task
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        updates["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        updates["lr"] = args.lr
    if getattr(args, "weight_decay", None) is not None:
        updates["weight_decay"] = args.weight_decay
    if getattr(args, "batch_size", None) is not None:
        updates["batch_size"] = args.batch_size
    if getattr(args, "hidden_dim", None) is not None:
        updates["hidden_dim"] = args.hidden_dim
    if getattr(args, "no_poe", False):
        updates["experts_enabled"] = ()
    elif getattr(args, "experts", None):
        updates["experts_enabled"] = tuple(sorted(set(args.experts.split(","))))
    if updates:
        cfg = replace(cfg, **updates)
    return cfg


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------

def cmd_extract(args) -> int:
    wav_dir = Path(args.wav_dir)
    if not wav_dir.is_dir():
        print(f"error: {wav_dir} is not a directory", file=sys.stderr)
        return 1
    acfg = AcousticConfig(frame_s=args.frame, hop_s=args.hop,
                          f0_min_hz=args.f0_min, f0_max_hz=args.f0_max,
                          voicing_threshold=args.voicing_threshold,
                          pause_min_s=args.pause_min)
    merge: dict[str, FeatureRecord] = {}
    d_s, d_t = 1, 1
    if args.merge:
        merged = parse_manifest(args.merge)
        merge = {r.sample_id: r for r in merged.records}
        d_s, d_t = merged.header.d_s, merged.header.d_t

    records = []
    failures = []
    for wav_path in sorted(wav_dir.glob("*.wav")):
        sample_id = wav_path.stem
        try:
            clip = read_wav(wav_path)
            vector, warnings = extract_acoustic_vector(clip, acfg)
        except AudioError as exc:
            failures.append(f"{wav_path.name}: {exc}")
            if not args.keep_going:
                break
            continue
        for w in warnings:
            print(f"warning: {wav_path.name}: {w}", file=sys.stderr)
        base = merge.get(sample_id)
        records.append(FeatureRecord(
            sample_id=sample_id,
            participant_id=base.participant_id if base else sample_id,
            language=base.language if base else EXTRACT_DEFAULTS["language"],
            gender=base.gender if base else EXTRACT_DEFAULTS["gender"],
            age=base.age if base else EXTRACT_DEFAULTS["age"],
            label=base.label if base else EXTRACT_DEFAULTS["label"],
            mmse=base.mmse if base else EXTRACT_DEFAULTS["mmse"],
            speech_vec=base.speech_vec if base else np.zeros(d_s),
            text_vec=base.text_vec if base else np.zeros(d_t),
            acoustic_vec=vector,
        ))

    if failures:
        for line in failures:
            print(f"error: {line}", file=sys.stderr)
        if not args.keep_going:
            return 1
    manifest = build_manifest(records, d_s=d_s, d_t=d_t, d_a=len(records[0].acoustic_vec)
                              if records else 10)
    if args.vector_format == "sidecar":
        serialize_manifest_with_sidecars(manifest, args.out)
    else:
        serialize_manifest(manifest, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    manifest = parse_manifest(args.manifest)
    cfg = _poe_config(args, _load_config_file(args.config))
    records = list(manifest.records)
    h = manifest.header
    bundle = build_bundle(h.d_s, h.d_t, h.d_a, hidden_dim=cfg.hidden_dim,
                          seed=cfg.seed)
    if cfg.task == "classification":
        result = train_classification(bundle, records, cfg)
    else:
        result = train_regression(bundle, records, cfg)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_bundle(out_dir / "model", bundle, seed=cfg.seed)
    trace_lines = ["epoch,batch,loss"]
    trace_lines += [f"{e},{b},{loss!r}" for e, b, loss in result.trace]
    (out_dir / "loss_trace.csv").write_text("\n".join(trace_lines) + "\n",
                                            encoding="utf-8")
    cfg_payload = asdict(cfg)
    cfg_payload["experts_enabled"] = list(cfg.experts_enabled)
    _write_json(out_dir / "run.json", {
        "reproducibility": _repro_block(cfg.seed, cfg_payload),
        "config": cfg_payload,
        "n_records": len(records),
        "epoch_losses": result.epoch_losses,
    })
    print(f"final epoch loss: {result.epoch_losses[-1]:.6f}")
    return 0


# ---------------------------------------------------------------------------
# cv
# ---------------------------------------------------------------------------

def cmd_cv(args) -> int:
    manifest = parse_manifest(args.manifest)
    file_cfg = _load_config_file(args.config)
    poe_cfg = _poe_config(args, file_cfg)
    cv_cfg = CVConfig(
        poe=poe_cfg,
        k=args.k if args.k is not None else file_cfg.get("k", 10),
        group_by_participant=args.group_by_participant
        or file_cfg.get("group_by_participant", False),
        macro_f1=args.macro_f1 or file_cfg.get("macro_f1", False),
        pooled=args.pooled or file_cfg.get("pooled", False),
    )
    report = cross_validate(list(manifest.records), cv_cfg, jobs=args.jobs)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_payload = asdict(poe_cfg)
    cfg_payload["experts_enabled"] = list(poe_cfg.experts_enabled)
    cfg_payload.update({"k": cv_cfg.k,
                        "group_by_participant": cv_cfg.group_by_participant,
                        "macro_f1": cv_cfg.macro_f1, "pooled": cv_cfg.pooled})
    payload = {"reproducibility": _repro_block(poe_cfg.seed, cfg_payload),
               "report": report.to_dict()}
    _write_json(out_dir / "report.json", payload)
    table = render_report(report)
    (out_dir / "report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = ShortcutSpec(
        n_train=args.n_train, n_test=args.n_test,
        d_s=args.d_s, d_t=args.d_t, d_a=args.d_a,
        train_corr=args.rho_train, test_corr=args.rho_test,
        noise_sigma=args.noise_sigma, seed=args.seed if args.seed is not None else 0,
    )
    result = run_poe_ablation(spec, n_seeds=args.seeds, jobs=args.jobs)
    delta = result.mean_delta
    if spec.train_corr - spec.test_corr >= 0.2:
        ok = delta >= 0.05
        verdict = f"PoE delta >= +0.05: {'PASS' if ok else 'FAIL'} (delta={delta:+.3f})"
    elif abs(spec.train_corr - 0.5) <= 0.05:
        ok = abs(delta) <= 0.02
        verdict = (f"no shortcut: delta within +/-0.02: "
                   f"{'PASS' if ok else 'FAIL'} (delta={delta:+.3f})")
    else:
        verdict = f"delta={delta:+.3f} (no pass threshold for this correlation gap)"

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = result.to_dict()
    payload["verdict"] = verdict
    spec_payload = dict(payload["spec"])
    spec_payload["n_seeds"] = args.seeds
    payload = {"reproducibility": _repro_block(spec.seed, spec_payload), **payload}
    _write_json(out_dir / "summary.json", payload)
    print(verdict)
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    payload = json.loads(Path(args.report).read_text(encoding="utf-8"))
    body = payload.get("report", payload)
    from .evaluation import EvalReport
    report = EvalReport(
        task=body["task"], k=body["k"], seed=body["seed"],
        group_by_participant=body["group_by_participant"],
        metric_names=tuple(body["metric_names"]),
        per_fold=body["per_fold"], aggregate=body["aggregate"],
        disparity=body["disparity"], undefined_counts=body["undefined_counts"],
        pooled=body.get("pooled"),
    )
    table = render_report(report)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _unit_interval(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poefuse",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_train_flags(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--task", choices=["classification", "regression"])
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--weight-decay", type=float, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--hidden-dim", type=int, default=None)
        p.add_argument("--experts", help="comma-separated subset of s,t,a")
        p.add_argument("--no-poe", action="store_true",
                       help="disable all expert heads")

    p = sub.add_parser("extract", help="extract acoustic features from WAV files")
    p.add_argument("wav_dir")
    p.add_argument("--out", required=True, help="output manifest path")
    p.add_argument("--merge", help="existing manifest supplying metadata and "
                                   "speech/text vectors by sample_id")
    p.add_argument("--keep-going", action="store_true",
                   help="skip unreadable files, still exit 1")
    p.add_argument("--vector-format", choices=["inline", "sidecar"],
                   default="inline",
                   help="store acoustic vectors inline or in a binary sidecar")
    p.add_argument("--frame", type=float, default=0.040)
    p.add_argument("--hop", type=float, default=0.010)
    p.add_argument("--f0-min", type=float, default=60.0)
    p.add_argument("--f0-max", type=float, default=400.0)
    p.add_argument("--voicing-threshold", type=float, default=0.3)
    p.add_argument("--pause-min", type=float, default=0.150)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train one model on a full manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="stratified k-fold cross validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--group-by-participant", action="store_true")
    p.add_argument("--macro-f1", action="store_true")
    p.add_argument("--pooled", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    add_train_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("synth", help="run the shortcut-mitigation benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rho-train", type=_unit_interval, default=0.9)
    p.add_argument("--rho-test", type=_unit_interval, default=0.5)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--d-s", type=int, default=6)
    p.add_argument("--d-t", type=int, default=6)
    p.add_argument("--d-a", type=int, default=6)
    p.add_argument("--noise-sigma", type=float, default=1.0)
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="render a report JSON as a text table")
    p.add_argument("--report", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ManifestError, AudioError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
