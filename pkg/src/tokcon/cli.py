"""``tokcon`` command-line entry point.

Exit codes: 0 success, 1 validation/config error, 2 runtime/data error.
Set ``TOKCON_LOG_LEVEL`` (e.g. ``INFO``) for progress logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import audio, synth
from .checkpoint import load_checkpoint, load_tensors
from .config import RunConfig, config_from_dict, load_config, parse_config
from .cross_modal import write_attention_csv, write_attention_pgm
from .data import ManifestRecord, label_index, load_manifest, load_spans, load_utterances, write_manifest
from .errors import ConfigError, DataError, TokconError
from .gradcheck import run_standard_checks
from .text import Vocab, load_vocab
from .training import (TokconModel, alignment_metrics, diagonality_score, evaluate_accuracy,
                       finetune, pretrain)

log = logging.getLogger("tokcon")


def _resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    config = base or RunConfig()
    if getattr(args, "config", None):
        config = parse_config(Path(args.config).read_text(), config)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set {item!r} is not key=value")
        key, value = item.split("=", 1)
        config.set(key, value)
    for flag, key in (("loss_mode", "pretrain.loss_mode"), ("steps", "pretrain.max_steps"),
                      ("epochs", "finetune.max_epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            config.set(key, str(value))
    if getattr(args, "specaugment", None) is not None:
        config.set("finetune.specaugment", args.specaugment)
    config.validate()
    return config


def _sibling(manifest: str, explicit: str | None, name: str) -> str | None:
    if explicit:
        return explicit
    candidate = Path(manifest).parent / name
    return str(candidate) if candidate.exists() else None


def _vocab(args) -> Vocab:
    path = _sibling(args.manifest, args.vocab, "vocab.txt")
    if path is None:
        raise ConfigError("no vocabulary: pass --vocab")
    return load_vocab(path)


def _build_model(config: RunConfig, vocab_size: int, cls_id: int) -> TokconModel:
    return TokconModel(config.encoder, vocab_size, cls_id, seed=config.seed,
                       scale_logits=config.cross.scale_logits)


def _model_from_checkpoint(path) -> tuple[TokconModel, dict, RunConfig]:
    _, meta = load_tensors(path)
    if "config" not in meta:
        raise DataError(f"{path}: checkpoint lacks run configuration")
    config = config_from_dict(meta["config"])
    model = _build_model(config, meta["vocab_size"], meta["cls_id"])
    if meta.get("labels"):
        model.add_classifier(len(meta["labels"]))
    load_checkpoint(path, model)
    return model, meta, config


def _split(records, utts, name):
    keep = {r.utterance_id for r in records if (r.split == "val") == (name == "val")}
    return [u for u in utts if u.uid in keep]


def cmd_synth(args) -> int:
    suite = synth.generate_suite(args.n_utterances, seed=args.seed, n_types=args.n_types,
                                 noise=args.noise, d=args.d, n_mels=args.n_mels)
    manifest = synth.write_suite(args.out_dir, suite)
    print(json.dumps({"manifest": str(manifest), "utterances": len(suite.utterances)}))
    return 0


def cmd_featurize(args) -> int:
    config = _resolve_config(args)
    records = load_manifest(args.manifest, check_files=False)
    out = Path(args.out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    feats, failures = {}, []
    for rec in records:
        try:
            if rec.audio_path is None:
                feats[rec.utterance_id] = audio.load_features(rec.feature_path)
            else:
                feats[rec.utterance_id] = audio.log_mel(audio.read_wav(rec.audio_path),
                                                        config.features.n_mels)
        except (TokconError, OSError) as exc:
            failures.append((rec.utterance_id, str(exc)))
    stats_path = out / "stats.tcas"
    if args.stats and not (args.refit_mvn or config.features.refit_mvn):
        stats = audio.load_stats(args.stats)
    elif feats:
        audio.save_stats(stats_path, audio.mvn_fit(feats.values()))
        stats = audio.load_stats(stats_path)  # normalize with exactly what a reuse would read
    else:
        stats = None
    written = []
    for rec in records:
        if rec.utterance_id not in feats:
            continue
        rel = f"features/{rec.utterance_id}.tcaf"
        audio.save_features(out / rel, audio.mvn_apply(feats[rec.utterance_id], stats))
        written.append(ManifestRecord(rec.utterance_id, rec.transcript, None, rel,
                                      rec.teacher_path, rec.intent_label, rec.split))
    write_manifest(out / "manifest.jsonl", written)
    for uid, message in failures:
        print(f"error: {uid}: {message}", file=sys.stderr)
    print(json.dumps({"written": len(written), "failed": [u for u, _ in failures]}))
    return 2 if failures else 0


def cmd_pretrain(args) -> int:
    base = None
    if args.resume:
        _, meta = load_tensors(args.resume)
        base = config_from_dict(meta["config"]) if "config" in meta else None
    config = _resolve_config(args, base)
    vocab = _vocab(args)
    records = load_manifest(args.manifest)
    spans_path = _sibling(args.manifest, args.spans, "spans.jsonl")
    spans = load_spans(spans_path) if spans_path else None
    utts = load_utterances(records, vocab, with_teacher=True, spans=spans)
    train, val = _split(records, utts, "train"), _split(records, utts, "val")
    model = _build_model(config, len(vocab), vocab.cls_id)
    meta = {"kind": "pretrain", "config": config.to_dict(), "vocab_size": len(vocab),
            "cls_id": vocab.cls_id}
    records_out = pretrain(model, train, config.pretrain, out_dir=args.out_dir, val=val or None,
                           resume=args.resume, meta=meta)
    print(json.dumps(records_out[-1], sort_keys=True))
    return 0


def cmd_finetune(args) -> int:
    if args.checkpoint:
        model, meta, ck_config = _model_from_checkpoint(args.checkpoint)
        config = _resolve_config(args, ck_config)
    elif args.from_scratch:
        config = _resolve_config(args)
        model = None
    else:
        raise ConfigError("pass --checkpoint or --from-scratch")
    vocab = _vocab(args)
    records = load_manifest(args.manifest)
    if any(r.intent_label is None for r in records):
        raise ConfigError("every manifest record needs an intent_label for fine-tuning")
    names = None
    if args.labels:
        names = [l.strip() for l in Path(args.labels).read_text().splitlines() if l.strip()]
    labels = label_index(records, names)
    if len(labels) != config.finetune.n_classes:
        raise ConfigError(
            f"{len(labels)} intent labels but finetune.n_classes={config.finetune.n_classes}"
        )
    utts = load_utterances(records, labels=labels)
    train, val = _split(records, utts, "train"), _split(records, utts, "val")
    if model is None:
        model = _build_model(config, len(vocab), vocab.cls_id)
    model.classifier = None
    meta = {"kind": "finetune", "config": config.to_dict(), "vocab_size": len(vocab),
            "cls_id": vocab.cls_id, "labels": list(labels)}
    history = finetune(model, train, config.finetune, val=val or None, out_dir=args.out_dir,
                       policy=config.specaugment, meta=meta)
    for rec in history:
        print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    model, meta, config = _model_from_checkpoint(args.checkpoint)
    records = load_manifest(args.manifest)
    split = None if args.split == "all" else args.split
    if split is not None:
        records = [r for r in records if (r.split == "val") == (split == "val")]
    if meta.get("labels"):
        labels = {name: i for i, name in enumerate(meta["labels"])}
        utts = load_utterances(records, labels=labels)
        result = {"accuracy": evaluate_accuracy(model, utts), "n": len(utts)}
    else:
        vocab = _vocab(args)
        spans_path = _sibling(args.manifest, args.spans, "spans.jsonl")
        utts = load_utterances(records, vocab, with_teacher=True,
                               spans=load_spans(spans_path) if spans_path else None)
        result = alignment_metrics(model, utts, config.pretrain, config.eval.diag_window)
        result["n"] = len(utts)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_export_attention(args) -> int:
    model, _, config = _model_from_checkpoint(args.checkpoint)
    vocab = _vocab(args)
    records = [r for r in load_manifest(args.manifest) if r.utterance_id == args.utterance]
    if not records:
        raise DataError(f"utterance {args.utterance!r} not in manifest")
    utt = load_utterances(records, vocab)[0]
    model.eval()
    with torch.no_grad():
        _, A = model.contextual(utt.token_ids, model.speech(utt.features))
    A = A.double().numpy()
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_attention_csv(prefix.with_suffix(".csv"), A)
    write_attention_pgm(prefix.with_suffix(".pgm"), A)
    result = {"rows": A.shape[0], "cols": A.shape[1], "csv": str(prefix.with_suffix(".csv")),
              "pgm": str(prefix.with_suffix(".pgm"))}
    spans_path = _sibling(args.manifest, args.spans, "spans.jsonl")
    if spans_path:
        spans = load_spans(spans_path).get(utt.uid)
        if spans is not None:
            result["diag_score"] = diagonality_score(A, spans, config.eval.diag_window)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_standard_checks(rel_tol=args.rel_tol, mutate=args.mutate)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name} max_rel_err={r.max_rel_error:.3e} checked={r.n_checked} worst={r.worst}")
    return 0 if all(r.passed for r in reports) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokcon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="flat key = value run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("synth", help="generate the synthetic suite")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-utterances", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--n-types", type=int, default=16)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--n-mels", type=int, default=80)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="WAV -> normalized log-Mel features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stats", help="reuse these MVN statistics")
    p.add_argument("--refit-mvn", action="store_true", help="fit fresh statistics even with --stats")
    add_config(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("pretrain", help="tokenwise (or sequence) contrastive pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--spans")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--loss-mode", choices=("tokenwise", "sequence"))
    p.add_argument("--steps", type=int)
    add_config(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="[CLS]-only intent fine-tuning")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--checkpoint", help="pretrained checkpoint")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--labels", help="intent label list, one per line")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--specaugment", choices=("on", "off"))
    p.add_argument("--epochs", type=int)
    add_config(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="intent accuracy or alignment metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--spans")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-attention", help="cross-modal attention heatmap")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--spans")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--utterance", required=True)
    p.add_argument("--out", required=True, help="output prefix (.csv and .pgm are added)")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--rel-tol", type=float, default=1e-4)
    p.add_argument("--mutate", help="inflate one op's gradient by 10%% to exercise the checker")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TOKCON_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TokconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
