"""Pretraining and fine-tuning loops, metrics, and the end-to-end model."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .audio import SpecAugmentPolicy, spec_augment
from .checkpoint import load_checkpoint, save_checkpoint
from .contrastive import BatchConcat, cosine_sim_matrix, sequence_contrastive_loss, tokenwise_contrastive_loss
from .core import Linear
from .cross_modal import CrossModal
from .data import Utterance
from .encoder import EncoderConfig, SpeechEncoder
from .errors import ConfigError, DataError, DivergenceError, EmptyInputError
from .optim import adamw_step, make_adamw

LOSS_MODES = ("tokenwise", "sequence")


@dataclass
class PretrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    tau: float = 0.07
    max_steps: int = 2000
    seed: int = 0
    loss_mode: str = "tokenwise"
    scale_by_tau: bool = True
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 250
    checkpoint_every: int = 500

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("pretrain.batch_size must be >= 1")
        if self.tau <= 0:
            raise ConfigError("pretrain.tau must be > 0")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"pretrain.loss_mode must be one of {LOSS_MODES}")


@dataclass
class FinetuneConfig:
    lr: float = 2e-5
    n_classes: int = 4
    specaugment: bool = False
    max_epochs: int = 20
    seed: int = 0
    batch_size: int = 4
    patience: int = 5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("finetune.n_classes must be >= 2")
        if self.batch_size < 1:
            raise ConfigError("finetune.batch_size must be >= 1")


class TokconModel(nn.Module):
    """Speech encoder + cross-modal attention (+ an optional intent classifier)."""

    def __init__(self, encoder_config: EncoderConfig, vocab_size: int, cls_id: int,
                 seed: int = 0, scale_logits: bool = False):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.cls_id = cls_id
        self.encoder = SpeechEncoder(encoder_config, generator)
        self.cross = CrossModal(vocab_size, encoder_config.d, generator, scale=scale_logits)
        self.classifier: Linear | None = None

    def add_classifier(self, n_classes: int) -> None:
        """Attach a zero-initialised linear head (uniform initial predictions)."""
        d = self.encoder.config.d
        head = Linear(d, n_classes, torch.Generator().manual_seed(0))
        with torch.no_grad():
            head.weight.zero_()
            head.bias.zero_()
        self.classifier = head.to(next(self.parameters()).dtype)

    def speech(self, features, training=False, generator=None) -> torch.Tensor:
        x = torch.as_tensor(features, dtype=self.cross.table.dtype)
        return self.encoder(x, training=training, generator=generator)

    def contextual(self, token_ids, S):
        return self.cross(token_ids, S)

    def intent_logits(self, S) -> torch.Tensor:
        if self.classifier is None:
            raise ConfigError("model has no classifier; call add_classifier first")
        return self.classifier(self.cross.cls_only(self.cls_id, S))


def step_seed(seed: int, step: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, step, stream]).generate_state(1)[0])


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> list[int]:
    """Deterministic per-step batch: epoch-wise permutations, partial batches dropped."""
    per_epoch = max(1, n // batch_size)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [int(i) for i in perm[k * batch_size : (k + 1) * batch_size]]


def _teacher(utt: Utterance, dtype) -> torch.Tensor:
    if utt.teacher is None:
        raise DataError(f"{utt.uid}: missing teacher embeddings")
    if utt.teacher.shape[0] != len(utt.token_ids):
        raise DataError(f"{utt.uid}: teacher rows {utt.teacher.shape[0]} != tokens {len(utt.token_ids)}")
    return torch.as_tensor(utt.teacher, dtype=dtype)


def pretrain_loss(model: TokconModel, batch: list[Utterance], config: PretrainConfig,
                  training: bool = True, generator: torch.Generator | None = None) -> torch.Tensor:
    dtype = model.cross.table.dtype
    if config.loss_mode == "tokenwise":
        pairs = []
        for utt in batch:
            S = model.speech(utt.features, training, generator)
            Bs, _ = model.contextual(utt.token_ids, S)
            pairs.append((_teacher(utt, dtype), Bs))
        return tokenwise_contrastive_loss(BatchConcat.from_pairs(pairs), tau=config.tau,
                                          scale_by_tau=config.scale_by_tau)
    pooled, cls = [], []
    for utt in batch:
        pooled.append(model.speech(utt.features, training, generator).mean(dim=0))
        cls.append(_teacher(utt, dtype)[0])
    return sequence_contrastive_loss(torch.stack(pooled), torch.stack(cls), config.tau,
                                     config.scale_by_tau)


def pretrain_step(model, optimizer, batch, config: PretrainConfig, step: int) -> float:
    model.train()
    generator = torch.Generator().manual_seed(step_seed(config.seed, step))
    loss = pretrain_loss(model, batch, config, training=True, generator=generator)
    if not torch.isfinite(loss):
        optimizer.zero_grad(set_to_none=True)
        raise DivergenceError(f"non-finite pretraining loss at step {step}")
    loss.backward()
    adamw_step(optimizer)
    return float(loss.item())


def token_retrieval_accuracy(batch: BatchConcat) -> float:
    """Fraction of speech-side rows whose most similar teacher row is their own."""
    if batch.b < 2:
        raise EmptyInputError("retrieval needs at least two rows")
    with torch.no_grad():
        sim = cosine_sim_matrix(batch.teacher.double(), batch.speech.double(), 1.0).T.numpy()
    hits = np.argmax(sim, axis=1) == np.arange(batch.b)
    return float(hits.mean())


def diagonality_score(A, token_spans, window: int = 2) -> float:
    """Fraction of scored query rows whose attention argmax is within ``window``
    keys of the expected index. Rows whose span is ``None`` are skipped."""
    A = np.asarray(A)
    m, n_keys = A.shape
    if len(token_spans) != m:
        raise DataError(f"{len(token_spans)} spans for {m} attention rows")
    hits, scored = 0, 0
    for row, expected in zip(A, token_spans):
        if expected is None:
            continue
        if not 0 <= expected < n_keys:
            raise DataError(f"expected key index {expected} outside [0, {n_keys})")
        scored += 1
        hits += abs(int(np.argmax(row)) - int(expected)) <= window
    if scored == 0:
        raise EmptyInputError("no scored rows in token spans")
    return hits / scored


@torch.no_grad()
def alignment_metrics(model: TokconModel, utts: list[Utterance], config: PretrainConfig,
                      window: int = 2) -> dict:
    """Held-out loss, retrieval accuracy and mean diagonality over fixed batches."""
    model.eval()
    bs = config.batch_size
    losses, retrieval, diag = [], [], []
    for start in range(0, max(len(utts) - bs, 0) + 1, bs):
        batch = utts[start : start + bs]
        if len(batch) < 2:
            continue
        losses.append(float(pretrain_loss(model, batch, config, training=False)))
        dtype = model.cross.table.dtype
        if config.loss_mode == "tokenwise":
            pairs = []
            for utt in batch:
                Bs, A = model.contextual(utt.token_ids, model.speech(utt.features))
                pairs.append((_teacher(utt, dtype), Bs))
                if utt.spans is not None:
                    diag.append(diagonality_score(A.numpy(), utt.spans, window))
            retrieval.append(token_retrieval_accuracy(BatchConcat.from_pairs(pairs)))
        else:
            pooled = torch.stack([model.speech(u.features).mean(dim=0) for u in batch])
            cls = torch.stack([_teacher(u, dtype)[0] for u in batch])
            retrieval.append(token_retrieval_accuracy(BatchConcat(cls, pooled, list(range(len(batch) + 1)))))
    out = {"val_loss": float(np.mean(losses)) if losses else float("nan"),
           "retrieval_acc": float(np.mean(retrieval)) if retrieval else float("nan")}
    if diag:
        out["diag_score"] = float(np.mean(diag))
    return out


def _write_log(path: Path, records: list[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def pretrain(model: TokconModel, train: list[Utterance], config: PretrainConfig,
             out_dir=None, val: list[Utterance] | None = None, resume=None,
             meta: dict | None = None) -> list[dict]:
    """Run the alignment loop; returns the metrics records (also written to
    ``out_dir/metrics.jsonl``). ``resume`` is a checkpoint path."""
    config.validate()
    if len(train) < config.batch_size:
        raise DataError(f"{len(train)} utterances cannot fill a batch of {config.batch_size}")
    optimizer = make_adamw(model.parameters(), config.lr, config.weight_decay,
                           (config.beta1, config.beta2), config.eps)
    records: list[dict] = []
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        saved = load_checkpoint(resume, model, optimizer)
        start = int(saved.get("step", 0))
        log = out / "metrics.jsonl" if out is not None else None
        if log is not None and log.exists():
            records = [json.loads(l) for l in log.read_text().splitlines() if l.strip()]
            records = [r for r in records if r["step"] <= start]
    meta = dict(meta or {})
    best = math.inf
    for step in range(start, config.max_steps):
        idx = batch_indices(len(train), config.batch_size, config.seed, step)
        loss = pretrain_step(model, optimizer, [train[i] for i in idx], config, step)
        record = {"step": step + 1, "loss": loss, "lr": config.lr}
        done = step + 1
        if val and config.eval_every and (done % config.eval_every == 0 or done == config.max_steps):
            metrics = alignment_metrics(model, val, config)
            record.update(metrics)
            if out is not None and metrics["val_loss"] < best:
                best = metrics["val_loss"]
                save_checkpoint(out / "best.tcac", model, optimizer, {**meta, "step": done})
        records.append(record)
        if out is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            save_checkpoint(out / f"step{done:06d}.tcac", model, optimizer, {**meta, "step": done})
            _write_log(out / "metrics.jsonl", records)
    if out is not None:
        _write_log(out / "metrics.jsonl", records)
        save_checkpoint(out / "final.tcac", model, optimizer, {**meta, "step": config.max_steps})
    return records


def _intent_batch_loss(model, batch, config: FinetuneConfig, policy, step, training):
    generator = torch.Generator().manual_seed(step_seed(config.seed, step)) if training else None
    logits, labels = [], []
    for j, utt in enumerate(batch):
        if utt.label is None or not 0 <= utt.label < config.n_classes:
            raise DataError(f"{utt.uid}: label {utt.label} outside [0, {config.n_classes})")
        feats = utt.features
        if training and config.specaugment:
            feats = spec_augment(feats, policy, step_seed(config.seed, step, stream=j + 1))
        S = model.speech(np.asarray(feats, dtype=np.float32), training, generator)
        logits.append(model.intent_logits(S))
        labels.append(utt.label)
    logits = torch.cat(logits)
    return nn.functional.cross_entropy(logits, torch.tensor(labels)), logits


def finetune_step(model, optimizer, batch, config: FinetuneConfig, step: int,
                  policy: SpecAugmentPolicy | None = None) -> float:
    model.train()
    loss, _ = _intent_batch_loss(model, batch, config, policy or SpecAugmentPolicy(), step, True)
    if not torch.isfinite(loss):
        optimizer.zero_grad(set_to_none=True)
        raise DivergenceError(f"non-finite fine-tuning loss at step {step}")
    loss.backward()
    adamw_step(optimizer)
    return float(loss.item())


@torch.no_grad()
def predict(model: TokconModel, utts: list[Utterance]) -> np.ndarray:
    model.eval()
    return np.stack([model.intent_logits(model.speech(u.features))[0].double().numpy() for u in utts])


def evaluate_accuracy(model: TokconModel, utts: list[Utterance]) -> float:
    """Argmax accuracy; ties go to the lowest class index."""
    if not utts:
        raise EmptyInputError("cannot evaluate on an empty dataset")
    preds = np.argmax(predict(model, utts), axis=1)
    gold = np.array([u.label for u in utts])
    return float(np.mean(preds == gold))


@torch.no_grad()
def _eval_loss(model, utts, config) -> float:
    model.eval()
    loss, _ = _intent_batch_loss(model, utts, config, None, 0, False)
    return float(loss)


def finetune(model: TokconModel, train: list[Utterance], config: FinetuneConfig,
             val: list[Utterance] | None = None, out_dir=None,
             policy: SpecAugmentPolicy | None = None, meta: dict | None = None) -> list[dict]:
    """Fine-tune end to end on intent labels; one metrics record per epoch.

    Stops early once validation loss fails to improve for ``patience`` epochs.
    """
    config.validate()
    if not train:
        raise EmptyInputError("no fine-tuning utterances")
    if model.classifier is None:
        model.add_classifier(config.n_classes)
    policy = policy or SpecAugmentPolicy()
    optimizer = make_adamw(model.parameters(), config.lr, config.weight_decay,
                           (config.beta1, config.beta2), config.eps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    records, step = [], 0
    best, stale = math.inf, 0
    for epoch in range(config.max_epochs):
        perm = np.random.default_rng([config.seed, epoch, 7]).permutation(len(train))
        losses = []
        for k in range(0, len(train), config.batch_size):
            batch = [train[int(i)] for i in perm[k : k + config.batch_size]]
            losses.append(finetune_step(model, optimizer, batch, config, step, policy))
            step += 1
        record = {"step": step, "epoch": epoch + 1, "loss": float(np.mean(losses)), "lr": config.lr,
                  "train_acc": evaluate_accuracy(model, train)}
        if val:
            record["val_loss"] = _eval_loss(model, val, config)
            record["val_acc"] = evaluate_accuracy(model, val)
        records.append(record)
        if out is not None:
            _write_log(out / "metrics.jsonl", records)
        if val:
            if record["val_loss"] < best:
                best, stale = record["val_loss"], 0
                if out is not None:
                    save_checkpoint(out / "best.tcac", model, optimizer, {**meta, "epoch": epoch + 1})
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if out is not None:
        save_checkpoint(out / "final.tcac", model, optimizer, {**meta, "epoch": records[-1]["epoch"]})
    return records
