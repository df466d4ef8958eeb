import math

import numpy as np
import pytest
import torch

from conftest import TINY_ENCODER, suite_utterances
from tokcon.audio import SpecAugmentPolicy
from tokcon.checkpoint import load_checkpoint, save_checkpoint
from tokcon.contrastive import BatchConcat
from tokcon.data import Utterance
from tokcon.errors import DataError, EmptyInputError
from tokcon.optim import make_adamw
from tokcon.training import (
    FinetuneConfig,
    PretrainConfig,
    TokconModel,
    alignment_metrics,
    batch_indices,
    diagonality_score,
    evaluate_accuracy,
    finetune,
    finetune_step,
    pretrain,
    pretrain_loss,
    pretrain_step,
    token_retrieval_accuracy,
)


NARROW = SpecAugmentPolicy(freq_mask_width=3, time_mask_width=10)


def make_model(suite, seed=0, classes=None):
    model = TokconModel(TINY_ENCODER, len(suite.vocab), suite.vocab.cls_id, seed=seed)
    if classes:
        model.add_classifier(classes)
    return model


class TestRetrieval:
    def test_self_retrieval(self):
        B = torch.randn(6, 4, generator=torch.Generator().manual_seed(0))
        assert token_retrieval_accuracy(BatchConcat(B, B.clone(), [0, 6])) == 1.0

    def test_derangement(self):
        B = torch.eye(5)
        perm = [1, 2, 3, 4, 0]
        assert token_retrieval_accuracy(BatchConcat(B, B[perm], [0, 5])) == 0.0

    def test_too_small(self):
        with pytest.raises(EmptyInputError):
            token_retrieval_accuracy(BatchConcat(torch.ones(1, 2), torch.ones(1, 2), [0, 1]))


class TestDiagonality:
    def test_identity(self):
        assert diagonality_score(np.eye(6), list(range(6))) == 1.0

    def test_shift_within_window(self):
        A = np.eye(8, 9, k=1)
        assert diagonality_score(A, list(range(8)), window=2) == 1.0
        assert diagonality_score(A, list(range(8)), window=0) == 0.0

    def test_special_rows_skipped(self):
        A = np.eye(4)
        assert diagonality_score(A, [None, 1, 0, None]) == 1.0
        assert diagonality_score(A, [None, 1, 3, None], window=0) == 0.5

    def test_near_uniform_matches_combinatorial_expectation(self):
        n, w, rows = 200, 2, 40000
        rng = np.random.default_rng(0)
        A = 1.0 / n + 1e-9 * rng.random((rows, n))
        spans = rng.integers(0, n, size=rows).tolist()
        score = diagonality_score(A, spans, window=w)
        # P(|a - e| <= w) for independent uniform a, e on {0..n-1}
        expected = (n * (2 * w + 1) - w * (w + 1)) / n**2
        assert expected == pytest.approx((2 * w + 1) / n, rel=0.01)
        assert abs(score - expected) < 0.003

    def test_span_out_of_range(self):
        with pytest.raises(DataError):
            diagonality_score(np.eye(3), [0, 1, 3])


def test_batch_indices_cover_each_epoch():
    n, bs = 10, 3
    seen = [i for step in range(3) for i in batch_indices(n, bs, seed=1, step=step)]
    assert len(set(seen)) == 9
    assert batch_indices(n, bs, 1, 5) == batch_indices(n, bs, 1, 5)
    assert batch_indices(n, bs, 1, 3) != batch_indices(n, bs, 2, 3)


class TestPretrain:
    def test_loss_decreases(self, tiny_suite):
        suite, utts = tiny_suite
        model = make_model(suite)
        config = PretrainConfig(batch_size=4, lr=3e-3, max_steps=20, eval_every=0)
        records = pretrain(model, utts[:4], config)
        assert records[-1]["loss"] < records[0]["loss"]

    def test_deterministic_trajectory(self, tiny_suite):
        suite, utts = tiny_suite
        config = PretrainConfig(batch_size=3, lr=1e-3, max_steps=6, eval_every=3)
        a = pretrain(make_model(suite), utts[:8], config, val=utts[8:])
        b = pretrain(make_model(suite), utts[:8], config, val=utts[8:])
        assert a == b
        assert {"val_loss", "retrieval_acc", "diag_score"} <= set(a[2])

    def test_sequence_mode(self, tiny_suite):
        suite, utts = tiny_suite
        config = PretrainConfig(batch_size=4, lr=1e-3, max_steps=3, eval_every=3, loss_mode="sequence")
        records = pretrain(make_model(suite), utts[:8], config, val=utts[8:])
        assert all(math.isfinite(r["loss"]) for r in records)
        assert "diag_score" not in records[-1]

    def test_single_pair_fixed_point(self, tiny_suite):
        # one utterance in sequence mode is a 1x1 InfoNCE: zero loss and, with wd=0, no update
        suite, utts = tiny_suite
        model = make_model(suite)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        config = PretrainConfig(batch_size=1, loss_mode="sequence", weight_decay=0.0, lr=1e-3)
        optimizer = make_adamw(model.parameters(), config.lr, 0.0)
        loss = pretrain_step(model, optimizer, [utts[0]], config, step=0)
        assert loss == 0.0
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_self_teacher_lowers_loss(self, tiny_suite):
        suite, utts = tiny_suite
        model = make_model(suite)
        config = PretrainConfig(batch_size=1)
        model.eval()
        with torch.no_grad():
            Bs, _ = model.contextual(utts[0].token_ids, model.speech(utts[0].features))
        own = Utterance(utts[0].uid, utts[0].features, utts[0].token_ids, Bs.numpy())
        with torch.no_grad():
            assert pretrain_loss(model, [own], config, training=False) < pretrain_loss(model, [utts[0]], config, training=False)

    def test_teacher_mismatch(self, tiny_suite):
        suite, utts = tiny_suite
        bad = Utterance("bad", utts[0].features, utts[0].token_ids, utts[0].teacher[:-1])
        with pytest.raises(DataError):
            pretrain_loss(make_model(suite), [bad, utts[1]], PretrainConfig())

    def test_checkpoints_and_resume(self, tiny_suite, tmp_path):
        suite, utts = tiny_suite
        config = PretrainConfig(batch_size=3, lr=1e-3, max_steps=6, eval_every=2, checkpoint_every=3)
        full = pretrain(make_model(suite), utts[:8], config, out_dir=tmp_path / "a", val=utts[8:])
        assert (tmp_path / "a" / "step000003.tcac").exists()
        assert (tmp_path / "a" / "best.tcac").exists()
        resumed_dir = tmp_path / "b"
        resumed_dir.mkdir()
        (resumed_dir / "metrics.jsonl").write_text((tmp_path / "a" / "metrics.jsonl").read_text())
        resumed = pretrain(make_model(suite, seed=99), utts[:8], config, out_dir=resumed_dir,
                           val=utts[8:], resume=tmp_path / "a" / "step000003.tcac")
        assert resumed == full
        assert (resumed_dir / "metrics.jsonl").read_bytes() == (tmp_path / "a" / "metrics.jsonl").read_bytes()


class TestCheckpoint:
    def test_forward_bit_exact(self, tiny_suite, tmp_path):
        suite, utts = tiny_suite
        model = make_model(suite, classes=2)
        with torch.no_grad():
            model.classifier.weight.normal_()
        save_checkpoint(tmp_path / "m.tcac", model, meta={"note": "x"})
        other = make_model(suite, seed=5, classes=2)
        meta = load_checkpoint(tmp_path / "m.tcac", other)
        assert meta == {"note": "x"}
        model.eval()
        other.eval()
        with torch.no_grad():
            x = utts[0].features
            S1, S2 = model.speech(x), other.speech(x)
            assert torch.equal(S1, S2)
            assert torch.equal(model.contextual(utts[0].token_ids, S1)[0], other.contextual(utts[0].token_ids, S2)[0])
            assert torch.equal(model.intent_logits(S1), other.intent_logits(S2))

    def test_optimizer_state_round_trip(self, tiny_suite, tmp_path):
        suite, utts = tiny_suite
        config = PretrainConfig(batch_size=2, lr=1e-3)
        model = make_model(suite)
        opt = make_adamw(model.parameters(), config.lr)
        for step in range(2):
            pretrain_step(model, opt, utts[:2], config, step)
        save_checkpoint(tmp_path / "o.tcac", model, opt)
        twin = make_model(suite, seed=3)
        twin_opt = make_adamw(twin.parameters(), config.lr)
        load_checkpoint(tmp_path / "o.tcac", twin, twin_opt)
        a = pretrain_step(model, opt, utts[2:4], config, 2)
        b = pretrain_step(twin, twin_opt, utts[2:4], config, 2)
        assert a == b
        for p, q in zip(model.parameters(), twin.parameters()):
            assert torch.equal(p, q)


class TestFinetune:
    def test_initial_loss_is_log_classes(self, tiny_suite):
        suite, utts = tiny_suite
        model = make_model(suite, classes=2)
        config = FinetuneConfig(n_classes=2, lr=1e-3)
        loss = finetune_step(model, make_adamw(model.parameters(), 1e-3), utts[:4], config, 0)
        assert loss == pytest.approx(math.log(2), abs=1e-6)

    def test_label_out_of_range(self, tiny_suite):
        suite, utts = tiny_suite
        bad = Utterance("bad", utts[0].features, label=2)
        model = make_model(suite, classes=2)
        with pytest.raises(DataError):
            finetune_step(model, make_adamw(model.parameters(), 1e-3), [bad], FinetuneConfig(n_classes=2), 0)

    def test_separable_reaches_full_train_accuracy(self, tiny_suite):
        suite, utts = tiny_suite
        model = make_model(suite)
        config = FinetuneConfig(n_classes=2, lr=1e-2, max_epochs=30, batch_size=4, patience=30)
        history = finetune(model, utts, config)
        assert history[-1]["train_acc"] == 1.0 or max(r["train_acc"] for r in history) == 1.0

    def test_deterministic_and_specaugment_changes_trajectory(self, tiny_suite):
        suite, utts = tiny_suite
        base = dict(n_classes=2, lr=1e-3, max_epochs=2, batch_size=4)
        off1 = finetune(make_model(suite), utts, FinetuneConfig(**base))
        off2 = finetune(make_model(suite), utts, FinetuneConfig(**base))
        on = finetune(make_model(suite), utts, FinetuneConfig(**base, specaugment=True), policy=NARROW)
        assert off1 == off2
        assert on[0]["loss"] != off1[0]["loss"]

    def test_step_one_differs_with_specaugment(self, tiny_suite):
        suite, utts = tiny_suite
        losses = []
        for aug in (False, True):
            model = make_model(suite, classes=2)
            with torch.no_grad():
                model.classifier.weight.normal_(generator=torch.Generator().manual_seed(0))
            config = FinetuneConfig(n_classes=2, specaugment=aug)
            losses.append(finetune_step(model, make_adamw(model.parameters(), 1e-3), utts[:4], config, 0, NARROW))
        assert losses[0] != losses[1]

    def test_early_stopping(self, tiny_suite):
        suite, utts = tiny_suite
        config = FinetuneConfig(n_classes=2, lr=0.0, max_epochs=10, patience=2, weight_decay=0.0)
        history = finetune(make_model(suite), utts[:8], config, val=utts[8:])
        assert len(history) == 3

    def test_features_untouched(self, tiny_suite):
        suite, utts = tiny_suite
        copies = [u.features.copy() for u in utts]
        finetune(make_model(suite), utts, FinetuneConfig(n_classes=2, max_epochs=1, specaugment=True), policy=NARROW)
        for u, c in zip(utts, copies):
            np.testing.assert_array_equal(u.features, c)


class TestEvaluateAccuracy:
    def test_zero_head_predicts_class_zero(self, tiny_suite):
        suite, utts = tiny_suite
        model = make_model(suite, classes=3)
        zeros = [Utterance(u.uid, u.features, label=0) for u in utts[:5]]
        assert evaluate_accuracy(model, zeros) == 1.0
        assert evaluate_accuracy(model, [Utterance("x", utts[0].features, label=1)]) == 0.0

    def test_random_head_on_balanced_binary(self):
        suite, utts = suite_utterances(n=400, seed=11)
        model = make_model(suite, classes=2)
        with torch.no_grad():
            model.classifier.weight.normal_(generator=torch.Generator().manual_seed(1))
        rng = np.random.default_rng(2)
        labels = rng.permutation(np.repeat([0, 1], 200))
        data = [Utterance(u.uid, u.features, label=int(l)) for u, l in zip(utts, labels)]
        assert abs(evaluate_accuracy(model, data) - 0.5) < 0.05

    def test_empty(self, tiny_suite):
        with pytest.raises(EmptyInputError):
            evaluate_accuracy(make_model(tiny_suite[0], classes=2), [])


def test_alignment_metrics_keys(tiny_suite):
    suite, utts = tiny_suite
    out = alignment_metrics(make_model(suite), utts, PretrainConfig(batch_size=4))
    assert set(out) == {"val_loss", "retrieval_acc", "diag_score"}
    assert 0.0 <= out["retrieval_acc"] <= 1.0
