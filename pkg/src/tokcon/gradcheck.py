"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_checked: int
    rel_tol: float
    worst: str = ""
    details: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.rel_tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor], rel_tol: float = 1e-4,
               h: float = 1e-4, max_entries: int = 30, seed: int = 0, name: str = "fn",
               analytic: dict[str, torch.Tensor] | None = None) -> GradCheckReport:
    """Compare autograd gradients of the scalar ``fn()`` against central differences.

    ``params`` maps names to leaf tensors that ``fn`` reads. At most
    ``max_entries`` entries per tensor are probed, chosen by ``seed``.
    ``analytic`` overrides autograd with externally supplied gradients.
    """
    params = {k: v for k, v in params.items()}
    if analytic is None:
        for p in params.values():
            p.grad = None
        fn().backward()
        analytic = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                    for k, p in params.items()}
    rng = np.random.default_rng(seed)
    worst, worst_at, count = 0.0, "", 0
    details = []
    with torch.no_grad():
        for key, p in params.items():
            flat = p.view(-1)
            n = flat.numel()
            picks = rng.choice(n, size=min(n, max_entries), replace=False)
            g = analytic[key].reshape(-1)
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                err = relative_error(g[i].item(), numeric)
                details.append((key, int(i), g[i].item(), numeric, err))
                count += 1
                if not err <= worst:
                    worst, worst_at = err, f"{key}[{int(i)}]"
    return GradCheckReport(name=name, max_rel_error=worst, n_checked=count, rel_tol=rel_tol,
                           worst=worst_at, details=details)


def _readout(out: torch.Tensor, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    weights = torch.randn(out.shape, generator=g, dtype=out.dtype)
    return (out * weights).sum()


def _leaf(g: torch.Generator, *shape, scale: float = 1.0) -> torch.Tensor:
    return (torch.randn(*shape, generator=g, dtype=torch.float64) * scale).requires_grad_(True)


def standard_checks() -> dict[str, Callable[[], tuple[Callable[[], torch.Tensor], dict]]]:
    """Factories for every differentiable op at tiny float64 dims.

    Each factory returns ``(scalar_fn, params)`` ready for :func:`grad_check`.
    """
    from torch import nn

    from .contrastive import sequence_contrastive_loss, tokenwise_contrastive_loss
    from .core import (bilstm_layer, layer_norm_residual, linear, multi_head_self_attention,
                       softmax_rows)
    from .cross_modal import cls_only_forward, cross_attend
    from .encoder import EncoderConfig, SpeechEncoder

    def make_linear():
        g = torch.Generator().manual_seed(1)
        x, W, b = _leaf(g, 3, 4), _leaf(g, 4, 5), _leaf(g, 5)
        return (lambda: _readout(linear(x, W, b), 11)), {"x": x, "W": W, "bias": b}

    def make_bilstm():
        g = torch.Generator().manual_seed(2)
        lstm = nn.LSTM(3, 4, bidirectional=True).double()
        x = _leaf(g, 5, 3)
        params = {"x": x, **dict(lstm.named_parameters())}
        return (lambda: _readout(bilstm_layer(x, lstm), 12)), params

    def make_layer_norm():
        g = torch.Generator().manual_seed(3)
        x, s, gain, bias = _leaf(g, 4, 6), _leaf(g, 4, 6), _leaf(g, 6), _leaf(g, 6)
        fn = lambda: _readout(layer_norm_residual(x, s, gain, bias), 13)
        return fn, {"x": x, "sublayer_out": s, "gain": gain, "bias": bias}

    def make_softmax():
        g = torch.Generator().manual_seed(4)
        x = _leaf(g, 3, 5)
        return (lambda: _readout(softmax_rows(x), 14)), {"x": x}

    def make_self_attention():
        g = torch.Generator().manual_seed(5)
        x = _leaf(g, 4, 8)
        Ws = [_leaf(g, 8, 8, scale=0.4) for _ in range(4)]
        fn = lambda: _readout(multi_head_self_attention(x, *Ws, n_heads=2), 15)
        return fn, {"x": x, "Wq": Ws[0], "Wk": Ws[1], "Wv": Ws[2], "Wo": Ws[3]}

    def make_cross_attention():
        g = torch.Generator().manual_seed(6)
        T, S = _leaf(g, 3, 6), _leaf(g, 5, 6)
        Wq, Wk, Wv = (_leaf(g, 6, 6, scale=0.4) for _ in range(3))

        def fn():
            Bs, A = cross_attend(T, S, Wq, Wk, Wv)
            return _readout(Bs, 16) + _readout(A, 17)

        return fn, {"T": T, "S": S, "Wq": Wq, "Wk": Wk, "Wv": Wv}

    def make_cls_only():
        g = torch.Generator().manual_seed(7)
        c, S = _leaf(g, 1, 6), _leaf(g, 4, 6)
        Wq, Wk, Wv = (_leaf(g, 6, 6, scale=0.4) for _ in range(3))
        fn = lambda: _readout(cls_only_forward(c, S, Wq, Wk, Wv), 18)
        return fn, {"cls_row": c, "S": S, "Wq": Wq, "Wk": Wk, "Wv": Wv}

    def make_tokenwise():
        g = torch.Generator().manual_seed(8)
        B, Bs = _leaf(g, 6, 8), _leaf(g, 6, 8)
        return (lambda: tokenwise_contrastive_loss(B, Bs, tau=0.07)), {"B": B, "B_s": Bs}

    def make_sequence():
        g = torch.Generator().manual_seed(9)
        P, C = _leaf(g, 4, 8), _leaf(g, 4, 8)
        fn = lambda: sequence_contrastive_loss(P, C, tau=0.07)
        return fn, {"pooled_speech": P, "teacher_cls": C}

    def make_classifier():
        g = torch.Generator().manual_seed(10)
        h, W, b = _leaf(g, 3, 8), _leaf(g, 8, 4), _leaf(g, 4)
        labels = torch.tensor([0, 3, 1])
        fn = lambda: nn.functional.cross_entropy(linear(h, W, b), labels)
        return fn, {"h": h, "W": W, "bias": b}

    def make_encoder():
        g = torch.Generator().manual_seed(11)
        cfg = EncoderConfig(n_mels=5, n_layers=4, n_pyramid=3, hidden=4, d=8, n_heads=2, dropout=0.0)
        enc = SpeechEncoder(cfg, g).double()
        x = _leaf(g, 16, 5)
        params = {"features": x, **dict(enc.named_parameters())}
        return (lambda: _readout(enc(x), 19)), params

    return {
        "linear": make_linear,
        "bilstm_layer": make_bilstm,
        "layer_norm_residual": make_layer_norm,
        "softmax_rows": make_softmax,
        "multi_head_self_attention": make_self_attention,
        "cross_attend": make_cross_attention,
        "cls_only_forward": make_cls_only,
        "tokenwise_contrastive_loss": make_tokenwise,
        "sequence_contrastive_loss": make_sequence,
        "intent_classifier": make_classifier,
        "speech_encoder": make_encoder,
    }


def run_standard_checks(rel_tol: float = 1e-4, mutate: str | None = None,
                        max_entries: int = 12) -> list[GradCheckReport]:
    """Run every standard check; ``mutate`` inflates one op's analytic gradient by 10%."""
    reports = []
    for name, factory in standard_checks().items():
        fn, params = factory()
        analytic = None
        if name == mutate:
            for p in params.values():
                p.grad = None
            fn().backward()
            analytic = {k: p.grad.detach() * 1.1 for k, p in params.items()}
        reports.append(grad_check(fn, params, rel_tol=rel_tol, max_entries=max_entries,
                                  name=name, analytic=analytic))
    return reports
