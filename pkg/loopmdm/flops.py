"""Training FLOPs accounting with the C = 6ND convention.

Per optimizer step over B sequences of length L (D = B*L tokens):

    f_layer = 6 * N_layer * D
    f_base  = 6 * N_total * D
    f_loop  = f_base + (E[S] - 1) * n_m * f_layer

E[S] is kept as an exact Fraction, so f_loop - f_base equals the loop
term exactly. Attention's L^2 term is not counted.
"""
from __future__ import annotations
from dataclasses import dataclass, replace
from fractions import Fraction
import math
from typing import Any, Dict, Optional

from .model import LoopConfig, ModelConfig, expected_loop_count


def layer_parameter_count(model_cfg: ModelConfig) -> int:
    d = model_cfg.d_model
    hidden = model_cfg.mlp_ratio * d
    ada = d * 6 * d + 6 * d
    attn = 4 * d * d
    mlp = d * hidden + hidden + hidden * d + d
    return ada + attn + mlp


def non_layer_parameter_count(model_cfg: ModelConfig) -> int:
    d, V, F = model_cfg.d_model, model_cfg.vocab_size, model_cfg.time_freq_dim
    embed = (V + 1) * d
    time_mlp = F * d + d + d * d + d
    final = d * 2 * d + 2 * d + d * V + V
    return embed + time_mlp + final


def total_parameter_count(model_cfg: ModelConfig, loop_cfg: LoopConfig, include_embeddings: bool = True) -> int:
    layers = loop_cfg.n_layers_total * layer_parameter_count(model_cfg)
    return layers + (non_layer_parameter_count(model_cfg) if include_embeddings else 0)


def _fraction_text(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


@dataclass(frozen=True)
class FlopsReport:
    n_layer: int
    n_total: int
    n_m: int
    tokens_per_step: int
    expected_loops: Fraction
    f_layer: int
    f_base: int
    f_loop: Fraction
    include_embeddings: bool = True
    baseline_steps: Optional[int] = None
    matched_steps: Optional[int] = None

    @property
    def loop_overhead(self) -> Fraction:
        return self.f_loop - self.f_base

    def realized_step_flops(self, S: int) -> int:
        """FLOPs of one step that actually ran S loops."""
        return self.f_base + (S - 1) * self.n_m * self.f_layer

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_layer": self.n_layer,
            "n_total": self.n_total,
            "n_m": self.n_m,
            "tokens_per_step": self.tokens_per_step,
            "expected_loops": _fraction_text(self.expected_loops),
            "f_layer": self.f_layer,
            "f_base": self.f_base,
            "f_loop": _fraction_text(self.f_loop),
            "include_embeddings": self.include_embeddings,
            "baseline_steps": self.baseline_steps,
            "matched_steps": self.matched_steps,
        }

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "FlopsReport":
        return FlopsReport(
            n_layer=int(d["n_layer"]),
            n_total=int(d["n_total"]),
            n_m=int(d["n_m"]),
            tokens_per_step=int(d["tokens_per_step"]),
            expected_loops=Fraction(d["expected_loops"]),
            f_layer=int(d["f_layer"]),
            f_base=int(d["f_base"]),
            f_loop=Fraction(d["f_loop"]),
            include_embeddings=bool(d.get("include_embeddings", True)),
            baseline_steps=d.get("baseline_steps"),
            matched_steps=d.get("matched_steps"),
        )


def per_step_flops(
    cfg: LoopConfig,
    model_cfg: ModelConfig,
    seq_len: int,
    batch_size: int,
    include_embeddings: bool = True,
) -> FlopsReport:
    tokens = batch_size * seq_len
    n_layer = layer_parameter_count(model_cfg)
    n_total = total_parameter_count(model_cfg, cfg, include_embeddings)
    e_s = expected_loop_count(cfg)
    f_layer = 6 * n_layer * tokens
    f_base = 6 * n_total * tokens
    f_loop = f_base + (e_s - 1) * cfg.n_m * f_layer
    return FlopsReport(n_layer, n_total, cfg.n_m, tokens, e_s, f_layer, f_base, Fraction(f_loop), include_embeddings)


def matched_steps(report: FlopsReport, baseline_steps: int, baseline_step_flops=None) -> int:
    """Steps that spend baseline_steps * (baseline per-step FLOPs) at this report's f_loop.

    The baseline per-step cost defaults to the report's own f_base.
    """
    per_step = report.f_base if baseline_step_flops is None else baseline_step_flops
    return math.floor(Fraction(baseline_steps) * Fraction(per_step) / report.f_loop)


def with_matched_steps(report: FlopsReport, baseline_steps: int, baseline_step_flops=None) -> FlopsReport:
    return replace(
        report,
        baseline_steps=baseline_steps,
        matched_steps=matched_steps(report, baseline_steps, baseline_step_flops),
    )
