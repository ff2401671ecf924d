"""Part sequence network.

The backbone volume is pooled into ``N`` width-wise slabs, the slab vectors
run through a bi-directional LSTM, and the concatenated hidden states feed a
part classifier. A second classifier sits on the pooled global vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ran import Backbone, init_head
from .tensor_core import (
    LSTMParams,
    Tensor,
    avg_pool_rect,
    concat,
    global_avg_pool,
    linear,
    lstm_cell,
    stack,
)


@dataclass
class PsnModel:
    backbone: Backbone
    lstm_fwd: LSTMParams
    lstm_bwd: LSTMParams
    part_weight: Tensor  # [N*U, K]
    part_bias: Tensor
    global_weight: Tensor  # [C, K]
    global_bias: Tensor
    seq_len: int  # N
    gap_mode: str = "sum"

    def __post_init__(self):
        if self.lstm_fwd.hidden != self.lstm_bwd.hidden:
            raise ValueError("forward and backward LSTM must share a hidden size")
        if self.part_weight.shape[0] != self.seq_len * self.hidden:
            raise ValueError(
                f"part head expects {self.part_weight.shape[0]} inputs, sequence gives {self.seq_len}x{self.hidden}"
            )

    @property
    def hidden(self) -> int:
        """U, the per-step width of the concatenated bi-LSTM state."""
        return 2 * self.lstm_fwd.hidden

    @property
    def num_classes(self) -> int:
        return self.global_weight.shape[1]

    @classmethod
    def init(
        cls,
        channels,
        pool_after,
        seq_len: int,
        hidden: int,
        num_classes: int,
        rng: np.random.Generator,
        image_hw: tuple[int, int],
        gap_mode: str = "sum",
        head_init: str = "normal",
        dtype=np.float32,
        backbone: Backbone | None = None,
    ) -> "PsnModel":
        if hidden % 2:
            raise ValueError(f"hidden size U must be even, got {hidden}")
        backbone = backbone or Backbone.init(3, channels, pool_after, rng, dtype)
        _, wf = backbone.output_hw(*image_hw)
        if wf % seq_len:
            raise ValueError(f"sequence length N={seq_len} must divide feature width {wf}")
        c = backbone.out_channels
        pw, pb = init_head(seq_len * hidden, num_classes, rng, head_init, dtype)
        gw, gb = init_head(c, num_classes, rng, head_init, dtype)
        return cls(
            backbone=backbone,
            lstm_fwd=LSTMParams.init(c, hidden // 2, rng, dtype),
            lstm_bwd=LSTMParams.init(c, hidden // 2, rng, dtype),
            part_weight=pw,
            part_bias=pb,
            global_weight=gw,
            global_bias=gb,
            seq_len=seq_len,
            gap_mode=gap_mode,
        )

    def part_params(self, prefix: str) -> dict:
        out = self.lstm_fwd.named(f"{prefix}.lstm_fwd")
        out.update(self.lstm_bwd.named(f"{prefix}.lstm_bwd"))
        out[f"{prefix}.part_head.weight"] = self.part_weight
        out[f"{prefix}.part_head.bias"] = self.part_bias
        return out

    def named(self, prefix: str = "psn") -> dict:
        out = self.backbone.named(f"{prefix}.backbone")
        out[f"{prefix}.global_head.weight"] = self.global_weight
        out[f"{prefix}.global_head.bias"] = self.global_bias
        out.update(self.part_params(prefix))
        return out


def serialize_features(x: Tensor, seq_len: int) -> Tensor:
    """``[B,C,Hf,Wf] -> [B,N,C]``: mean over full height and ``Wf/N``-wide slabs.

    A ``[C,Hf,Wf]`` input gives ``[N,C]``.
    """
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    B, C, hf, wf = x.shape
    if seq_len < 1 or wf % seq_len:
        raise ValueError(f"sequence length N={seq_len} must divide feature width {wf}")
    pooled = avg_pool_rect(x, hf, wf // seq_len)  # [B, C, 1, N]
    seq = pooled.reshape(B, C, seq_len).transpose(0, 2, 1)
    return seq[0] if single else seq


def _run_direction(steps: list[Tensor], params: LSTMParams) -> list[Tensor]:
    B = steps[0].shape[0]
    zeros = np.zeros((B, params.hidden), dtype=steps[0].dtype)
    h, c = Tensor(zeros, dtype=zeros.dtype), Tensor(zeros, dtype=zeros.dtype)
    out = []
    for x in steps:
        h, c = lstm_cell(x, h, c, params)
        out.append(h)
    return out


def bilstm_map(y: Tensor, model: PsnModel) -> Tensor:
    """``[B,N,C] -> [B,N,U]``; row ``i`` is ``concat(h_fwd[i], h_bwd[i])``.

    Both directions start from zero state; the backward LSTM reads the
    sequence from ``Y_N`` down to ``Y_1``.
    """
    single = y.ndim == 2
    if single:
        y = y.reshape(1, *y.shape)
    if y.shape[1] != model.seq_len:
        raise ValueError(f"bilstm_map: sequence of length {y.shape[1]}, model expects N={model.seq_len}")
    steps = [y[:, i, :] for i in range(y.shape[1])]
    fwd = _run_direction(steps, model.lstm_fwd)
    bwd = _run_direction(steps[::-1], model.lstm_bwd)[::-1]
    states = stack([concat([f, b], axis=1) for f, b in zip(fwd, bwd)], axis=1)
    return states[0] if single else states


def part_logits(states: Tensor, model: PsnModel) -> Tensor:
    single = states.ndim == 2
    flat = states.reshape(1, -1) if single else states.reshape(states.shape[0], -1)
    logits = linear(flat, model.part_weight, model.part_bias)
    return logits[0] if single else logits


@dataclass
class PsnOutput:
    features: Tensor  # X, [B,C,Hf,Wf]
    pooled: Tensor  # P_g, [B,C]
    logits_global: Tensor
    parts: Tensor | None  # P_P, [B,N,U]
    logits_part: Tensor | None


def psn_forward(region, model: PsnModel, part_branch: bool = True) -> PsnOutput:
    """Global and (optionally) part branch on a batch of regions ``[B,3,H,W]``.

    With ``part_branch=False`` only the backbone, pooling and global head run.
    """
    x = region if isinstance(region, Tensor) else Tensor(region)
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    feats = model.backbone(x)
    pooled = global_avg_pool(feats, mode=model.gap_mode)
    logits_g = linear(pooled, model.global_weight, model.global_bias)
    parts = logits_p = None
    if part_branch:
        parts = bilstm_map(serialize_features(feats, model.seq_len), model)
        logits_p = part_logits(parts, model)
    if single:
        return PsnOutput(
            feats[0],
            pooled[0],
            logits_g[0],
            None if parts is None else parts[0],
            None if logits_p is None else logits_p[0],
        )
    return PsnOutput(feats, pooled, logits_g, parts, logits_p)
