"""Full model: attention network, one or more part-sequence stages, and the
joint classifier over the concatenated descriptors."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, TrainConfig
from .psn import PsnModel, PsnOutput, psn_forward
from .ran import BBox, Backbone, CamMap, RanModel, RanOutput, crop_and_zoom, init_head, locate, ran_forward
from .tensor_core import Tensor, concat, linear, no_grad, softmax_cross_entropy


class NonFiniteLossError(FloatingPointError):
    def __init__(self, branch: str, value: float):
        super().__init__(f"non-finite loss in branch {branch}: {value}")
        self.branch = branch
        self.value = value


@dataclass
class ReapsModel:
    ran: RanModel
    psn_stages: list
    joint_weight: Tensor  # [D_joint, K]
    joint_bias: Tensor
    config: ModelConfig
    image_size: int

    @property
    def num_classes(self) -> int:
        return self.ran.num_classes

    @property
    def part_branch(self) -> bool:
        return self.config.part_branch

    def ran_parameters(self) -> dict:
        return self.ran.named("ran")

    def psn_parameters(self) -> dict:
        out = {}
        for i, psn in enumerate(self.psn_stages):
            out.update(psn.named(f"psn{i}"))
        return out

    def part_parameters(self) -> dict:
        out = {}
        for i, psn in enumerate(self.psn_stages):
            out.update(psn.part_params(f"psn{i}"))
        return out

    def joint_parameters(self) -> dict:
        return {"joint_head.weight": self.joint_weight, "joint_head.bias": self.joint_bias}

    def named_parameters(self) -> dict:
        """Every parameter by stable name, in a fixed order."""
        out = self.ran_parameters()
        out.update(self.psn_parameters())
        out.update(self.joint_parameters())
        return out

    def trainable_parameters(self) -> dict:
        """Parameters the optimizer should see; the part branch is left out under ``wo-part``."""
        params = self.named_parameters()
        if not self.part_branch:
            for name in self.part_parameters():
                params.pop(name)
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.trainable_parameters().values())

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def astype(self, dtype) -> "ReapsModel":
        clone = copy.deepcopy(self)
        for p in clone.named_parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return clone

    def load_arrays(self, arrays: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = arrays[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)


def joint_dim(cfg: ModelConfig, ran_channels: int, psn_channels: int) -> int:
    per_stage = psn_channels + (cfg.seq_len * cfg.hidden if cfg.part_branch else 0)
    return ran_channels + cfg.stages * per_stage


def build_model(
    cfg: ModelConfig, num_classes: int, image_size: int = 64, seed: int = 0, dtype=np.float32
) -> ReapsModel:
    """Fresh model. Every stage backbone starts as a copy of the attention
    backbone (shared initialisation, independent weights)."""
    cfg.validate()
    rng = np.random.default_rng([seed, 31337])
    backbone = Backbone.init(
        3, cfg.channels, cfg.pool_after, rng, dtype, gain=cfg.init_gain, offset=cfg.input_offset
    )
    hw, ww = backbone.output_hw(image_size, image_size)
    if hw < 1 or ww < 1:
        raise ValueError(f"backbone reduces a {image_size}px image to nothing")
    hw_crop = backbone.output_hw(cfg.crop_size, cfg.crop_size)
    if hw_crop[1] % cfg.seq_len:
        raise ValueError(f"sequence length N={cfg.seq_len} must divide feature width {hw_crop[1]}")
    head_w, head_b = init_head(backbone.out_channels, num_classes, rng, cfg.head_init, dtype)
    ran = RanModel(copy.deepcopy(backbone), head_w, head_b, gap_mode=cfg.gap_mode)
    stages = [
        PsnModel.init(
            cfg.channels,
            cfg.pool_after,
            cfg.seq_len,
            cfg.hidden,
            num_classes,
            rng,
            (cfg.crop_size, cfg.crop_size),
            gap_mode=cfg.gap_mode,
            head_init=cfg.head_init,
            dtype=dtype,
            backbone=copy.deepcopy(backbone),
        )
        for _ in range(cfg.stages)
    ]
    c = backbone.out_channels
    jw, jb = init_head(joint_dim(cfg, c, c), num_classes, rng, cfg.head_init, dtype)
    return ReapsModel(ran, stages, jw, jb, cfg, image_size)


def joint_representation(a_g: Tensor, p_g: Tensor, p_p: Tensor | None = None) -> Tensor:
    """``concat(A_g, P_g, flatten(P_P))``; works on single vectors or batches."""
    single = a_g.ndim == 1
    if single:
        a_g, p_g = a_g.reshape(1, -1), p_g.reshape(1, -1)
        if p_p is not None:
            p_p = p_p.reshape(1, *p_p.shape)
    parts = [a_g, p_g]
    if p_p is not None:
        parts.append(p_p.reshape(p_p.shape[0], -1))
    out = concat(parts, axis=1)
    return out[0] if single else out


def balance_block(block: Tensor, norm: float) -> Tensor:
    """Detached copy of a ``[B, D]`` descriptor block, rescaled per row to L2 norm ``norm``.

    Sum-pooled features run about a hundred times larger than LSTM outputs,
    so raw concatenation leaves the part block invisible to an SGD-trained
    head. ``norm = 0`` returns the raw values.
    """
    x = block.data
    if not norm:
        return Tensor(x, dtype=x.dtype)
    length = np.sqrt(np.square(x, dtype=np.float64).sum(axis=1, keepdims=True))
    return Tensor((x * (norm / np.maximum(length, 1e-12))).astype(x.dtype), dtype=x.dtype)


def final_classify(features: Tensor, model: ReapsModel) -> Tensor:
    single = features.ndim == 1
    x = features.reshape(1, -1) if single else features
    logits = linear(x, model.joint_weight, model.joint_bias)
    return logits[0] if single else logits


@dataclass
class StageOutput:
    psn: PsnOutput
    boxes: list  # BBox per sample, in the frame of this stage's source image
    cams: list  # CamMap per sample
    regions: np.ndarray  # [B,3,H2,W2], this stage's input


@dataclass
class ForwardResult:
    ran: RanOutput
    stages: list
    joint: Tensor  # F, detached from the trunk
    final_logits: Tensor


def _attend_batch(
    sources: np.ndarray,
    features: np.ndarray,
    head_weight: np.ndarray,
    classes: np.ndarray,
    tau: float,
    out_hw: tuple[int, int],
    use_attention: bool,
) -> tuple[np.ndarray, list, list]:
    B, _, H, W = sources.shape
    regions = np.empty((B, sources.shape[1], *out_hw), dtype=sources.dtype)
    boxes, cams = [], []
    with no_grad():
        for b in range(B):
            if use_attention:
                box, cam = locate(features[b], head_weight, int(classes[b]), (H, W), tau)
            else:
                box, cam = BBox(0, 0, W, H), None
            regions[b] = crop_and_zoom(sources[b], box, out_hw).data
            boxes.append(box)
            cams.append(cam)
    return regions, boxes, cams


def run_stages(images, model: ReapsModel, tau: float = 0.1, labels=None) -> ForwardResult:
    """Attention network, then each part-sequence stage on the previous crop.

    Stage 1 crops the input image using the attention network's class map.
    Stage k >= 2 builds its class map from stage k-1's backbone features and
    global head, and crops stage k-1's input region. ``labels`` selects the
    mapped class (training); without labels the arg-max of the source
    branch's logits is used. Crops are constants on the tape.
    """
    x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    cfg = model.config
    out_hw = (cfg.crop_size, cfg.crop_size)
    use_attention = cfg.ablation != "wo-attend"

    ran_out = ran_forward(Tensor(x, dtype=x.dtype), model.ran)
    sources = x
    src_feats, src_weight, src_logits = ran_out.features.data, model.ran.head_weight.data, ran_out.logits.data
    norm = cfg.joint_block_norm
    stages, descriptors = [], [balance_block(ran_out.pooled, norm)]
    for psn in model.psn_stages:
        classes = np.asarray(labels) if labels is not None else src_logits.argmax(axis=1)
        regions, boxes, cams = _attend_batch(sources, src_feats, src_weight, classes, tau, out_hw, use_attention)
        out = psn_forward(Tensor(regions, dtype=regions.dtype), psn, part_branch=model.part_branch)
        stages.append(StageOutput(out, boxes, cams, regions))
        descriptors.append(balance_block(out.pooled, norm))
        if out.parts is not None:
            descriptors.append(balance_block(out.parts.reshape(regions.shape[0], -1), norm))
        sources = regions
        src_feats, src_weight, src_logits = out.features.data, psn.global_weight.data, out.logits_global.data
    joint = concat(descriptors, axis=1)
    return ForwardResult(ran_out, stages, joint, final_classify(joint, model))


def joint_loss(loss_attend: Tensor, loss_global: Tensor, loss_part: Tensor | None, cfg: TrainConfig) -> Tensor:
    """``lambda1*L_A + lambda2*L_g + lambda3*L_p``; ``loss_part`` may be absent."""
    branches = {"L_A": loss_attend, "L_g": loss_global, "L_p": loss_part}
    for name, value in branches.items():
        if value is not None and not np.isfinite(value.data).all():
            raise NonFiniteLossError(name, float(value.data))
    total = cfg.lambda1 * loss_attend + cfg.lambda2 * loss_global
    if loss_part is not None:
        total = total + cfg.lambda3 * loss_part
    return total


@dataclass
class TrainStep:
    loss: Tensor
    losses: dict  # branch name -> float
    result: ForwardResult
    correct: dict = field(default_factory=dict)  # branch name -> bool array


def branch_predictions(result: ForwardResult) -> dict:
    preds = {"final": result.final_logits.data.argmax(1), "ran": result.ran.logits.data.argmax(1)}
    for i, st in enumerate(result.stages):
        key = "" if i == 0 else str(i + 1)
        preds[f"psn{key}_global"] = st.psn.logits_global.data.argmax(1)
        if st.psn.logits_part is not None:
            preds[f"psn{key}_part"] = st.psn.logits_part.data.argmax(1)
    return preds


def forward_train(images, labels, model: ReapsModel, cfg: TrainConfig) -> TrainStep:
    """Loss for one batch: the three weighted branch losses plus, in
    ``joint`` head mode, the final classifier's cross-entropy on detached
    descriptors (so it trains only the joint head)."""
    labels = np.asarray(labels, dtype=np.int64)
    result = run_stages(images, model, tau=cfg.tau, labels=labels)
    l_a = softmax_cross_entropy(result.ran.logits, labels)
    l_g = l_p = None
    for st in result.stages:
        lg = softmax_cross_entropy(st.psn.logits_global, labels)
        l_g = lg if l_g is None else l_g + lg
        if st.psn.logits_part is not None:
            lp = softmax_cross_entropy(st.psn.logits_part, labels)
            l_p = lp if l_p is None else l_p + lp
    total = joint_loss(l_a, l_g, l_p, cfg)
    l_final = softmax_cross_entropy(result.final_logits, labels)
    if not np.isfinite(l_final.data):
        raise NonFiniteLossError("L_final", float(l_final.data))
    if cfg.final_head_mode == "joint":
        total = total + l_final
    losses = {
        "L_A": float(l_a.data),
        "L_g": float(l_g.data),
        "L_p": float(l_p.data) if l_p is not None else float("nan"),
        "L_final": float(l_final.data),
    }
    correct = {k: v == labels for k, v in branch_predictions(result).items()}
    return TrainStep(total, losses, result, correct)


__all__ = [
    "CamMap",
    "balance_block",
    "ForwardResult",
    "NonFiniteLossError",
    "ReapsModel",
    "StageOutput",
    "TrainStep",
    "build_model",
    "final_classify",
    "forward_train",
    "joint_dim",
    "joint_loss",
    "joint_representation",
    "run_stages",
]
