"""Region attending network: conv backbone + pooled linear head, class
activation maps, mask thresholding, box extraction and crop-and-zoom."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .tensor_core import (
    Tensor,
    bilinear_resize,
    conv2d,
    global_avg_pool,
    linear,
    max_pool2d,
    no_grad,
    relu,
)


@dataclass
class ConvLayer:
    weight: Tensor  # [Cout, Cin, 3, 3]
    bias: Tensor  # [Cout]
    pool: bool  # 2x2 max-pool after the relu


class Backbone:
    """Stack of 3x3 conv + relu blocks, optionally followed by 2x2 max-pooling.

    ``offset`` is subtracted from the input first, centring [0, 1] images.
    """

    def __init__(self, layers: list[ConvLayer], offset: float = 0.0):
        self.layers = layers
        self.offset = offset

    @classmethod
    def init(
        cls, in_channels, channels, pool_after, rng, dtype=np.float32, gain: float = 1.0, offset: float = 0.0
    ) -> "Backbone":
        layers = []
        cin = in_channels
        for idx, cout in enumerate(channels):
            std = gain * np.sqrt(2.0 / (cin * 9))
            layers.append(
                ConvLayer(
                    weight=Tensor(rng.normal(0.0, std, (cout, cin, 3, 3)), requires_grad=True, dtype=dtype),
                    bias=Tensor(np.zeros(cout), requires_grad=True, dtype=dtype),
                    pool=idx in pool_after,
                )
            )
            cin = cout
        return cls(layers, offset)

    @property
    def out_channels(self) -> int:
        return self.layers[-1].weight.shape[0]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        for layer in self.layers:
            if layer.pool:
                h, w = h // 2, w // 2
        return h, w

    def __call__(self, x: Tensor) -> Tensor:
        if self.offset:
            x = x - self.offset
        for layer in self.layers:
            x = relu(conv2d(x, layer.weight, layer.bias, stride=1, pad=1))
            if layer.pool:
                x = max_pool2d(x, 2)
        return x

    def named(self, prefix: str) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.conv{i}.weight"] = layer.weight
            out[f"{prefix}.conv{i}.bias"] = layer.bias
        return out


def init_head(in_dim: int, num_classes: int, rng, mode: str, dtype=np.float32) -> tuple[Tensor, Tensor]:
    if mode == "zeros":
        w = np.zeros((in_dim, num_classes))
    elif mode == "normal":
        w = rng.normal(0.0, 0.01, (in_dim, num_classes))
    else:
        raise ValueError(f"unknown head_init {mode!r} (expected 'zeros' or 'normal')")
    return (
        Tensor(w, requires_grad=True, dtype=dtype),
        Tensor(np.zeros(num_classes), requires_grad=True, dtype=dtype),
    )


@dataclass
class RanModel:
    backbone: Backbone
    head_weight: Tensor  # [C', K]
    head_bias: Tensor  # [K]
    gap_mode: str = "sum"

    def __post_init__(self):
        if self.backbone.out_channels != self.head_weight.shape[0]:
            raise ValueError(
                f"backbone emits {self.backbone.out_channels} channels but head expects {self.head_weight.shape[0]}"
            )

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[1]

    def named(self, prefix: str = "ran") -> dict:
        out = self.backbone.named(f"{prefix}.backbone")
        out[f"{prefix}.head.weight"] = self.head_weight
        out[f"{prefix}.head.bias"] = self.head_bias
        return out


@dataclass
class RanOutput:
    features: Tensor  # [B, C', Hf, Wf]
    pooled: Tensor  # A_g, [B, C']
    logits: Tensor  # [B, K]


def _batched(image) -> tuple[Tensor, bool]:
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    return x, False


def ran_forward(image, model: RanModel) -> RanOutput:
    """Backbone features, their pooled vector and the class logits.

    Accepts ``[3,H,W]`` or ``[B,3,H,W]``; single images come back without the
    batch axis.
    """
    x, single = _batched(image)
    feats = model.backbone(x)
    pooled = global_avg_pool(feats, mode=model.gap_mode)
    logits = linear(pooled, model.head_weight, model.head_bias)
    if single:
        return RanOutput(feats[0], pooled[0], logits[0])
    return RanOutput(feats, pooled, logits)


@dataclass
class CamMap:
    values: np.ndarray  # [Hf, Wf]
    class_index: int
    source_shape: tuple  # (H, W) of the image the features came from


@dataclass
class BinaryMask:
    bits: np.ndarray  # bool [Hf, Wf]
    tau: float


@dataclass(frozen=True)
class BBox:
    """Pixel box, ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def is_valid(self, height: int, width: int) -> bool:
        return 0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height

    def iou(self, other: "BBox") -> float:
        ix = max(0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union else 0.0


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def compute_cam(features, head_weight, c: int, source_shape: tuple | None = None) -> CamMap:
    """Weighted channel sum ``sum_k W[k, c] * features[k]`` for one class.

    Not recorded on the tape.
    """
    f = _array(features)
    w = _array(head_weight)
    if f.ndim != 3 or w.ndim != 2 or f.shape[0] != w.shape[0]:
        raise ValueError(f"compute_cam: features {f.shape} do not match head weight {w.shape}")
    if not 0 <= c < w.shape[1]:
        raise ValueError(f"compute_cam: class index {c} outside [0, {w.shape[1]})")
    values = np.tensordot(w[:, c].astype(np.float64), f.astype(np.float64), axes=(0, 0))
    return CamMap(values.astype(f.dtype), int(c), tuple(source_shape) if source_shape else f.shape[1:])


def threshold_mask(cam: CamMap, tau: float) -> BinaryMask:
    """Min-max normalise the map to [0, 1] and keep cells ``>= tau``.

    A flat map has no preferred region, so every cell is kept.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    v = cam.values.astype(np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return BinaryMask(np.ones(v.shape, dtype=bool), tau)
    return BinaryMask((v - lo) / (hi - lo) >= tau, tau)


def _components(bits: np.ndarray) -> list[list[tuple[int, int]]]:
    """4-connected components in row-major discovery order."""
    h, w = bits.shape
    seen = np.zeros_like(bits, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if not bits[r, c] or seen[r, c]:
                continue
            cells, queue = [], deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                cells.append((y, x))
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and bits[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            comps.append(cells)
    return comps


def largest_component_bbox(mask: BinaryMask, input_shape: tuple) -> BBox:
    """Tight box of the biggest 4-connected blob, mapped to input pixels.

    Ties go to the component found first in row-major scan order. Grid
    coordinates are scaled by ``H/Hf`` and ``W/Wf`` and rounded outward. An
    empty mask yields the whole image.
    """
    H, W = input_shape
    bits = np.asarray(mask.bits, dtype=bool)
    hf, wf = bits.shape
    comps = _components(bits)
    if not comps:
        return BBox(0, 0, W, H)
    best = max(comps, key=len)  # max() keeps the first of equal-size components
    rows = [p[0] for p in best]
    cols = [p[1] for p in best]
    r0, r1 = min(rows), max(rows) + 1
    c0, c1 = min(cols), max(cols) + 1
    y0, y1 = (r0 * H) // hf, -((-r1 * H) // hf)
    x0, x1 = (c0 * W) // wf, -((-c1 * W) // wf)
    return BBox(max(0, x0), max(0, y0), min(W, x1), min(H, y1))


def crop_and_zoom(image, box: BBox, out: tuple[int, int]) -> Tensor:
    """Slice ``box`` out of a ``[C,H,W]`` image and resize it to ``out``."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    H, W = x.shape[-2:]
    if not box.is_valid(H, W):
        raise ValueError(f"crop_and_zoom: box {box.as_tuple()} invalid for image {H}x{W}")
    region = x[..., box.y0 : box.y1, box.x0 : box.x1]
    return bilinear_resize(region, out[0], out[1])


@dataclass
class Attention:
    region: Tensor  # [3, H2, W2]
    box: BBox
    cam: CamMap


def locate(features, head_weight, c: int, image_hw: tuple, tau: float) -> tuple[BBox, CamMap]:
    cam = compute_cam(features, head_weight, c, source_shape=image_hw)
    return largest_component_bbox(threshold_mask(cam, tau), image_hw), cam


def attend(
    image,
    model: RanModel,
    class_choice: str = "predicted",
    label: int | None = None,
    tau: float = 0.1,
    out: tuple[int, int] | None = None,
) -> Attention:
    """Attended region of a single ``[3,H,W]`` image.

    ``class_choice="label"`` builds the map for ``label`` (training);
    ``"predicted"`` uses the arg-max of the logits (inference).
    """
    img = _array(image)
    H, W = img.shape[-2:]
    with no_grad():
        res = ran_forward(img, model)
    if class_choice == "label":
        if label is None:
            raise ValueError("attend: class_choice='label' needs a label")
        c = int(label)
    elif class_choice == "predicted":
        c = int(np.argmax(res.logits.data))
    else:
        raise ValueError(f"unknown class_choice {class_choice!r}")
    box, cam = locate(res.features.data, model.head_weight.data, c, (H, W), tau)
    with no_grad():
        region = crop_and_zoom(img, box, out or (H, W))
    return Attention(region, box, cam)
