"""Network primitives: convolution, pooling, dense layers, losses, resizing, LSTM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Function, ShapeError, Tensor, sigmoid, tanh


class Conv2d(Function):
    """Direct 2-D cross-correlation as a batched GEMM over unfolded patches."""

    def forward(self, x, w, b, stride=1, pad=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError("conv2d", x.shape, w.shape, detail="expected input [B,Cin,H,W], kernel [Cout,Cin,kh,kw]")
        if b.shape != (w.shape[0],):
            raise ShapeError("conv2d", b.shape, w.shape, detail="bias must be [Cout]")
        if stride < 1:
            raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
        B, cin, H, W = x.shape
        cout, _, kh, kw = w.shape
        if kh > H + 2 * pad or kw > W + 2 * pad:
            raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
        ho = (H + 2 * pad - kh) // stride + 1
        wo = (W + 2 * pad - kw) // stride + 1
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols = np.empty((B, cin, kh, kw, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols.reshape(B, cin * kh * kw, ho * wo)
        out = np.matmul(w.reshape(cout, -1), cols)
        out += b[None, :, None]
        self.cols, self.w, self.xp_shape = cols, w, xp.shape
        self.stride, self.pad, self.out_hw = stride, pad, (ho, wo)
        return out.reshape(B, cout, ho, wo)

    def backward(self, grad):
        cout, cin, kh, kw = self.w.shape
        B = grad.shape[0]
        ho, wo = self.out_hw
        s = self.stride
        g = grad.reshape(B, cout, ho * wo)
        dw = np.matmul(g, self.cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.w.shape)
        db = grad.sum(axis=(0, 2, 3), dtype=np.float64).astype(grad.dtype)
        dcols = np.matmul(self.w.reshape(cout, -1).T, g).reshape(B, cin, kh, kw, ho, wo)
        dxp = np.zeros(self.xp_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, i, j]
        p = self.pad
        dx = dxp[:, :, p : dxp.shape[2] - p, p : dxp.shape[3] - p] if p else dxp
        return dx, dw, db


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return Conv2d.apply(x, weight, bias, stride=stride, pad=pad)


class MaxPool2d(Function):
    def forward(self, x, k=2, stride=None):
        stride = stride or k
        if x.ndim != 4:
            raise ShapeError("max_pool2d", x.shape, detail="expected [B,C,H,W]")
        B, C, H, W = x.shape
        if k > H or k > W:
            raise ShapeError("max_pool2d", x.shape, (k, k), detail="window larger than input")
        ho, wo = (H - k) // stride + 1, (W - k) // stride + 1
        best = x[:, :, 0 : stride * ho : stride, 0 : stride * wo : stride]
        arg = np.zeros(best.shape, dtype=np.int8 if k * k < 128 else np.int32)
        for idx in range(1, k * k):
            i, j = divmod(idx, k)
            cand = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            # strict comparison: the first maximum in window order wins ties
            arg = np.where(cand > best, np.asarray(idx, dtype=arg.dtype), arg)
            best = np.maximum(best, cand)
        self.arg, self.k, self.stride, self.shape, self.out_hw = arg, k, stride, x.shape, (ho, wo)
        return np.ascontiguousarray(best)

    def backward(self, grad):
        k, s = self.k, self.stride
        ho, wo = self.out_hw
        dx = np.zeros(self.shape, dtype=grad.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.where(self.arg == idx, grad, 0)
        return dx


def max_pool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    return MaxPool2d.apply(x, k=k, stride=stride)


class GlobalAvgPool(Function):
    def forward(self, x, mode="sum"):
        if x.ndim != 4:
            raise ShapeError("global_avg_pool", x.shape, detail="expected [B,C,H,W]")
        if mode not in ("sum", "mean"):
            raise ValueError(f"gap_mode must be 'sum' or 'mean', got {mode!r}")
        self.shape = x.shape
        self.scale = 1.0 if mode == "sum" else 1.0 / (x.shape[2] * x.shape[3])
        return (x.sum(axis=(2, 3), dtype=np.float64) * self.scale).astype(x.dtype)

    def backward(self, grad):
        return np.broadcast_to((grad * self.scale)[:, :, None, None], self.shape).astype(grad.dtype)


def global_avg_pool(x: Tensor, mode: str = "sum") -> Tensor:
    """Per-channel spatial pooling ``[B,C,H,W] -> [B,C]``.

    ``mode="sum"`` (the default) adds every spatial activation of a channel;
    ``mode="mean"`` divides that sum by ``H*W``.
    """
    return GlobalAvgPool.apply(x, mode=mode)


class AvgPoolRect(Function):
    def forward(self, x, kh=1, kw=1):
        H, W = x.shape[-2:]
        if kh < 1 or kw < 1 or H % kh or W % kw:
            raise ShapeError("avg_pool_rect", x.shape, (kh, kw), detail="kernel must divide the spatial dims")
        lead = x.shape[:-2]
        blocks = x.reshape(*lead, H // kh, kh, W // kw, kw)
        self.shape, self.k = x.shape, (kh, kw)
        return blocks.mean(axis=(-3, -1), dtype=np.float64).astype(x.dtype)

    def backward(self, grad):
        kh, kw = self.k
        g = grad / (kh * kw)
        g = np.repeat(np.repeat(g, kh, axis=-2), kw, axis=-1)
        return g.astype(grad.dtype).reshape(self.shape)


def avg_pool_rect(x: Tensor, kh: int, kw: int) -> Tensor:
    """Non-overlapping mean pooling with a ``kh x kw`` window over the last two axes."""
    return AvgPoolRect.apply(x, kh=kh, kw=kw)


class Linear(Function):
    def forward(self, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError("linear", x.shape, w.shape, b.shape)
        self.x, self.w = x, w
        return x @ w + b

    def backward(self, grad):
        db = grad.sum(axis=0, dtype=np.float64).astype(grad.dtype)
        return grad @ self.w.T, self.x.T @ grad, db


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(x, weight, bias)


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, labels=None):
        if logits.ndim != 2:
            raise ShapeError("softmax_cross_entropy", logits.shape, detail="expected [B,K]")
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        B, K = logits.shape
        if labels.shape != (B,):
            raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
        if labels.size and (labels.min() < 0 or labels.max() >= K):
            raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {K}), got {labels.tolist()}")
        z = logits.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        self.probs = np.exp(z - lse[:, None])
        self.labels = labels
        loss = (lse - z[np.arange(B), labels]).mean()
        return np.asarray(loss, dtype=logits.dtype)

    def backward(self, grad):
        B = self.probs.shape[0]
        g = self.probs.copy()
        g[np.arange(B), self.labels] -= 1.0
        return (g * (float(grad) / B)).astype(grad.dtype)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    return SoftmaxCrossEntropy.apply(logits, labels=labels)


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row ``d`` holds the two-tap linear weights sampling source coordinate
    ``(d + 0.5) * n_in / n_out - 0.5``, clamped to ``[0, n_in - 1]``."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


class BilinearResize(Function):
    def forward(self, x, out_h=1, out_w=1):
        if out_h < 1 or out_w < 1:
            raise ValueError(f"bilinear_resize: output size must be positive, got {(out_h, out_w)}")
        if x.ndim < 2:
            raise ShapeError("bilinear_resize", x.shape, detail="need at least [H,W]")
        H, W = x.shape[-2:]
        self.ry = resize_matrix(H, out_h)
        self.rx = resize_matrix(W, out_w)
        out = self.ry @ x.astype(np.float64) @ self.rx.T
        return out.astype(x.dtype)

    def backward(self, grad):
        return (self.ry.T @ grad.astype(np.float64) @ self.rx).astype(grad.dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes with half-pixel-centred bilinear sampling."""
    return BilinearResize.apply(x, out_h=out_h, out_w=out_w)


@dataclass
class LSTMParams:
    """Gate weights for one LSTM direction, gates packed in i, f, g, o order."""

    w_x: Tensor  # [D, 4*H]
    w_h: Tensor  # [H, 4*H]
    b: Tensor  # [4*H]

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32) -> "LSTMParams":
        bound = 1.0 / np.sqrt(hidden)
        return cls(
            w_x=Tensor(rng.uniform(-bound, bound, (in_dim, 4 * hidden)), requires_grad=True, dtype=dtype),
            w_h=Tensor(rng.uniform(-bound, bound, (hidden, 4 * hidden)), requires_grad=True, dtype=dtype),
            b=Tensor(np.zeros(4 * hidden), requires_grad=True, dtype=dtype),
        )

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.w_x": self.w_x, f"{prefix}.w_h": self.w_h, f"{prefix}.b": self.b}


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, params: LSTMParams) -> tuple[Tensor, Tensor]:
    """One LSTM step on a batch: ``x [B,D]``, ``h, c [B,H]``."""
    hid = params.hidden
    if x.ndim != 2 or x.shape[1] != params.w_x.shape[0]:
        raise ShapeError("lstm_cell", x.shape, params.w_x.shape)
    if h.shape != (x.shape[0], hid) or c.shape != h.shape:
        raise ShapeError("lstm_cell", h.shape, c.shape, detail=f"state must be [B,{hid}]")
    gates = x @ params.w_x + h @ params.w_h + params.b
    i = sigmoid(gates[:, 0:hid])
    f = sigmoid(gates[:, hid : 2 * hid])
    g = tanh(gates[:, 2 * hid : 3 * hid])
    o = sigmoid(gates[:, 3 * hid : 4 * hid])
    c_next = f * c + i * g
    h_next = o * tanh(c_next)
    return h_next, c_next
