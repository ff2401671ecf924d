"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradcheckReport:
    names: list
    max_rel_error: list
    max_abs_error: list
    tol: float
    evaluations: int = 0
    notes: list = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tol for e in self.max_rel_error)

    def __str__(self) -> str:
        rows = [
            f"  {n:<24s} max_rel={r:.3e} max_abs={a:.3e}"
            for n, r, a in zip(self.names, self.max_rel_error, self.max_abs_error)
        ]
        status = "PASS" if self.passed else "FAIL"
        return "\n".join([f"gradcheck {status} (tol={self.tol:g})", *rows])


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps entries whose true gradient is ~0 from dividing round-off
    noise by round-off noise.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence,
    eps: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-5,
    names: Sequence[str] | None = None,
) -> GradcheckReport:
    """Compare ``backward`` against ``(f(x+eps) - f(x-eps)) / (2 eps)``.

    ``inputs`` may be arrays (promoted to float64 leaves) or existing leaf
    tensors, which are perturbed in place and restored afterwards; pass
    float64 tensors for a meaningful check. ``f`` receives the tensors and
    must return a scalar tensor.
    """
    leaves = []
    for x in inputs:
        if isinstance(x, Tensor):
            x.requires_grad = True
            leaves.append(x)
        else:
            leaves.append(Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, dtype=np.float64))
    names = list(names) if names is not None else [f"input{i}" for i in range(len(leaves))]

    for t in leaves:
        t.grad = None
    out = f(*leaves)
    if out.data.size != 1:
        raise ValueError(f"gradcheck: f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.astype(np.float64) for t in leaves]

    report = GradcheckReport(names=names, max_rel_error=[], max_abs_error=[], tol=tol)
    with no_grad():
        for t, a in zip(leaves, analytic):
            numeric = np.zeros(t.shape, dtype=np.float64)
            flat = t.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                fp = float(f(*leaves).data)
                flat[k] = orig - eps
                fm = float(f(*leaves).data)
                flat[k] = orig
                numeric.reshape(-1)[k] = (fp - fm) / (2 * eps)
                report.evaluations += 2
            err = relative_error(a, numeric, floor)
            report.max_rel_error.append(float(err.max()) if err.size else 0.0)
            report.max_abs_error.append(float(np.abs(a - numeric).max()) if err.size else 0.0)
    return report
