"""Identification loss, center loss and its update rule, the FRW norm
constraint, the joint objective, and a pair-based verification baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, add, matmul, mul, sub, take_rows
from .tensor import sum as tsum


@dataclass
class LossConfig:
    lam: float = 0.01
    beta: float = 0.001
    C: float = 200.0

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0 or self.C <= 0:
            raise ContractError(f"invalid loss config: lambda={self.lam}, beta={self.beta}, C={self.C}")


class SoftmaxHead:
    """Linear classifier ``z = x @ W + b`` with ``W`` shaped ``D x N``."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator | None = None,
                 dtype=np.float32, init_std: float = 0.01):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = Tensor((rng.standard_normal((dim, num_classes)) * init_std).astype(dtype),
                        requires_grad=True, name="head.W")
        self.b = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True, name="head.b")

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    def logits(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"head expects embeddings of dim {self.dim}, got {x.shape}")
        return add(matmul(x, self.W), self.b)

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


class CenterTable:
    """Per-class embedding centers.  They are state, not parameters: no
    gradient ever reaches them, they move only through :func:`update_centers`."""

    def __init__(self, num_classes: int, dim: int, alpha: float = 0.5, dtype=np.float32):
        if not 0 < alpha <= 1:
            raise ContractError(f"center learning rate must lie in (0, 1], got {alpha}")
        self.centers = Tensor(np.zeros((num_classes, dim), dtype=dtype), requires_grad=False, name="centers")
        self.alpha = alpha

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def _check_labels(y, num_classes: int, batch: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp).reshape(-1)
    if y.shape[0] != batch:
        raise DimensionError(f"{y.shape[0]} labels for a batch of {batch}")
    if batch < 1:
        raise ContractError("empty batch")
    if y.min() < 0 or y.max() >= num_classes:
        raise ContractError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y


def softmax_cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true class; max-subtracted."""
    M, N = logits.shape
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(M)
    loss = -logp[rows, y].sum() / M

    def backward(g):
        p = np.exp(logp)
        p[rows, y] -= 1
        return (p * (g / M),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def identification_loss(head: SoftmaxHead, x: Tensor, y) -> Tensor:
    y = _check_labels(y, head.num_classes, x.shape[0])
    return softmax_cross_entropy(head.logits(x), y)


def center_loss(table: CenterTable, x: Tensor, y) -> Tensor:
    """``1/(2M) * sum_i ||x_i - c_{y_i}||^2`` with centers held constant."""
    if x.ndim != 2 or x.shape[1] != table.dim:
        raise DimensionError(f"center table has dim {table.dim}, embeddings are {x.shape}")
    y = _check_labels(y, table.num_classes, x.shape[0])
    targets = Tensor(table.centers.data[y], dtype=x.dtype)
    diff = sub(x, targets)
    return mul(tsum(mul(diff, diff)), 1.0 / (2 * x.shape[0]))


def update_centers(table: CenterTable, x, y) -> np.ndarray:
    """Move each class center toward the batch embeddings of that class.

    ``delta_j = sum_{i: y_i=j} (c_j - x_i) / (1 + n_j)`` and
    ``c_j <- c_j - alpha * delta_j``.  Classes absent from the batch keep
    their exact previous value.  Returns the per-class deltas.
    """
    xv = x.data if isinstance(x, Tensor) else np.asarray(x)
    y = _check_labels(y, table.num_classes, xv.shape[0])
    c = table.centers.data
    xv = xv.astype(c.dtype, copy=False)
    alpha = c.dtype.type(table.alpha)
    delta = np.zeros_like(c)
    for j in np.unique(y):
        members = xv[y == j]
        delta[j] = (c[j] - members).sum(axis=0) / c.dtype.type(1 + members.shape[0])
        c[j] = c[j] - alpha * delta[j]
    return delta


def frw_constraint(w_frw: Tensor, cfg: LossConfig) -> Tensor:
    """``beta * (||w||^2 / 2 - C)^2``."""
    half_sq = mul(tsum(mul(w_frw, w_frw)), 0.5)
    gap = sub(half_sq, cfg.C)
    return mul(mul(gap, gap), cfg.beta)


def objective(head: SoftmaxHead, table: CenterTable, w_frw: Tensor | None, x: Tensor, y, cfg: LossConfig,
              use_center: bool = True, use_frw: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Joint loss ``L_I + lambda * L_C + L_F`` plus its components as floats.

    Components that are switched off still get reported, computed on
    detached values so they cannot influence gradients.
    """
    li = identification_loss(head, x, y)
    lc = center_loss(table, x if use_center else x.detach(), y)
    total = li
    if use_center and cfg.lam > 0:
        total = add(total, mul(lc, cfg.lam))
    lf_val = 0.0
    if w_frw is not None:
        lf = frw_constraint(w_frw if use_frw else w_frw.detach(), cfg)
        lf_val = lf.item()
        if use_frw:
            total = add(total, lf)
    parts = {"L": total.item(), "L_I": li.item(), "L_C": lc.item(), "L_F": lf_val}
    return total, parts


def total_loss(head: SoftmaxHead, table: CenterTable, w_frw: Tensor | None, x: Tensor, y, cfg: LossConfig) -> Tensor:
    return objective(head, table, w_frw, x, y, cfg)[0]


class VerificationHead:
    """Two-way classifier (different / same) on the squared embedding difference."""

    def __init__(self, dim: int, rng: np.random.Generator | None = None, dtype=np.float32, init_std: float = 0.01):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = Tensor((rng.standard_normal((dim, 2)) * init_std).astype(dtype), requires_grad=True,
                        name="verif.W")
        self.b = Tensor(np.zeros(2, dtype=dtype), requires_grad=True, name="verif.b")

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


def binary_verification_loss(x1: Tensor, x2: Tensor, same, head: VerificationHead) -> Tensor:
    if x1.shape != x2.shape or x1.ndim != 2 or x1.shape[1] != head.W.shape[0]:
        raise DimensionError(f"pair embeddings {x1.shape} / {x2.shape} vs head dim {head.W.shape[0]}")
    same = _check_labels(np.asarray(same).astype(np.intp), 2, x1.shape[0])
    d = sub(x1, x2)
    logits = add(matmul(mul(d, d), head.W), head.b)
    return softmax_cross_entropy(logits, same)


def pair_verification_loss(emb: Tensor, left: np.ndarray, right: np.ndarray, same, head: VerificationHead) -> Tensor:
    """Verification loss on pairs indexed into a batch of embeddings."""
    return binary_verification_loss(take_rows(emb, left), take_rows(emb, right), same, head)


def fold_frw_into_softmax(head: SoftmaxHead, w_frw: Tensor) -> SoftmaxHead:
    """Return a head whose weights absorb the FRW reweighting, so that its
    logits on raw embeddings equal the original head's logits on
    reweighted embeddings.  The bias is carried over unchanged."""
    if w_frw.shape != (head.dim,):
        raise DimensionError(f"frw weights {w_frw.shape} vs head dim {head.dim}")
    folded = SoftmaxHead.__new__(SoftmaxHead)
    folded.W = Tensor(head.W.data * w_frw.data[:, None], requires_grad=True, name="head.W")
    folded.b = Tensor(head.b.data.copy(), requires_grad=True, name="head.b")
    return folded
