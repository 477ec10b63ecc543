"""Self-check suites run by ``frwreid verify``: finite-difference gradients,
the FRW-folding identity, the center-update oracle, the no-backprop
contract for centers, and the CMC ranking oracle.  All run in float64."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError
from .evaluation import DistanceMatrix, cmc_single_shot
from .layers import batch_norm, conv2d, fc_forward, frw_forward, leaky_relu, max_pool2d
from .losses import (
    CenterTable,
    LossConfig,
    SoftmaxHead,
    VerificationHead,
    binary_verification_loss,
    center_loss,
    fold_frw_into_softmax,
    frw_constraint,
    identification_loss,
    total_loss,
    update_centers,
)
from .model import ModelConfig, build
from .tensor import Tensor, backward, check_parameter_gradients
from .tensor import sum as tsum

GRAD_TOL = 1e-4
FOLD_TOL = 1e-10


@dataclass
class SuiteResult:
    name: str
    max_error: float
    tolerance: float
    passed: bool
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name}: max error {self.max_error:.3e} (tolerance {self.tolerance:g}, " \
               f"{self.seconds:.1f}s)"
        return f"{text} {self.detail}" if self.detail else text


def _t(a, grad=True) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def _projected(out: Tensor, seed: int) -> Tensor:
    """Scalar ``sum(out * R)`` with R fixed by ``seed``, so every output entry
    contributes its own weight to the checked gradient."""
    r = Tensor(np.random.default_rng([seed, 102]).normal(size=out.shape))
    return tsum(Tensor.from_op(out.data * r.data, (out,), lambda g: (g * r.data,)))


def gradient_cases(seed: int) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """One small problem per layer and per loss term, keyed by name."""
    rng = np.random.default_rng([seed, 101])
    cases = {}

    x = _t(rng.normal(size=(2, 2, 5, 4)))
    w, b = _t(rng.normal(size=(3, 2, 3, 3))), _t(rng.normal(size=3))
    cases["conv2d"] = (lambda r=seed: _projected(conv2d(x, w, b), r), [x, w, b])

    xp = _t(rng.normal(size=(2, 2, 5, 3)))
    cases["max_pool2d"] = (lambda r=seed: _projected(max_pool2d(xp), r), [xp])

    xl = _t(rng.normal(size=(4, 6)))
    cases["leaky_relu"] = (lambda r=seed: _projected(leaky_relu(xl), r), [xl])

    for mode in ("train", "eval"):
        for shape in ((5, 3), (3, 3, 2, 2)):
            xb = _t(rng.normal(size=shape) * 2 + 1)
            gamma, beta = _t(rng.uniform(0.5, 1.5, size=3)), _t(rng.normal(size=3))
            rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)

            def bn_case(xb=xb, gamma=gamma, beta=beta, rm=rm, rv=rv, mode=mode, r=seed):
                # running stats are copied so repeated evaluations see the same state
                out = batch_norm(xb, gamma, beta, rm.copy(), rv.copy(), training=mode == "train")
                return _projected(out, r)

            cases[f"batch_norm[{mode},{len(shape)}d]"] = (bn_case, [xb, gamma, beta])

    xf, wf, bf = _t(rng.normal(size=(4, 5))), _t(rng.normal(size=(5, 3))), _t(rng.normal(size=3))
    cases["fc"] = (lambda r=seed: _projected(fc_forward(wf, bf, xf), r), [xf, wf, bf])

    xr, wr = _t(rng.normal(size=(4, 5))), _t(rng.normal(size=5))
    cases["frw"] = (lambda r=seed: _projected(frw_forward(wr, xr), r), [xr, wr])

    N, D, M = 4, 5, 6
    head = SoftmaxHead(D, N, rng, np.float64, init_std=1.0)
    head.b.data[:] = rng.normal(size=N)
    table = CenterTable(N, D, dtype=np.float64)
    table.centers.data[:] = rng.normal(size=(N, D))
    emb = _t(rng.normal(size=(M, D)))
    y = rng.integers(0, N, M)
    w_frw = _t(rng.normal(size=D) * 3)
    cfg = LossConfig(lam=0.5, beta=0.01, C=20.0)
    cases["identification"] = (lambda: identification_loss(head, emb, y), [emb, head.W, head.b])
    cases["center"] = (lambda: center_loss(table, emb, y), [emb])
    cases["frw_constraint"] = (lambda: frw_constraint(w_frw, cfg), [w_frw])
    cases["total"] = (lambda: total_loss(head, table, w_frw, emb, y, cfg), [emb, w_frw, head.W, head.b])

    # moderate scales keep the two-way softmax away from saturation, where
    # per-coordinate relative error is dominated by rounding
    vhead = VerificationHead(D, rng, np.float64, init_std=0.5)
    x1, x2 = _t(rng.normal(size=(M, D)) * 0.5), _t(rng.normal(size=(M, D)) * 0.5)
    same = rng.integers(0, 2, M)
    cases["verification"] = (lambda: binary_verification_loss(x1, x2, same, vhead), [x1, x2, vhead.W, vhead.b])
    return cases


def suite_gradients(seeds: int = 20) -> SuiteResult:
    start = time.perf_counter()
    worst, where = 0.0, ""
    for seed in range(seeds):
        for name, (fn, params) in gradient_cases(seed).items():
            err = max(check_parameter_gradients(fn, params).values())
            if err > worst:
                worst, where = err, f"{name} seed {seed}"
    return SuiteResult("gradients", worst, GRAD_TOL, worst < GRAD_TOL, time.perf_counter() - start,
                       f"(worst: {where})" if where else "")


def suite_fold(trials: int = 100) -> SuiteResult:
    start = time.perf_counter()
    worst, argmax_ok = 0.0, True
    for k in range(trials):
        rng = np.random.default_rng([k, 202])
        D, N, B = int(rng.integers(1, 16)), int(rng.integers(2, 20)), int(rng.integers(1, 10))
        head = SoftmaxHead(D, N, rng, np.float64, init_std=1.0)
        head.b.data[:] = rng.normal(size=N)
        w = Tensor(rng.normal(size=D) * 2)
        x = Tensor(rng.normal(size=(B, D)))
        direct = head.logits(frw_forward(w, x)).data
        folded = fold_frw_into_softmax(head, w).logits(x).data
        worst = max(worst, float(np.max(np.abs(direct - folded))))
        argmax_ok &= bool(np.array_equal(direct.argmax(axis=1), folded.argmax(axis=1)))
    return SuiteResult("fold_identity", worst, FOLD_TOL, worst < FOLD_TOL and argmax_ok,
                       time.perf_counter() - start, "" if argmax_ok else "(argmax mismatch)")


def brute_force_centers(centers: np.ndarray, x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    """Literal per-class evaluation of the center update rule."""
    new = centers.copy()
    for j in range(len(centers)):
        numerator = np.zeros(centers.shape[1], dtype=centers.dtype)
        count = 0
        for i in range(len(y)):
            if y[i] == j:
                numerator = numerator + (centers[j] - x[i])
                count += 1
        new[j] = centers[j] - alpha * (numerator / (1 + count))
    return new


def suite_center_oracle(batches: int = 50) -> SuiteResult:
    start = time.perf_counter()
    mismatches, absent_changed, worst = 0, 0, 0.0
    for k in range(batches):
        rng = np.random.default_rng([k, 303])
        N, D, M = int(rng.integers(1, 11)), int(rng.integers(1, 8)), int(rng.integers(1, 33))
        table = CenterTable(N, D, alpha=float(rng.uniform(0.01, 1.0)), dtype=np.float64)
        table.centers.data[:] = rng.normal(size=(N, D))
        x, y = rng.normal(size=(M, D)), rng.integers(0, N, M)
        before = table.centers.data.copy()
        expected = brute_force_centers(before, x, y, table.alpha)
        update_centers(table, x, y)
        worst = max(worst, float(np.max(np.abs(table.centers.data - expected))))
        mismatches += int(not np.array_equal(table.centers.data, expected))
        absent = np.setdiff1d(np.arange(N), y)
        absent_changed += int(table.centers.data[absent].tobytes() != before[absent].tobytes())
    ok = mismatches == 0 and absent_changed == 0
    return SuiteResult("center_update_oracle", worst, 0.0, ok, time.perf_counter() - start,
                       f"({mismatches} mismatched batches, {absent_changed} with moved absent classes)")


def suite_no_backprop() -> SuiteResult:
    from .training import TrainPlan, _trainable, train
    from .data import ReidDataset

    start = time.perf_counter()
    problems = []
    cfg = ModelConfig(preset="desk", input_size=(8, 4), conv_channels=(2,), pool_after=(0,), embedding_dim=4,
                      num_classes=3)
    model = build(cfg, 0, np.float64)
    model.centers.centers.data[:] = 1.0
    rng = np.random.default_rng(404)
    x = Tensor(rng.normal(size=(6, 3, 8, 4)))
    y = np.array([0, 1, 2, 0, 1, 2])
    backward(total_loss(model.head, model.centers, model.frw.weight, model(x), y, LossConfig()))
    if model.centers.centers.grad is not None or model.centers.centers.requires_grad:
        problems.append("centers received a gradient")
    if any(p is model.centers.centers for p in _trainable(model).values()):
        problems.append("centers listed as a trainable parameter")
    from .training import Adam

    try:
        Adam({"centers": model.centers.centers}, forbidden=(model.centers.centers,))
        problems.append("optimizer accepted the centers")
    except ContractError:
        pass
    data = ReidDataset(rng.normal(size=(6, 3, 8, 4)), y, [0, 1, 0, 1, 0, 1])
    seen = []
    train(model, data, TrainPlan(iterations=2, batch_size=4, log_every=1),
          callback=lambda t, m: seen.append(m.centers.centers.grad))
    if any(g is not None for g in seen) or model.centers.centers.grad is not None:
        problems.append("centers carried a gradient during training")
    return SuiteResult("no_backprop_centers", float(len(problems)), 0.0, not problems, time.perf_counter() - start,
                       "; ".join(problems))


def enumeration_ranks(values: np.ndarray, probe_ids, gallery_ids) -> np.ndarray:
    """CMC by counting, for each probe, the gallery entries that precede
    its true match (strictly closer, or tied at a lower index)."""
    P, G = values.shape
    rates = np.zeros(G)
    for i in range(P):
        j = int(np.flatnonzero(np.asarray(gallery_ids) == probe_ids[i])[0])
        ahead = sum(1 for k in range(G) if values[i, k] < values[i, j] or (values[i, k] == values[i, j] and k < j))
        rates[ahead:] += 1
    return rates / P


def suite_cmc_oracle(trials: int = 1000) -> SuiteResult:
    start = time.perf_counter()
    mismatches = 0
    rng = np.random.default_rng(505)
    for _ in range(trials):
        G = int(rng.integers(1, 9))
        P = int(rng.integers(1, G + 1))
        gallery_ids = rng.permutation(G)
        probe_ids = rng.choice(gallery_ids, P, replace=False)
        values = rng.integers(0, 4, size=(P, G)).astype(float) if rng.random() < 0.5 else rng.random((P, G))
        got = cmc_single_shot(DistanceMatrix(values, probe_ids, gallery_ids)).rates
        mismatches += int(not np.array_equal(got, enumeration_ranks(values, probe_ids, gallery_ids)))
    hand = cmc_single_shot(DistanceMatrix(np.array([[0.1, 0.2, 0.3], [0.3, 0.4, 0.6], [0.9, 0.8, 0.7]]),
                                          [0, 1, 2], [0, 1, 2]))
    hand_err = max(abs(hand.rank(1) - 2 / 3), abs(hand.rank(2) - 1.0))
    ok = mismatches == 0 and hand_err < 1e-12
    return SuiteResult("cmc_oracle", hand_err, 1e-12, ok, time.perf_counter() - start,
                       f"({mismatches}/{trials} oracle mismatches, CMC(1)={hand.rank(1):.6f}, "
                       f"CMC(2)={hand.rank(2):.6f})")


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "gradients": suite_gradients,
    "fold_identity": suite_fold,
    "center_update_oracle": suite_center_oracle,
    "no_backprop_centers": suite_no_backprop,
    "cmc_oracle": suite_cmc_oracle,
}


def run_all(names=None) -> list[SuiteResult]:
    return [SUITES[n]() for n in (names or SUITES)]
