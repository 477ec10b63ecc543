"""Adam with a step learning-rate schedule, the training loop, two-step
fine-tuning, and a harness comparing loss modes under equal budgets."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .data import ReidDataset
from .errors import ContractError, NumericError
from .evaluation import Protocol, evaluate_splits
from .losses import LossConfig, VerificationHead, objective, pair_verification_loss, update_centers
from .model import EmbeddingModel, ModelConfig, backbone_checksum, build
from .tensor import Tensor, add, backward

LOSS_MODES = ("IC", "I", "IV")


@dataclass
class TrainPlan:
    iterations: int = 25000
    lr: float = 0.001
    lr_decay_step: int = 22000
    lr_decay_factor: float = 0.1
    batch_size: int = 100
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    alpha: float = 0.5
    mode: str = "IC"
    seed: int = 0
    log_every: int = 100
    early_stop_window: int = 0
    early_stop_tol: float = 1e-3

    def validate(self) -> None:
        problems = []
        if self.iterations < 0:
            problems.append("iterations must be non-negative")
        if self.batch_size < 2:
            problems.append("batch size must be at least 2 (batch normalization)")
        if self.mode not in LOSS_MODES:
            problems.append(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if self.mode == "IV" and self.batch_size % 2:
            problems.append("IV mode needs an even batch size (pairs)")
        if not 0 < self.alpha <= 1:
            problems.append("alpha must lie in (0, 1]")
        if self.lr <= 0 or self.log_every < 1:
            problems.append("lr and log_every must be positive")
        if problems:
            raise ContractError("; ".join(problems))

    def lr_at(self, t: int) -> float:
        return self.lr if t < self.lr_decay_step else self.lr * self.lr_decay_factor


class Adam:
    """Bias-corrected Adam with decoupled weight decay on a named subset."""

    def __init__(self, params: dict[str, Tensor], decayed: set[str] = frozenset(), beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0,
                 forbidden: tuple[Tensor, ...] = ()):
        for name, p in params.items():
            if any(p is f for f in forbidden):
                raise ContractError(f"tensor {name!r} is updated outside the optimizer and cannot be managed")
            if not p.requires_grad:
                raise ContractError(f"parameter {name!r} does not require gradients")
        self.params = dict(params)
        self.decayed = set(decayed) & set(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def manages(self, tensor: Tensor) -> bool:
        return any(tensor is p for p in self.params.values())

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if name in self.decayed and self.weight_decay:
                p.data *= p.dtype.type(1 - lr * self.weight_decay)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(state: Adam, lr: float) -> Adam:
    state.step(lr)
    return state


# ----------------------------------------------------------------------------
# batch samplers


class EpochSampler:
    """Uniform sampling without replacement, reshuffled every epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.queue = np.empty(0, dtype=np.intp)

    def next(self) -> np.ndarray:
        while self.queue.size < self.batch_size:
            self.queue = np.concatenate([self.queue, self.rng.permutation(self.n)])
        batch, self.queue = self.queue[:self.batch_size], self.queue[self.batch_size:]
        return batch


class PairSampler:
    """Batches of ``batch_size / 2`` image pairs, half same-identity and half
    different-identity.  Returns (batch indices, left, right, same)."""

    def __init__(self, ids: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.rng = rng
        self.num_pairs = batch_size // 2
        self.by_id = [np.flatnonzero(ids == pid) for pid in range(int(ids.max()) + 1)]
        self.multi = np.array([pid for pid, idx in enumerate(self.by_id) if idx.size >= 2])
        if self.multi.size == 0:
            raise ContractError("pair sampling needs identities with at least two images")

    def next(self):
        P = self.num_pairs
        n_pos = P // 2
        left, right = np.empty(P, dtype=np.intp), np.empty(P, dtype=np.intp)
        for k in range(n_pos):
            members = self.by_id[self.multi[self.rng.integers(self.multi.size)]]
            a, b = self.rng.choice(members.size, size=2, replace=False)
            left[k], right[k] = members[a], members[b]
        num_ids = len(self.by_id)
        for k in range(n_pos, P):
            i, j = self.rng.choice(num_ids, size=2, replace=False)
            left[k] = self.by_id[i][self.rng.integers(self.by_id[i].size)]
            right[k] = self.by_id[j][self.rng.integers(self.by_id[j].size)]
        same = np.zeros(P, dtype=np.intp)
        same[:n_pos] = 1
        batch = np.concatenate([left, right])
        return batch, np.arange(P), np.arange(P, 2 * P), same


# ----------------------------------------------------------------------------
# run log


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)
    iter_seconds: list[float] = field(default_factory=list)
    checkpoint: str | None = None

    COLUMNS = ("iteration", "L", "L_I", "L_C", "L_F", "lr", "seconds")

    def append(self, record: dict) -> None:
        if self.records and record["iteration"] <= self.records[-1]["iteration"] and \
                record.get("phase") == self.records[-1].get("phase"):
            raise ContractError("run log iterations must increase")
        self.records.append(record)

    def extend(self, other: "RunLog", phase: int | None = None) -> None:
        for r in other.records:
            self.records.append({**r, "phase": phase} if phase is not None else dict(r))
        self.iter_seconds.extend(other.iter_seconds)

    @property
    def sec_per_iter(self) -> float:
        return float(np.median(self.iter_seconds)) if self.iter_seconds else 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_csv(self) -> str:
        cols = list(self.COLUMNS)
        if any("phase" in r for r in self.records):
            cols = ["phase", *cols]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.records:
            w.writerow([r.get(c, "") if isinstance(r.get(c), (int, str)) or r.get(c) is None
                        else f"{r[c]:.8g}" for c in cols])
        return buf.getvalue()


# ----------------------------------------------------------------------------
# training


def _trainable(model: EmbeddingModel) -> dict[str, Tensor]:
    return {n: p for n, p in model.named_parameters().items() if p.requires_grad}


class Trainer:
    """One training run advanced an iteration at a time.

    Per iteration: forward, joint loss, backward, Adam step, then the center
    update on the detached batch embeddings.  ``callback(t, model)`` runs
    before iteration ``t`` and once after the last.  With ``backbone_eval``
    the batch-norm layers use running statistics (for training on top of a
    frozen backbone).
    """

    def __init__(self, model: EmbeddingModel, dataset: ReidDataset, plan: TrainPlan,
                 callback: Callable[[int, EmbeddingModel], None] | None = None,
                 backbone_eval: bool = False, verif_head: VerificationHead | None = None):
        plan.validate()
        if dataset.num_ids != model.head.num_classes:
            raise ContractError(f"dataset has {dataset.num_ids} identities, model head has {model.head.num_classes}")
        self.model, self.dataset, self.plan = model, dataset, plan
        self.callback, self.backbone_eval = callback, backbone_eval
        rng = np.random.default_rng([plan.seed, 7])
        model.centers.alpha = plan.alpha
        self.use_center = plan.mode == "IC"
        self.use_frw = plan.mode != "I"
        self.w_frw = model.frw.weight if model.frw is not None else None

        params = _trainable(model)
        if plan.mode == "IV":
            if verif_head is None:
                verif_head = VerificationHead(model.cfg.embedding_dim, np.random.default_rng([plan.seed, 11]),
                                              model.dtype)
            params.update({p.name: p for p in verif_head.parameters()})
            self.sampler = PairSampler(dataset.ids, plan.batch_size, rng)
        else:
            self.sampler = EpochSampler(len(dataset), plan.batch_size, rng)
        self.verif_head = verif_head
        decayed = model.decayed_names() | {"verif.W"}
        self.opt = Adam(params, decayed, plan.beta1, plan.beta2, plan.eps, plan.weight_decay,
                        forbidden=(model.centers.centers,))

        self.log = RunLog()
        self.t = 0
        self.stopped = False
        self.history: list[float] = []
        self.images = dataset.images.astype(model.dtype, copy=False)
        self.start = time.perf_counter()
        model.train(not backbone_eval)

    @property
    def done(self) -> bool:
        return self.stopped or self.t >= self.plan.iterations

    def step(self) -> None:
        model, plan, t = self.model, self.plan, self.t
        if self.callback is not None:
            self.callback(t, model)
        model.train(not self.backbone_eval)
        tick = time.perf_counter()
        lr = plan.lr_at(t)
        if plan.mode == "IV":
            idx, left, right, same = self.sampler.next()
        else:
            idx = self.sampler.next()
        y = self.dataset.ids[idx]
        emb = model(Tensor(self.images[idx], dtype=model.dtype))
        loss, parts = objective(model.head, model.centers, self.w_frw, emb, y, plan.loss,
                                use_center=self.use_center, use_frw=self.use_frw)
        if plan.mode == "IV":
            lv = pair_verification_loss(emb, left, right, same, self.verif_head)
            loss = add(loss, lv)
            parts["L"] = loss.item()
            parts["L_V"] = lv.item()
        if not all(np.isfinite(v) for v in parts.values()):
            raise NumericError(f"non-finite loss at iteration {t}: {parts}")
        backward(loss)
        self.opt.step(lr)
        update_centers(model.centers, emb.data, y)
        self.log.iter_seconds.append(time.perf_counter() - tick)
        self.history.append(parts["L"])
        record = {"iteration": t, **parts, "lr": lr, "seconds": time.perf_counter() - self.start}
        if t % plan.log_every == 0 or t == plan.iterations - 1:
            self.log.append(record)
        self.t += 1
        w, h = plan.early_stop_window, self.history
        if w and len(h) >= 2 * w and np.mean(h[-2 * w:-w]) - np.mean(h[-w:]) < plan.early_stop_tol:
            if self.log.records[-1]["iteration"] != t:
                self.log.append(record)
            self.stopped = True

    def finish(self) -> tuple[EmbeddingModel, RunLog]:
        if self.callback is not None:
            self.callback(self.plan.iterations, self.model)
        self.model.train(True)
        return self.model, self.log


def train(model: EmbeddingModel, dataset: ReidDataset, plan: TrainPlan,
          callback: Callable[[int, EmbeddingModel], None] | None = None,
          backbone_eval: bool = False, verif_head: VerificationHead | None = None) -> tuple[EmbeddingModel, RunLog]:
    """Run ``plan.iterations`` training iterations (see ``Trainer``)."""
    trainer = Trainer(model, dataset, plan, callback, backbone_eval, verif_head)
    while not trainer.done:
        trainer.step()
    return trainer.finish()


def _set_requires_grad(params: dict[str, Tensor], flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag


def two_step_finetune(model: EmbeddingModel, small_dataset: ReidDataset, plan1: TrainPlan, plan2: TrainPlan,
                      head_seed: int | None = None) -> tuple[EmbeddingModel, RunLog, dict[str, str]]:
    """Replace the head for the new class count, train it alone on a frozen
    backbone, then train everything.  Returns the model, a log whose records
    carry a ``phase`` tag, and the backbone checksums around phase 1."""
    from .model import replace_head

    replace_head(model, small_dataset.num_ids, plan1.seed if head_seed is None else head_seed)
    backbone = model.backbone_parameters()
    before = backbone_checksum(model)
    log = RunLog()
    _set_requires_grad(backbone, False)
    try:
        if plan1.iterations > 0:
            _, log1 = train(model, small_dataset, plan1, backbone_eval=True)
            log.extend(log1, phase=1)
    finally:
        _set_requires_grad(backbone, True)
    after = backbone_checksum(model)
    if before != after:
        raise ContractError("frozen backbone changed during phase 1")
    _, log2 = train(model, small_dataset, plan2)
    log.extend(log2, phase=2)
    return model, log, {"before_phase1": before, "after_phase1": after}


# ----------------------------------------------------------------------------
# loss-mode comparison


@dataclass
class ComparisonRow:
    mode: str
    rank1: float
    rank5: float
    rank10: float
    stddev: np.ndarray  # per rank 1/5/10, across seeds
    sec_per_iter: float
    per_seed_rank1: list[float]


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow]

    def row(self, mode: str) -> ComparisonRow:
        return next(r for r in self.rows if r.mode == mode)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "rank1", "rank5", "rank10", "mean", "stddev", "sec_per_iter"])
        for r in self.rows:
            w.writerow([r.mode, f"{r.rank1:.4f}", f"{r.rank5:.4f}", f"{r.rank10:.4f}",
                        f"{r.rank1:.4f}", f"{r.stddev[0]:.4f}", f"{r.sec_per_iter:.6f}"])
        return buf.getvalue()


def compare_losses(train_data: ReidDataset, test_data: ReidDataset, cfg: ModelConfig, plan: TrainPlan,
                   modes=("IC", "IV"), seeds=(0, 1, 2), protocol: Protocol | None = None) -> ComparisonReport:
    """Train every mode from the same initial weights per seed under the
    same iteration budget; report seed-mean CMC at ranks 1/5/10 and the
    median wall clock per iteration."""
    if len(modes) < 2:
        raise ContractError("compare at least two loss modes")
    if len(seeds) < 3:
        raise ContractError("compare over at least three seeds")
    protocol = protocol or Protocol(num_splits=10, max_rank=10)
    cfg = replace(cfg, num_classes=train_data.num_ids)
    scores = {m: [] for m in modes}
    timing = {m: [] for m in modes}
    for seed in seeds:
        # arms advance in lockstep so machine-load drift hits every mode alike
        trainers = {mode: Trainer(build(cfg, seed), train_data, replace(plan, mode=mode, seed=seed))
                    for mode in modes}
        while not all(tr.done for tr in trainers.values()):
            for tr in trainers.values():
                if not tr.done:
                    tr.step()
        for mode, tr in trainers.items():
            model, log = tr.finish()
            curve = evaluate_splits(model, test_data, protocol)
            scores[mode].append([curve.rank(k) if k <= len(curve.rates) else 1.0 for k in (1, 5, 10)])
            timing[mode].extend(log.iter_seconds)
    rows = []
    for mode in modes:
        s = np.array(scores[mode])
        rows.append(ComparisonRow(mode, *s.mean(axis=0), s.std(axis=0),
                                  float(np.median(timing[mode])) if timing[mode] else 0.0, list(s[:, 0])))
    return ComparisonReport(rows)
