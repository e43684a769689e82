"""Losses, SGD, and the two-stage (contrastive pretrain -> finetune) loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .ingest import ConfigError, Dataset
from .model import CvFormer, ModelConfig, fan_in_normal

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
PROB_EPS = 1e-12
# stands in for -inf when masking logits; exp() of it underflows to zero
MASK = -1e9


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.5
    head_hidden: int = 64
    head_out: int = 32

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.003
    momentum: float = 0.9
    batch_size: int = 16
    epochs_pretrain: int = 30
    epochs_finetune: int = 50
    lam: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (in-batch negatives)")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")


# ---------------------------------------------------------------------------
# projection head and losses

def init_head(d_model: int, config: ContrastiveConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Projection MLP h: d_model -> head_hidden -> head_out with GELU between."""
    dtype = ad.get_default_dtype()
    return {
        "proj.w1": fan_in_normal(rng, d_model, config.head_hidden, dtype),
        "proj.b1": Tensor(np.zeros(config.head_hidden), requires_grad=True, dtype=dtype),
        "proj.w2": fan_in_normal(rng, config.head_hidden, config.head_out, dtype),
        "proj.b2": Tensor(np.zeros(config.head_out), requires_grad=True, dtype=dtype),
    }


def project(x: Tensor, head: dict[str, Tensor]) -> Tensor:
    hidden = ad.gelu(ad.add(ad.matmul(x, head["proj.w1"]), head["proj.b1"]))
    return ad.add(ad.matmul(hidden, head["proj.w2"]), head["proj.b2"])


def _normalize_rows(z: Tensor) -> Tensor:
    sq = ad.clamp_min(ad.sum_axis(ad.mul(z, z), axis=-1, keepdims=True), NORM_EPS * NORM_EPS)
    return ad.div(z, ad.add(ad.sqrt(sq), NORM_EPS))


def similarity(u: Tensor, v: Tensor, head: dict[str, Tensor]) -> Tensor:
    """Cosine similarity of the projected vectors, a scalar in [-1, 1]."""
    zu = _normalize_rows(project(ad.reshape(u, (1, -1)), head))
    zv = _normalize_rows(project(ad.reshape(v, (1, -1)), head))
    return ad.sum_all(ad.mul(zu, zv))


def similarity_matrix(u: Tensor, v: Tensor, head: dict[str, Tensor]) -> Tensor:
    """S[i, k] = cos(h(u_i), h(v_k))."""
    zu = _normalize_rows(project(u, head))
    zv = _normalize_rows(project(v, head))
    return ad.matmul(zu, ad.transpose(zv))


def infonce_loss(u: Tensor, v: Tensor, head: dict[str, Tensor], tau: float) -> Tensor:
    """Symmetric in-batch InfoNCE over aligned pairs (u_i, v_i).

    For each i the positive logit is S_ii / tau and the negatives are row i
    and column i of S / tau with the diagonal removed; the loss is the batch
    mean of ``logsumexp(all) - positive``.
    """
    b = u.shape[0]
    if b < 2 or v.shape[0] != b:
        raise ContractError(f"infonce_loss needs two aligned batches of size >= 2, got {u.shape[0]} and {v.shape[0]}")
    s = ad.scale(similarity_matrix(u, v, head), 1.0 / tau)
    eye = np.eye(b, dtype=s.dtype)
    positive = ad.sum_axis(ad.mul(s, eye), axis=-1)
    column_negatives = ad.add(ad.transpose(s), eye * MASK)
    everything = ad.concat([s, column_negatives], axis=1)
    return ad.mean(ad.sub(ad.logsumexp_rows(everything), positive), axis=0)


def cross_entropy(fused_probs: Tensor, labels) -> Tensor:
    """Mean of -log p[label] over the batch, probabilities clamped at 1e-12."""
    probs = fused_probs if fused_probs.ndim == 2 else ad.reshape(fused_probs, (1, -1))
    labels = np.atleast_1d(np.asarray(labels))
    c = probs.shape[-1]
    if labels.shape[0] != probs.shape[0]:
        raise ContractError(f"{labels.shape[0]} labels for {probs.shape[0]} predictions")
    if (labels < 0).any() or (labels >= c).any():
        raise ContractError(f"label out of range [0, {c}): {labels.tolist()}")
    onehot = np.eye(c, dtype=probs.dtype)[labels]
    logp = ad.log(ad.clamp_min(probs, PROB_EPS))
    return ad.scale(ad.sum_all(ad.mul(logp, onehot)), -1.0 / labels.shape[0])


def combined_loss(fused_probs: Tensor, labels, u: Tensor | None, v: Tensor | None,
                  head: dict[str, Tensor], tau: float, lam: float) -> Tensor:
    """CE + lam * InfoNCE; with lam == 0 (or a single view) it is exactly CE."""
    ce = cross_entropy(fused_probs, labels)
    if lam == 0 or u is None or v is None:
        return ce
    return ad.add(ce, ad.scale(infonce_loss(u, v, head, tau), lam))


# ---------------------------------------------------------------------------
# optimiser

class SGD:
    """Classic momentum: v <- momentum * v + g;  w <- w - lr * v.

    Parameters whose ``grad`` is None are left untouched.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if p.grad.shape != p.shape:
                raise ad.ShapeError(f"{name}: grad shape {p.grad.shape} != {p.shape}")
            v = self.velocity.get(name)
            v = p.grad.copy() if v is None else self.momentum * v + p.grad
            self.velocity[name] = v
            p.data -= p.dtype.type(self.lr) * v

    def zero_grad(self) -> None:
        ad.zero_grad(self.params.values())


def sgd_step(params: dict[str, Tensor], lr: float, momentum: float,
             velocity: dict[str, np.ndarray]) -> None:
    """Functional form of :meth:`SGD.step`; ``velocity`` is updated in place."""
    opt = SGD(params, lr, momentum)
    opt.velocity = velocity
    opt.step()


# ---------------------------------------------------------------------------
# metrics

def accuracy_and_recall(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> tuple[float, float]:
    """Accuracy and macro-averaged recall (classes absent from ``labels`` are skipped)."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    acc = float((pred == labels).mean()) if labels.size else 0.0
    recalls = [float((pred[labels == c] == c).mean()) for c in range(num_classes) if (labels == c).any()]
    return acc, float(np.mean(recalls)) if recalls else 0.0


def predict(model: CvFormer, dataset: Dataset, indices: np.ndarray, batch_size: int = 64) -> np.ndarray:
    preds = []
    with ad.no_grad():
        for start in range(0, len(indices), batch_size):
            idx = indices[start:start + batch_size]
            out = model(dataset.roi[idx], dataset.adjacency[idx])
            preds.append(np.argmax(out.fused_probs.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: CvFormer, dataset: Dataset, split: str) -> tuple[float, float]:
    idx = dataset.splits[split]
    return accuracy_and_recall(predict(model, dataset, idx), dataset.labels[idx], dataset.num_classes)


# ---------------------------------------------------------------------------
# loops

def _batches(rng: np.random.Generator, indices: np.ndarray, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(indices)
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # a trailing singleton has no in-batch negative; fold it into its neighbour
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


@dataclass
class PretrainResult:
    losses: list[float]


@dataclass
class FinetuneResult:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_state: dict[str, np.ndarray] = field(default_factory=dict)
    val_accuracy: float = 0.0
    val_recall: float = 0.0
    test_accuracy: float | None = None
    test_recall: float | None = None

    def first_epoch_reaching(self, threshold: float) -> int | None:
        for row in self.rows:
            if row["val_accuracy"] >= threshold:
                return row["epoch"]
        return None


def all_params(model: CvFormer, head: dict[str, Tensor]) -> dict[str, Tensor]:
    return {**model.params, **head}


def pretrain(model: CvFormer, head: dict[str, Tensor], dataset: Dataset,
             train: TrainConfig, contrastive: ContrastiveConfig) -> PretrainResult:
    """Contrastive pretraining on (CLS_R, CLS_C) pairs; labels are never read."""
    cfg = model.config
    if not (cfg.use_roi and cfg.use_conn):
        raise ConfigError("pretraining needs both views")
    idx = dataset.splits["train"]
    if len(idx) < 2:
        raise ConfigError("pretraining needs at least 2 training subjects")
    rng = np.random.default_rng([train.seed, 1])
    params = all_params(model, head)
    opt = SGD(params, train.lr, train.momentum)
    losses = []
    for epoch in range(1, train.epochs_pretrain + 1):
        total, count = 0.0, 0
        for batch in _batches(rng, idx, train.batch_size):
            opt.zero_grad()
            out = model(dataset.roi[batch], dataset.adjacency[batch])
            loss = infonce_loss(out.embedding.cls_r, out.embedding.cls_c, head, contrastive.tau)
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        losses.append(total / count)
        log.info("pretrain epoch %d loss %.6f", epoch, losses[-1])
    return PretrainResult(losses)


def finetune(model: CvFormer, head: dict[str, Tensor], dataset: Dataset,
             train: TrainConfig, contrastive: ContrastiveConfig,
             stop_at_perfect_val: bool = False) -> FinetuneResult:
    """Supervised training on CE + lam * InfoNCE; keeps the best-validation weights.

    Ties in validation accuracy keep the earlier epoch.  The model is left
    holding the best weights and test metrics are computed with them.  Once
    validation accuracy hits 1.0 no later epoch can replace the best state, so
    ``stop_at_perfect_val`` ends training there without changing the outcome.
    """
    if len(dataset.splits["val"]) == 0:
        raise ConfigError("finetuning needs a non-empty validation split")
    idx = dataset.splits["train"]
    rng = np.random.default_rng([train.seed, 2])
    params = all_params(model, head)
    opt = SGD(params, train.lr, train.momentum)
    result = FinetuneResult(best_state=model.state() | {k: t.data.copy() for k, t in head.items()})
    best_acc = -1.0
    for epoch in range(1, train.epochs_finetune + 1):
        total, count = 0.0, 0
        for batch in _batches(rng, idx, train.batch_size):
            opt.zero_grad()
            out = model(dataset.roi[batch], dataset.adjacency[batch])
            loss = combined_loss(out.fused_probs, dataset.labels[batch], out.embedding.cls_r,
                                 out.embedding.cls_c, head, contrastive.tau, train.lam)
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        val_acc, val_rec = evaluate(model, dataset, "val")
        row = {"epoch": epoch, "train_loss": total / count, "val_accuracy": val_acc, "val_recall": val_rec}
        result.rows.append(row)
        log.info("finetune epoch %d loss %.6f val acc %.4f", epoch, row["train_loss"], val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            result.best_epoch = epoch
            result.val_accuracy, result.val_recall = val_acc, val_rec
            result.best_state = model.state() | {k: t.data.copy() for k, t in head.items()}
        if stop_at_perfect_val and val_acc >= 1.0:
            break

    model.load_state(result.best_state)
    for k, t in head.items():
        t.data = result.best_state[k].copy()
    if len(dataset.splits["test"]):
        result.test_accuracy, result.test_recall = evaluate(model, dataset, "test")
    return result


# ---------------------------------------------------------------------------
# logs

def write_pretrain_log(path: str | Path, result: PretrainResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss"])
        for epoch, loss in enumerate(result.losses, start=1):
            writer.writerow([epoch, repr(loss)])


def write_finetune_log(path: str | Path, result: FinetuneResult) -> None:
    """One row per epoch, then a ``best`` row with the selected epoch's
    validation metrics and the test metrics of the restored weights."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_accuracy", "val_recall", "test_accuracy", "test_recall"])
        for row in result.rows:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_accuracy"]),
                             repr(row["val_recall"]), "", ""])
        best = result.rows[result.best_epoch - 1]
        test = ["", ""] if result.test_accuracy is None else [repr(result.test_accuracy), repr(result.test_recall)]
        writer.writerow([f"best:{result.best_epoch}", repr(best["train_loss"]), repr(best["val_accuracy"]),
                         repr(best["val_recall"]), *test])


def read_finetune_log(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))

