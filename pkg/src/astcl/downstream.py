"""Applications of a pretrained encoder: classification, clone detection, clustering."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .hcl import Adam, Checkpoint, HclParams, encode_prepared, prepare
from .config import TrainConfig
from .rsgnn import glorot
from .tree import AstGraph

log = logging.getLogger(__name__)


def pool(x_nd) -> Tensor:
    """Code vector: mean of the node rows."""
    x = ad._lift(x_nd)
    if x.rows == 0:
        raise ValueError("cannot pool an empty node matrix")
    return ad.mean_rows(x)


def code_vectors(graphs: list[AstGraph], params: HclParams, cfg: TrainConfig) -> np.ndarray:
    """One pooled row per graph."""
    return np.vstack([pool(encode_prepared(prepare(g, cfg), params, cfg)).value
                      for g in graphs])


# --- classification ---------------------------------------------------------


@dataclass
class ClassifierHead:
    w0: Param
    b0: Param
    smoothing: float = 0.1

    @classmethod
    def init(cls, dim: int, classes: int, rng: np.random.Generator,
             smoothing: float = 0.1) -> "ClassifierHead":
        if classes < 2:
            raise ValueError("a classifier needs at least two classes")
        if not 0.0 <= smoothing < 1.0:
            raise ValueError("smoothing must lie in [0, 1)")
        return cls(Param(glorot(rng, dim, classes), name="w0"),
                   Param(np.zeros((1, classes)), name="b0"), smoothing)

    @property
    def classes(self) -> int:
        return self.w0.cols

    def logits(self, r) -> Tensor:
        return ad.add_row(ad.matmul(r, self.w0), self.b0)

    def params(self) -> list[Param]:
        return [self.w0, self.b0]


def smoothed_targets(labels, classes: int, smoothing: float) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any(labels < 0) or np.any(labels >= classes):
        raise ValueError(f"label outside [0, {classes})")
    t = np.full((len(labels), classes), smoothing / (classes - 1))
    t[np.arange(len(labels)), labels] = 1.0 - smoothing
    return t


def classify_loss(r, label: int, head: ClassifierHead) -> Tensor:
    """Label-smoothed cross-entropy of the head's softmax."""
    return ad.softmax_cross_entropy(head.logits(r),
                                    smoothed_targets([label], head.classes, head.smoothing))


def classify_predict(r, head: ClassifierHead) -> int:
    """Index of the largest logit; ties go to the lowest index."""
    return int(np.argmax(head.logits(r).value[0]))


@dataclass
class FineTuned:
    params: HclParams
    head: ClassifierHead
    config: TrainConfig
    history: list[dict] = field(default_factory=list)

    def predict(self, graphs: list[AstGraph]) -> list[int]:
        return [classify_predict(pool(encode_prepared(prepare(g, self.config), self.params,
                                                      self.config)), self.head)
                for g in graphs]


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and label lengths differ")
    return float(np.mean(pred == truth)) if len(pred) else 0.0


def fine_tune(ckpt: Checkpoint, graphs: list[AstGraph], labels: list[int], epochs: int,
              lr: float = 1e-3, classes: int | None = None, batch_size: int = 16,
              patience: int = 5, val_fraction: float = 0.2, smoothing: float = 0.1,
              seed: int = 0) -> FineTuned:
    """Train encoder and a linear head jointly on labeled trees.

    A ``val_fraction`` slice of the data is held out for early stopping; the
    returned model is the one with the best validation accuracy. The
    checkpoint's parameters are not modified.
    """
    if not graphs:
        raise ValueError("fine-tuning corpus is empty")
    if len(graphs) != len(labels):
        raise ValueError("graphs and labels differ in length")
    cfg = ckpt.config
    classes = classes or int(max(labels)) + 1
    rng = np.random.default_rng(seed)
    params = copy.deepcopy(ckpt.params)
    head = ClassifierHead.init(cfg.dim, classes, rng, smoothing)
    smoothed_targets(labels, classes, smoothing)  # validates the label range

    preps = [prepare(g, cfg) for g in graphs]
    order = rng.permutation(len(preps))
    n_val = int(round(val_fraction * len(preps))) if len(preps) > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    labels = np.asarray(labels)

    tuned = FineTuned(params, head, cfg)
    if epochs <= 0:
        return tuned
    opt = Adam(params.encoder_params() + head.params(), lr=lr)
    best_acc, best_state, stale = -1.0, None, 0
    for epoch in range(epochs):
        perm = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, len(perm), batch_size):
            chunk = perm[start:start + batch_size]
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = None
                for i in chunk:
                    r = pool(encode_prepared(preps[i], params, cfg))
                    li = classify_loss(r, int(labels[i]), head)
                    loss = li if loss is None else ad.add(loss, li)
                loss = ad.scale(loss, 1.0 / len(chunk))
            ad.backward(tape, loss)
            opt.step()
            total += loss.item() * len(chunk)
        train_loss = total / max(len(perm), 1)
        val_acc = None
        if len(val_idx):
            val_acc = accuracy([classify_predict(pool(encode_prepared(preps[i], params, cfg)), head)
                                for i in val_idx], labels[val_idx])
        tuned.history.append({"epoch": epoch, "train_loss": train_loss, "val_acc": val_acc})
        log.debug("epoch %d loss %.4f val_acc %s", epoch, train_loss, val_acc)
        if val_acc is None:
            # nothing held out: no early stopping, keep the latest weights
            best_state = (params, head)
        elif val_acc > best_acc:
            best_acc, stale = val_acc, 0
            best_state = copy.deepcopy((params, head))
        else:
            stale += 1
            if stale >= patience:
                break
    tuned.params, tuned.head = best_state
    return tuned


# --- clone detection --------------------------------------------------------


def relatedness(r1, r2) -> float:
    """Cosine similarity of two code vectors."""
    a = np.asarray(getattr(r1, "value", r1), dtype=np.float64).reshape(-1)
    b = np.asarray(getattr(r2, "value", r2), dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("relatedness is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def clone_loss(r1, r2, y: int) -> float:
    if y not in (1, -1):
        raise ValueError("clone label must be 1 or -1")
    return (y - relatedness(r1, r2)) ** 2


@dataclass(frozen=True)
class CloneVerdict:
    p: float
    is_clone: bool


@dataclass(frozen=True)
class CloneCalibration:
    """Affine map ``a * p + b`` on relatedness, clipped back to [-1, 1]."""

    scale: float = 1.0
    offset: float = 0.0

    def __call__(self, p: float) -> float:
        return float(np.clip(self.scale * p + self.offset, -1.0, 1.0))

    @classmethod
    def fit(cls, p, y) -> "CloneCalibration":
        """Least squares of ``y`` on ``p``, i.e. the MSE-optimal linear layer."""
        p, y = np.asarray(p, dtype=np.float64), np.asarray(y, dtype=np.float64)
        if len(p) < 2 or np.ptp(p) == 0:
            raise ValueError("need at least two distinct relatedness values to calibrate")
        design = np.column_stack([p, np.ones_like(p)])
        (a, b), *_ = np.linalg.lstsq(design, y, rcond=None)
        return cls(float(a), float(b))


def clone_predict(r1, r2, calibration: CloneCalibration | None = None) -> CloneVerdict:
    p = relatedness(r1, r2)
    if calibration is not None:
        p = calibration(p)
    return CloneVerdict(p, p > 0)


def prf1(pred, truth) -> tuple[float, float, float]:
    """Precision, recall, F1 for boolean predictions; empty denominators give 0."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError("prediction and label lengths differ")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


# --- clustering -------------------------------------------------------------


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: list[float]
    iterations: int


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total == 0:
            # every point coincides with a chosen center
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centers)


def kmeans(vectors, k: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when assignments no longer change. Ties go to the lowest centroid
    index; an emptied cluster keeps its previous centroid.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must form a 2-D array")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if k < 1 or k > len(x):
        raise ValueError(f"K={k} must lie in [1, {len(x)}]")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    assign = None
    inertia: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = ((x[:, None, :] - centroids[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        inertia.append(float(d2[np.arange(len(x)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = x[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return KMeansResult(assign, centroids, inertia, it)


def _pairs(counts) -> int:
    return sum(int(c) * (int(c) - 1) // 2 for c in np.asarray(counts).reshape(-1))


def ari(pred, truth) -> float:
    """Adjusted Rand index from the contingency table.

    Pair counts are integers, so the ratio is formed exactly and rounded once.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("partitions differ in length")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    index = _pairs(table)
    rows = _pairs(table.sum(axis=1))
    cols = _pairs(table.sum(axis=0))
    total = _pairs([len(pred)])
    # (index - rows*cols/total) / ((rows+cols)/2 - rows*cols/total), cleared of fractions
    num = 2 * (total * index - rows * cols)
    den = total * (rows + cols) - 2 * rows * cols
    if den == 0:
        return 1.0
    return num / den


# --- projection -------------------------------------------------------------


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Project rows onto the top two principal axes (sign fixed by largest loading)."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    for i in range(len(axes)):
        if axes[i, np.argmax(np.abs(axes[i]))] < 0:
            axes[i] = -axes[i]
    out = centered @ axes.T
    if out.shape[1] < 2:
        out = np.hstack([out, np.zeros((len(x), 2 - out.shape[1]))])
    return out
