"""Hierarchical contrastive pretraining of the encoder.

Two self-supervised objectives over node levels:

* level prediction: a linear classifier on encoded nodes, cross-entropy
  against each node's depth, summed over nodes;
* relationship ordering: a triplet hinge whose margin grows with the level gap
  between anchor and negative.

They are combined with learnable log-uncertainty weights
``exp(-2 theta) L_h + exp(-2 tau) L_t + theta + tau``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .config import TrainConfig
from .embedding import EmbedderConfig, build_inputs
from .rsgnn import EncoderOptions, RsgnnLayerParams, encode, glorot
from .tree import AstGraph, TripletBatch, build_adjacency, sample_triplets

log = logging.getLogger(__name__)

MAGIC = b"HELC"
FORMAT_VERSION = 1


class NoTrainingSignal(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# --- parameters -------------------------------------------------------------


@dataclass
class HclParams:
    encoder: list[RsgnnLayerParams]
    w_ast: Param
    b_ast: Param
    theta_p: Param
    tau_p: Param

    @classmethod
    def init(cls, cfg: TrainConfig, rng: np.random.Generator) -> "HclParams":
        enc = [RsgnnLayerParams.init(cfg.dim, rng) for _ in range(cfg.layers)]
        c = cfg.num_levels
        return cls(encoder=enc,
                   w_ast=Param(glorot(rng, cfg.dim, c), name="w_ast"),
                   b_ast=Param(np.zeros((1, c)), name="b_ast"),
                   theta_p=Param(np.zeros((1, 1)), name="theta_p"),
                   tau_p=Param(np.zeros((1, 1)), name="tau_p"))

    def named(self) -> dict[str, Param]:
        out: dict[str, Param] = {}
        for i, layer in enumerate(self.encoder):
            for name, p in layer.named().items():
                out[f"encoder.{i}.{name}"] = p
        out.update(w_ast=self.w_ast, b_ast=self.b_ast, theta_p=self.theta_p, tau_p=self.tau_p)
        return out

    def encoder_params(self) -> list[Param]:
        return [p for layer in self.encoder for p in layer.named().values()]

    def zero_grad(self) -> None:
        for p in self.named().values():
            p.zero_grad()


def encoder_options(cfg: TrainConfig) -> EncoderOptions:
    return EncoderOptions(activation=cfg.activation,
                          self_attention=not cfg.no_self_attention,
                          residual=not cfg.no_residual)


def embedder_config(cfg: TrainConfig) -> EmbedderConfig:
    return EmbedderConfig(dim=cfg.dim, ngram_sizes=cfg.ngram_sizes, hash_seed=cfg.hash_seed)


# --- losses -----------------------------------------------------------------


def nep_logits(x_nd, params: HclParams) -> Tensor:
    return ad.add_row(ad.matmul(x_nd, params.w_ast), params.b_ast)


def nep_loss(logits, levels) -> Tensor:
    """Summed cross-entropy of per-node level logits against true levels."""
    logits = ad._lift(logits)
    levels = np.asarray(levels, dtype=np.int64)
    c = logits.cols
    if levels.shape != (logits.rows,):
        raise ValueError(f"{len(levels)} levels for {logits.rows} nodes")
    if np.any(levels < 0) or np.any(levels >= c):
        raise ValueError(f"level outside [0, {c}); the tree exceeds the depth cap")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(levels)), levels] = 1.0
    return ad.softmax_cross_entropy(logits, onehot)


def nro_loss(x_nd, batch: TripletBatch, margin: float) -> Tensor:
    """``sum [ |a - p|^2 - |a - n|^2 + dl + margin ]_+`` over the triples."""
    if len(batch) == 0:
        return Tensor(0.0)
    anc, pos, neg, dl = batch.arrays()
    x = ad._lift(x_nd)
    a = ad.take_rows(x, anc)
    d_pos = ad.sub(a, ad.take_rows(x, pos))
    d_neg = ad.sub(a, ad.take_rows(x, neg))
    gap = ad.sub(ad.sum_cols(ad.mul(d_pos, d_pos)), ad.sum_cols(ad.mul(d_neg, d_neg)))
    hinge = ad.relu(ad.add(gap, (dl + margin).reshape(-1, 1)))
    return ad.sum_all(hinge)


def joint_loss(l_h, l_t, theta_p, tau_p) -> Tensor:
    """Uncertainty-weighted sum; either loss may be ``None`` to drop that term."""
    terms = []
    for loss, s in ((l_h, theta_p), (l_t, tau_p)):
        if loss is None:
            continue
        w = ad.exp(ad.scale(s, -2.0))
        terms.append(ad.add(ad.mul(w, loss), s))
    if not terms:
        raise NoTrainingSignal("both objectives are disabled")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


# --- optimizer --------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over ``Param.grad``."""

    def __init__(self, params: list[Param], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, [p.grad for p in self.params], self.m, self.v, self.lr,
                  self.t, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adam_step(params, grads, m, v, lr: float, t: int, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        p.value -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


# --- per-graph preparation --------------------------------------------------


@dataclass
class PreparedGraph:
    graph: AstGraph
    x0: np.ndarray
    prop: np.ndarray
    levels: np.ndarray


def prepare(graph: AstGraph, cfg: TrainConfig) -> PreparedGraph:
    if graph.depth > cfg.max_depth:
        raise ValueError(f"tree depth {graph.depth} exceeds max_depth {cfg.max_depth}")
    pack = build_inputs(graph, embedder_config(cfg))
    return PreparedGraph(graph, pack.x0_ast, build_adjacency(graph).propagator,
                         np.asarray(graph.levels))


def encode_prepared(prep: PreparedGraph, params: HclParams, cfg: TrainConfig) -> Tensor:
    return encode(prep.x0, prep.prop, params.encoder, encoder_options(cfg))


def encode_graph(graph: AstGraph, params: HclParams, cfg: TrainConfig) -> np.ndarray:
    """Final node representations, one row per node."""
    return encode_prepared(prepare(graph, cfg), params, cfg).numpy()


def batch_losses(preps: list[PreparedGraph], params: HclParams, cfg: TrainConfig,
                 triplets: list[TripletBatch]) -> tuple[Tensor, Tensor | None, Tensor | None]:
    """Joint loss over a batch; level and triplet terms are summed across graphs."""
    l_h = l_t = None
    for prep, trip in zip(preps, triplets):
        x = encode_prepared(prep, params, cfg)
        if not cfg.no_nep:
            h = nep_loss(nep_logits(x, params), prep.levels)
            l_h = h if l_h is None else ad.add(l_h, h)
        if not cfg.no_nro:
            t = nro_loss(x, trip, cfg.margin)
            l_t = t if l_t is None else ad.add(l_t, t)
    return joint_loss(l_h, l_t, params.theta_p, params.tau_p), l_h, l_t


# --- checkpoint -------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    params: HclParams
    rng_state: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def embedder(self) -> EmbedderConfig:
        return embedder_config(self.config)


def _expected_shapes(cfg: TrainConfig) -> dict[str, tuple[int, int]]:
    h, c = cfg.dim, cfg.num_levels
    shapes: dict[str, tuple[int, int]] = {}
    for i in range(cfg.layers):
        for name in ("w_q", "w_k", "w_v", "w_l", "gcn1", "gcn2"):
            shapes[f"encoder.{i}.{name}"] = (h, h)
        for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            shapes[f"encoder.{i}.{name}"] = (1, h)
    shapes.update(w_ast=(h, c), b_ast=(1, c), theta_p=(1, 1), tau_p=(1, 1))
    return shapes


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """``HELC`` | u32 version | u32 header length | JSON header | little-endian f8 data."""
    arrays, blobs, offset = [], [], 0
    for name, p in ckpt.params.named().items():
        data = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        arrays.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    emb = ckpt.embedder
    header = json.dumps({
        "config": ckpt.config.to_dict(),
        "embedder": {"dim": emb.dim, "ngram_sizes": list(emb.ngram_sizes),
                     "hash_seed": emb.hash_seed},
        "rng_state": ckpt.rng_state,
        "arrays": arrays,
    }, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", ckpt.version, len(header)) + header + b"".join(blobs)


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    if len(raw) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    cfg = TrainConfig.from_dict(header["config"])
    body = raw[12 + hlen:]
    expected = _expected_shapes(cfg)
    values: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise CheckpointError(f"{name}: stored shape {shape} does not match config "
                                  f"({expected.get(name)})")
        size = 8 * shape[0] * shape[1]
        chunk = body[entry["offset"]:entry["offset"] + size]
        if len(chunk) != size:
            raise CheckpointError(f"{name}: truncated array data")
        values[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
    missing = sorted(set(expected) - set(values))
    if missing:
        raise CheckpointError(f"checkpoint lacks arrays: {', '.join(missing)}")
    params = HclParams.init(cfg, np.random.default_rng(0))
    for name, p in params.named().items():
        p.value = values[name].copy()
        p.zero_grad()
    return Checkpoint(cfg, params, header.get("rng_state", {}), version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# --- training loop ----------------------------------------------------------


@dataclass
class StepLog:
    step: int
    loss: float
    l_h: float
    l_t: float
    theta_p: float
    tau_p: float

    CSV_HEADER = "step,loss,l_h,l_t,theta_p,tau_p"

    def csv_row(self) -> str:
        return (f"{self.step},{self.loss!r},{self.l_h!r},{self.l_t!r},"
                f"{self.theta_p!r},{self.tau_p!r}")


def pretrain(corpus: list[AstGraph], cfg: TrainConfig,
             on_step: Callable[[StepLog], None] | None = None) -> Checkpoint:
    """Pretrain encoder and level classifier on unlabeled trees.

    Each step draws ``batch_size`` trees (without replacement when the corpus
    is large enough), samples ``min(N, triplets_per_graph)`` triples per tree,
    and takes one Adam step on the joint loss. ``on_step`` receives the losses
    measured before the update.
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    if cfg.no_nep and cfg.no_nro:
        raise NoTrainingSignal("both objectives are disabled")
    rng = np.random.default_rng(cfg.seed)
    params = HclParams.init(cfg, rng)
    preps = [prepare(g, cfg) for g in corpus]
    if cfg.no_nep:
        probe = [sample_triplets(g, 1, 0) for g in corpus]
        if cfg.triplets_per_graph == 0 or all(len(b) == 0 for b in probe):
            raise NoTrainingSignal("no tree yields a triplet and level prediction is disabled")
    # disabled objectives leave their parameters with zero gradients, so Adam never moves them
    opt = Adam(list(params.named().values()), lr=cfg.lr)

    for step in range(cfg.steps):
        size = min(cfg.batch_size, len(preps))
        idx = rng.choice(len(preps), size=size, replace=cfg.batch_size > len(preps))
        batch = [preps[i] for i in idx]
        trips = [sample_triplets(p.graph, min(p.graph.n, cfg.triplets_per_graph), rng)
                 for p in batch]
        params.zero_grad()
        with ad.Tape() as tape:
            loss, l_h, l_t = batch_losses(batch, params, cfg, trips)
        ad.backward(tape, loss)
        entry = StepLog(step, loss.item(),
                        l_h.item() if l_h is not None else 0.0,
                        l_t.item() if l_t is not None else 0.0,
                        params.theta_p.item(), params.tau_p.item())
        opt.step()
        if on_step is not None:
            on_step(entry)
        if step % 50 == 0:
            log.debug("step %d loss %.4f l_h %.4f l_t %.4f", step, entry.loss, entry.l_h, entry.l_t)
    return Checkpoint(cfg, params, rng.bit_generator.state)


# --- evaluation -------------------------------------------------------------


def predict_levels(graph: AstGraph, params: HclParams, cfg: TrainConfig) -> np.ndarray:
    x = encode_graph(graph, params, cfg)
    logits = x @ params.w_ast.value + params.b_ast.value
    return np.argmax(logits, axis=1)


def nep_accuracy(graphs: list[AstGraph], params: HclParams, cfg: TrainConfig) -> float:
    """Fraction of nodes whose predicted level is exact, pooled over ``graphs``."""
    hits = total = 0
    for g in graphs:
        pred = predict_levels(g, params, cfg)
        hits += int(np.sum(pred == np.asarray(g.levels)))
        total += g.n
    return hits / total


def level_distance_profile(graphs: list[AstGraph], params: HclParams, cfg: TrainConfig,
                           max_gap: int | None = None) -> dict[int, float]:
    """Mean squared distance between node pairs per level gap, averaged over trees.

    For each tree the mean is over unordered pairs ``i < j`` whose levels differ
    by the gap; trees without such pairs do not contribute to that gap.
    """
    per_gap: dict[int, list[float]] = {}
    for g in graphs:
        x = encode_graph(g, params, cfg)
        lv = np.asarray(g.levels)
        sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
        gaps = np.abs(lv[:, None] - lv[None, :])
        upper = np.triu(np.ones_like(gaps, dtype=bool), k=1)
        for gap in np.unique(gaps[upper]):
            if max_gap is not None and gap > max_gap:
                continue
            sel = upper & (gaps == gap)
            per_gap.setdefault(int(gap), []).append(float(sq[sel].mean()))
    return {gap: float(np.mean(v)) for gap, v in sorted(per_gap.items())}
