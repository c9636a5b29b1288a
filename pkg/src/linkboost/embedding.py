"""Distance-based entity/relation embeddings (translational and rotational).

Model file format (little-endian, 44-byte header):

    offset  size  field
    0       8     magic  b"KGEMBED\\0"
    8       2     version (uint16, currently 1)
    10      1     kind (0 = translational-real, 1 = rotational-complex)
    11      1     layout (0 = real rows; 1 = complex rows, all real parts then
                  all imaginary parts)
    12      8     number of entities E (uint64)
    20      8     number of forward relations R (uint64)
    28      8     dimension d (uint64)
    36      8     margin gamma (float64)
    44      ...   entity matrix, float64 row-major, E x d (real) or E x 2d (complex)
    ...     ...   relation matrix, float64 row-major, R x d (vectors or phases)

Relation ids ``>= R`` denote inverses: ``d_{r+R}(a, b) = d_r(b, a)``.
"""
from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from numba import njit

from .kg import TripleStore

logger = logging.getLogger(__name__)

TRANSLATIONAL = "translational"
ROTATIONAL = "rotational"
KINDS = (TRANSLATIONAL, ROTATIONAL)

MAGIC = b"KGEMBED\x00"
_HEADER = struct.Struct("<8sHBBQQQd")


class DivergenceError(RuntimeError):
    pass


@dataclass
class EmbeddingModel:
    kind: str
    entity: np.ndarray
    relation: np.ndarray
    gamma: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        width = self.dim * (2 if self.kind == ROTATIONAL else 1)
        if self.entity.ndim != 2 or self.entity.shape[1] != width:
            raise ValueError(f"entity matrix must be E x {width}, got {self.entity.shape}")

    @property
    def dim(self) -> int:
        return self.relation.shape[1]

    @property
    def num_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation.shape[0]

    @property
    def feature_dim(self) -> int:
        return 2 * self.entity.shape[1]

    def complex_entity(self) -> np.ndarray:
        d = self.dim
        return self.entity[:, :d] + 1j * self.entity[:, d:]


@dataclass
class EmbeddingTrainConfig:
    kind: str = TRANSLATIONAL
    dim: int = 50
    learning_rate: float = 1.0
    batch_size: int = 512
    steps: int = 20000
    negatives: int = 64
    adversarial_temperature: float = 1.0
    gamma: float = 6.0
    seed: int = 0
    log_every: int = 1000

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        if self.dim < 1 or self.negatives < 1 or self.adversarial_temperature < 0:
            raise ValueError("need dim >= 1, negatives >= 1, adversarial_temperature >= 0")


def _require(model: EmbeddingModel, kind: str) -> None:
    if model.kind != kind:
        raise ValueError(f"{kind} distance requested on a {model.kind} model")


def _unfold(model: EmbeddingModel, h, r, t):
    """Resolve inverse relation ids to (head, forward rel, tail) arrays."""
    h, r, t = np.asarray(h), np.asarray(r), np.asarray(t)
    R = model.num_relations
    inv = r >= R
    return np.where(inv, t, h), np.where(inv, r - R, r), np.where(inv, h, t)


def distance(model: EmbeddingModel, h, r, t) -> np.ndarray:
    """Vectorised ``d_r(h, t)`` for broadcastable id arrays."""
    h, r, t = _unfold(model, h, r, t)
    if model.kind == TRANSLATIONAL:
        diff = model.entity[h] + model.relation[r] - model.entity[t]
        return np.sqrt(np.sum(diff * diff, axis=-1))
    u, v = _rotate_residual(model, h, r, t)
    return np.sum(u * u + v * v, axis=-1)


def _rotate_residual(model, h, r, t):
    d = model.dim
    eh, et = model.entity[h], model.entity[t]
    a, b = eh[..., :d], eh[..., d:]
    theta = model.relation[r]
    c, s = np.cos(theta), np.sin(theta)
    u = a * c - b * s - et[..., :d]
    v = a * s + b * c - et[..., d:]
    return u, v


def transe_distance(model: EmbeddingModel, h: int, r: int, t: int) -> float:
    _require(model, TRANSLATIONAL)
    return float(distance(model, h, r, t))


def rotate_distance(model: EmbeddingModel, h: int, r: int, t: int) -> float:
    _require(model, ROTATIONAL)
    return float(distance(model, h, r, t))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def adversarial_weights(model: EmbeddingModel, negatives, alpha: float = 1.0) -> np.ndarray:
    """Self-adversarial weights ``softmax(alpha * (gamma - d))`` over negatives.

    ``negatives`` is an ``(n, 3)`` array of corrupted triples.
    """
    neg = np.asarray(negatives).reshape(-1, 3)
    d = distance(model, neg[:, 0], neg[:, 1], neg[:, 2])
    return _softmax(alpha * (model.gamma - d))


def nll_loss(model: EmbeddingModel, positive, negatives, alpha: float = 1.0) -> float:
    """Negative log-likelihood of one positive against weighted negatives."""
    pos = np.asarray(positive).reshape(1, 3)
    neg = np.asarray(negatives).reshape(1, -1, 3)
    loss, _ = _batch_loss(model, pos, neg, alpha, with_grad=False)
    return float(loss[0])


def nll_loss_grad(model: EmbeddingModel, positive, negatives, alpha: float = 1.0):
    """Loss and dense gradients ``(d_entity, d_relation)`` for one positive.

    The adversarial weights are treated as constants.
    """
    pos = np.asarray(positive).reshape(1, 3)
    neg = np.asarray(negatives).reshape(1, -1, 3)
    loss, grads = _batch_loss(model, pos, neg, alpha, with_grad=True)
    g_ent = np.zeros_like(model.entity)
    g_rel = np.zeros_like(model.relation)
    (ei, eg), (ri, rg) = grads
    np.add.at(g_ent, ei, eg)
    np.add.at(g_rel, ri, rg)
    return float(loss[0]), g_ent, g_rel


def _batch_loss(model, pos, neg, alpha, with_grad):
    """Per-positive losses for ``pos`` (B, 3) and ``neg`` (B, N, 3).

    When ``with_grad`` is set, also returns sparse gradient contributions as
    ``((entity_ids, entity_rows), (relation_ids, relation_rows))``; ids may
    repeat and must be scatter-added.
    """
    gamma = model.gamma
    d_pos = distance(model, pos[:, 0], pos[:, 1], pos[:, 2])
    d_neg = distance(model, neg[..., 0], neg[..., 1], neg[..., 2])
    p = _softmax(alpha * (gamma - d_neg))
    loss = -_log_sigmoid(gamma - d_pos) - np.sum(p * _log_sigmoid(d_neg - gamma), axis=-1)
    if not with_grad:
        return loss, None

    w_pos = _sigmoid(d_pos - gamma)
    w_neg = -p * _sigmoid(gamma - d_neg)
    trip = np.concatenate([pos, neg.reshape(-1, 3)])
    w = np.concatenate([w_pos, w_neg.reshape(-1)])
    return loss, _distance_grad(model, trip, w)


def _distance_grad(model, trip, w):
    h, r, t = _unfold(model, trip[:, 0], trip[:, 1], trip[:, 2])
    wc = w[:, None]
    if model.kind == TRANSLATIONAL:
        diff = model.entity[h] + model.relation[r] - model.entity[t]
        norm = np.sqrt(np.sum(diff * diff, axis=1, keepdims=True))
        unit = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)
        gh = wc * unit
        ent_ids = np.concatenate([h, t])
        ent_rows = np.concatenate([gh, -gh])
        return (ent_ids, ent_rows), (r, gh)

    d = model.dim
    eh = model.entity[h]
    a, b = eh[:, :d], eh[:, d:]
    theta = model.relation[r]
    c, s = np.cos(theta), np.sin(theta)
    u, v = _rotate_residual(model, h, r, t)
    g_a = 2 * (u * c + v * s)
    g_b = 2 * (-u * s + v * c)
    g_theta = 2 * (u * (-a * s - b * c) + v * (a * c - b * s))
    gh = wc * np.concatenate([g_a, g_b], axis=1)
    gt = wc * np.concatenate([-2 * u, -2 * v], axis=1)
    ent_ids = np.concatenate([h, t])
    ent_rows = np.concatenate([gh, gt])
    return (ent_ids, ent_rows), (r, wc * g_theta)


@njit(cache=True, nogil=True)
def _softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True, nogil=True)
def _sig(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


@njit(cache=True, nogil=True)
def _dist_one(ent, rel, h, r, t, rotational):
    d = rel.shape[1]
    acc = 0.0
    if rotational:
        for k in range(d):
            c, s = math.cos(rel[r, k]), math.sin(rel[r, k])
            u = ent[h, k] * c - ent[h, d + k] * s - ent[t, k]
            v = ent[h, k] * s + ent[h, d + k] * c - ent[t, d + k]
            acc += u * u + v * v
        return acc
    for k in range(d):
        x = ent[h, k] + rel[r, k] - ent[t, k]
        acc += x * x
    return math.sqrt(acc)


@njit(cache=True, nogil=True)
def _grad_one(ent, rel, h, r, t, w, rotational, g_ent, g_rel):
    d = rel.shape[1]
    if rotational:
        for k in range(d):
            a, b, th = ent[h, k], ent[h, d + k], rel[r, k]
            c, s = math.cos(th), math.sin(th)
            u = a * c - b * s - ent[t, k]
            v = a * s + b * c - ent[t, d + k]
            g_ent[h, k] += w * 2.0 * (u * c + v * s)
            g_ent[h, d + k] += w * 2.0 * (-u * s + v * c)
            g_ent[t, k] -= w * 2.0 * u
            g_ent[t, d + k] -= w * 2.0 * v
            g_rel[r, k] += w * 2.0 * (u * (-a * s - b * c) + v * (a * c - b * s))
        return
    norm = _dist_one(ent, rel, h, r, t, False)
    if norm == 0.0:
        return
    for k in range(d):
        gk = w * (ent[h, k] + rel[r, k] - ent[t, k]) / norm
        g_ent[h, k] += gk
        g_ent[t, k] -= gk
        g_rel[r, k] += gk


@njit(cache=True, nogil=True)
def _sgd_kernel(ent, rel, pos, neg, gamma, alpha, rotational, scale,
                g_ent, g_rel, mark_e, mark_r):
    """One batch: accumulate gradients at the current parameters, then apply.

    Returns the summed loss. Gradient buffers and marks must be all-zero on
    entry and are left all-zero on exit.
    """
    B, N = neg.shape[0], neg.shape[1]
    dn = np.empty(N)
    p = np.empty(N)
    total = 0.0
    for b in range(B):
        h, r, t = pos[b, 0], pos[b, 1], pos[b, 2]
        dp = _dist_one(ent, rel, h, r, t, rotational)
        top = -np.inf
        for j in range(N):
            dn[j] = _dist_one(ent, rel, neg[b, j, 0], neg[b, j, 1], neg[b, j, 2], rotational)
            top = max(top, alpha * (gamma - dn[j]))
        z = 0.0
        for j in range(N):
            p[j] = math.exp(alpha * (gamma - dn[j]) - top)
            z += p[j]
        loss = _softplus(dp - gamma)
        for j in range(N):
            p[j] /= z
            loss += p[j] * _softplus(gamma - dn[j])
        total += loss
        _grad_one(ent, rel, h, r, t, _sig(dp - gamma), rotational, g_ent, g_rel)
        mark_e[h] = True
        mark_e[t] = True
        mark_r[r] = True
        for j in range(N):
            nh, nr, nt = neg[b, j, 0], neg[b, j, 1], neg[b, j, 2]
            _grad_one(ent, rel, nh, nr, nt, -p[j] * _sig(gamma - dn[j]), rotational,
                      g_ent, g_rel)
            mark_e[nh] = True
            mark_e[nt] = True
            mark_r[nr] = True
    two_pi = 2.0 * math.pi
    for i in range(ent.shape[0]):
        if mark_e[i]:
            for k in range(ent.shape[1]):
                ent[i, k] -= scale * g_ent[i, k]
                g_ent[i, k] = 0.0
            mark_e[i] = False
    for i in range(rel.shape[0]):
        if mark_r[i]:
            for k in range(rel.shape[1]):
                rel[i, k] -= scale * g_rel[i, k]
                if rotational:
                    rel[i, k] = rel[i, k] % two_pi
                g_rel[i, k] = 0.0
            mark_r[i] = False
    return total


def init_model(num_entities: int, num_relations: int, config: EmbeddingTrainConfig,
               rng: np.random.Generator) -> EmbeddingModel:
    """Uniform init in ``[-gamma/d, gamma/d]``; rotational phases in ``[0, 2pi)``."""
    bound = config.gamma / config.dim
    width = config.dim * (2 if config.kind == ROTATIONAL else 1)
    entity = rng.uniform(-bound, bound, size=(num_entities, width))
    if config.kind == ROTATIONAL:
        relation = rng.uniform(0.0, 2 * math.pi, size=(num_relations, config.dim))
    else:
        relation = rng.uniform(-bound, bound, size=(num_relations, config.dim))
    return EmbeddingModel(config.kind, entity, relation, float(config.gamma))


class EmbeddingTrainer:
    """Minibatch SGD on the self-adversarial NLL loss.

    The step runs in a compiled kernel; :func:`nll_loss_grad` is the
    reference for the same gradients. Each positive gets ``config.negatives`` corruptions; each corruption
    replaces the head or the tail (fair coin) with a uniform entity.
    Single-threaded, so a fixed seed gives bitwise-identical matrices.
    """

    def __init__(self, store: TripleStore, config: EmbeddingTrainConfig,
                 model: Optional[EmbeddingModel] = None, step: int = 0,
                 rng_state: Optional[dict] = None):
        self.store = store
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        if model is None:
            model = init_model(store.num_entities, store.num_relations, config, self.rng)
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.model = model
        self.step = step
        self._buffers = None
        self.history: List[Tuple[int, float]] = []

    def sample_batch(self):
        cfg = self.config
        train = self.store.train
        pos = train[self.rng.integers(0, len(train), size=cfg.batch_size)]
        B, N = len(pos), cfg.negatives
        neg = np.repeat(pos[:, None, :], N, axis=1)
        corrupt_head = self.rng.random((B, N)) < 0.5
        ents = self.rng.integers(0, self.store.num_entities, size=(B, N))
        neg[..., 0] = np.where(corrupt_head, ents, neg[..., 0])
        neg[..., 2] = np.where(corrupt_head, neg[..., 2], ents)
        return pos, neg

    def train_step(self) -> float:
        pos, neg = self.sample_batch()
        m = self.model
        if self._buffers is None:
            self._buffers = (np.zeros_like(m.entity), np.zeros_like(m.relation),
                             np.zeros(m.num_entities, dtype=np.bool_),
                             np.zeros(m.num_relations, dtype=np.bool_))
        total = _sgd_kernel(m.entity, m.relation, pos, neg, float(m.gamma),
                            float(self.config.adversarial_temperature),
                            m.kind == ROTATIONAL, self.config.learning_rate / len(pos),
                            *self._buffers)
        mean = total / len(pos)
        if not math.isfinite(mean):
            raise DivergenceError(f"non-finite embedding loss at step {self.step}")
        if not (np.isfinite(m.entity[pos[:, 0]]).all() and np.isfinite(m.relation).all()):
            raise DivergenceError(f"non-finite embedding parameters at step {self.step}")
        self.step += 1
        return mean

    def run(self, until: Optional[int] = None,
            callback: Optional[Callable[["EmbeddingTrainer", float], None]] = None
            ) -> EmbeddingModel:
        """Train until ``until`` total steps (default ``config.steps``)."""
        until = self.config.steps if until is None else until
        window: List[float] = []
        while self.step < until:
            window.append(self.train_step())
            if self.step % self.config.log_every == 0 or self.step == until:
                avg = float(np.mean(window))
                self.history.append((self.step, avg))
                logger.info("step %d  loss %.5f", self.step, avg)
                if callback is not None:
                    callback(self, avg)
                window = []
        return self.model

    def save_checkpoint(self, model_path: str) -> None:
        save_model(self.model, model_path)
        with open(model_path + ".ckpt.json", "w") as f:
            json.dump({"step": self.step, "rng_state": self.rng.bit_generator.state,
                       "config": asdict(self.config)}, f, indent=1, sort_keys=True)

    @classmethod
    def resume(cls, store: TripleStore, config: EmbeddingTrainConfig,
               model_path: str) -> "EmbeddingTrainer":
        with open(model_path + ".ckpt.json") as f:
            ckpt = json.load(f)
        return cls(store, config, model=load_model(model_path), step=ckpt["step"],
                   rng_state=ckpt["rng_state"])


def train_embeddings(store: TripleStore, config: EmbeddingTrainConfig,
                     callback=None) -> EmbeddingModel:
    return EmbeddingTrainer(store, config).run(callback=callback)


def feature_vector(model: EmbeddingModel, h: int, t: int) -> np.ndarray:
    """``[h; t]``; complex entities contribute real parts then imaginary parts."""
    return np.concatenate([model.entity[h], model.entity[t]])


def pair_features(model: EmbeddingModel, heads, tails, dtype=np.float32) -> np.ndarray:
    heads, tails = np.asarray(heads), np.asarray(tails)
    out = np.empty((len(heads), model.feature_dim), dtype=dtype)
    w = model.entity.shape[1]
    out[:, :w] = model.entity[heads]
    out[:, w:] = model.entity[tails]
    return out


def tail_distances(model: EmbeddingModel, head: int, rel: int) -> np.ndarray:
    """``d_rel(head, t)`` for every entity ``t`` (``rel`` may be an inverse id)."""
    R = model.num_relations
    E = model.entity
    if rel >= R:
        r = rel - R
        if model.kind == TRANSLATIONAL:
            diff = E + model.relation[r] - E[head]
            return np.sqrt(np.einsum("ij,ij->i", diff, diff))
        c = model.complex_entity() * np.exp(1j * model.relation[r]) - model.complex_entity()[head]
        return np.sum(c.real ** 2 + c.imag ** 2, axis=1)
    if model.kind == TRANSLATIONAL:
        diff = (E[head] + model.relation[rel]) - E
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    ce = model.complex_entity()
    c = ce[head] * np.exp(1j * model.relation[rel]) - ce
    return np.sum(c.real ** 2 + c.imag ** 2, axis=1)


def save_model(model: EmbeddingModel, path: str) -> None:
    kind = KINDS.index(model.kind)
    header = _HEADER.pack(MAGIC, 1, kind, kind, model.num_entities, model.num_relations,
                          model.dim, float(model.gamma))
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(model.entity, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(model.relation, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_model(path: str) -> EmbeddingModel:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated embedding file")
    magic, version, kind, layout, E, R, d, gamma = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != 1:
        raise ValueError(f"{path}: not an embedding model file (version 1)")
    if kind not in (0, 1) or layout != kind:
        raise ValueError(f"{path}: unsupported kind/layout {kind}/{layout}")
    width = d * (2 if kind == 1 else 1)
    off = _HEADER.size
    n_ent, n_rel = E * width, R * d
    if len(raw) != off + 8 * (n_ent + n_rel):
        raise ValueError(f"{path}: size does not match header")
    entity = np.frombuffer(raw, dtype="<f8", count=n_ent, offset=off).reshape(E, width).copy()
    relation = np.frombuffer(raw, dtype="<f8", count=n_rel, offset=off + 8 * n_ent)
    return EmbeddingModel(KINDS[kind], entity, relation.reshape(R, d).copy(), gamma)
