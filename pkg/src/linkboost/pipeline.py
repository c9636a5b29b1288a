"""Per-relation classifier training, LCWA-gated scoring and filtered ranking."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import sampling
from .embedding import EmbeddingModel, pair_features, tail_distances
from .gbt import GbtConfig, LabeledMatrix, TreeEnsemble, sigmoid, train_ensemble
from .kg import PairSet, TripleStore, add_inverse_relations, build_pair_sets
from .relations import RelationProfile, augment_positives, build_profiles, detect_subrelations

logger = logging.getLogger(__name__)

ABLATIONS = ("relation-inference", "rcwc", "lcwa-prediction")
HITS_AT = (1, 3, 10)

FAMILY_DEFAULTS = {
    "freebase": dict(negatives=64, num_estimators=1000, max_depth=5, learning_rate=0.1,
                     dim=1000, gamma=12.0),
    "wordnet": dict(negatives=32, num_estimators=1500, max_depth=3, learning_rate=0.1,
                    dim=500, gamma=6.0),
}


@dataclass
class PipelineConfig:
    delta_sub: float = 0.8
    delta_rcwc: float = 1.0
    delta_lcw: float = 0.9
    lcw_folds: int = 5
    negatives: int = 32
    gbt: GbtConfig = field(default_factory=GbtConfig)
    stage_fraction: float = 0.5
    refresh_count: int = 1
    tau_adv: float = 0.5
    adversarial_mode: str = "append"
    base_strategy: str = "auto"
    rcwc_range_fraction: float = 0.5
    min_positives: int = 4
    use_relation_inference: bool = True
    use_rcwc: bool = True
    use_lcwa: bool = True
    seed: int = 0
    threads: int = 1
    embedding_path: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.gbt, dict):
            self.gbt = GbtConfig(**self.gbt)
        if not 0.0 <= self.stage_fraction < 1.0:
            raise ValueError("stage_fraction must lie in [0, 1)")
        if not 0.0 <= self.delta_sub <= 1.0:
            raise ValueError("delta_sub must lie in [0, 1]")
        if not 0.0 <= self.delta_lcw <= 1.0:
            raise ValueError("delta_lcw must lie in [0, 1]")
        if self.delta_rcwc < 0:
            raise ValueError("delta_rcwc must be >= 0")
        if self.negatives < 1 or self.refresh_count < 0 or self.lcw_folds < 1:
            raise ValueError("negatives >= 1, refresh_count >= 0, lcw_folds >= 1 required")
        if self.adversarial_mode not in ("replace", "append"):
            raise ValueError("adversarial_mode must be 'replace' or 'append'")
        if self.base_strategy not in ("auto", sampling.NAIVE, sampling.RCWC):
            raise ValueError("base_strategy must be 'auto', 'naive' or 'rcwc'")

    def stage_sizes(self) -> List[int]:
        """Tree counts per stage: base stage first, then one entry per refresh."""
        K = self.gbt.num_estimators
        k1 = int(round((1.0 - self.stage_fraction) * K))
        if self.stage_fraction == 0.0 or self.refresh_count == 0 or k1 >= K:
            return [K]
        rest = K - k1
        per, extra = divmod(rest, self.refresh_count)
        return [k1] + [per + (1 if i < extra else 0) for i in range(self.refresh_count)
                       if per + (1 if i < extra else 0) > 0]

    def ablate(self, disabled: Iterable[str]) -> "PipelineConfig":
        disabled = set(disabled)
        unknown = disabled - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation(s): {sorted(unknown)}; choose from {ABLATIONS}")
        return replace(self,
                       use_relation_inference=self.use_relation_inference
                       and "relation-inference" not in disabled,
                       use_rcwc=self.use_rcwc and "rcwc" not in disabled,
                       use_lcwa=self.use_lcwa and "lcwa-prediction" not in disabled)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PreparedKG:
    store: TripleStore
    pair_sets: Dict[int, PairSet]
    links: List[Tuple[int, int]]
    positives: Dict[int, PairSet]
    profiles: Dict[int, RelationProfile]

    @property
    def num_relations(self) -> int:
        return 2 * self.store.num_relations


def prepare(store: TripleStore, config: PipelineConfig) -> PreparedKG:
    """Pair sets with inverses, subrelation augmentation and relation profiles."""
    pair_sets = add_inverse_relations(build_pair_sets(store), store.num_relations)
    if config.use_relation_inference:
        links = detect_subrelations(pair_sets, config.delta_sub)
        positives = augment_positives(pair_sets, links)
    else:
        links, positives = [], dict(pair_sets)
    profiles = build_profiles(positives, links, config.lcw_folds, config.seed)
    logger.info("prepared %d relation slots, %d subrelation links", len(pair_sets), len(links))
    return PreparedKG(store, pair_sets, links, positives, profiles)


def base_strategy(profile: RelationProfile, num_entities: int, config: PipelineConfig) -> str:
    if not config.use_rcwc:
        return sampling.NAIVE
    if config.base_strategy != "auto":
        return config.base_strategy
    if len(profile.range) < config.rcwc_range_fraction * num_entities:
        return sampling.RCWC
    return sampling.NAIVE


def sample_pool(rel: int, positives: PairSet, profile: RelationProfile, strategy: str,
                count: int, num_entities: int, delta_rcwc: float,
                rng: np.random.Generator) -> np.ndarray:
    """Base-strategy negatives for every positive, stacked into one ``(n, 2)`` array."""
    out = []
    for pos in positives.array.tolist():
        if strategy == sampling.RCWC:
            b = sampling.rcwc_negatives(rel, pos, count, positives, profile, delta_rcwc, rng,
                                        num_entities)
        else:
            b = sampling.naive_negatives(rel, pos, count, positives, num_entities, rng)
        out.append(b.pairs)
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(out)


def _matrix(entity32: np.ndarray, pos: np.ndarray, neg: np.ndarray) -> LabeledMatrix:
    pairs = np.concatenate([pos, neg])
    X = np.empty((len(pairs), 2 * entity32.shape[1]), dtype=np.float32)
    w = entity32.shape[1]
    X[:, :w] = entity32[pairs[:, 0]]
    X[:, w:] = entity32[pairs[:, 1]]
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return LabeledMatrix(X, y)


@dataclass
class RelationTrainingLog:
    rel: int
    strategy: str = ""
    positives: int = 0
    base_negatives: int = 0
    adversarial: List[int] = field(default_factory=list)
    keep_pools: bool = False
    pools: List[np.ndarray] = field(default_factory=list)


def train_relation(rel: int, positives: PairSet, profile: RelationProfile,
                   model: EmbeddingModel, config: PipelineConfig,
                   rng: Optional[np.random.Generator] = None,
                   log: Optional[RelationTrainingLog] = None) -> Optional[TreeEnsemble]:
    """Train one relation's ensemble with staged self-adversarial refresh.

    Stage 1 fits the first trees on positives plus base negatives (rcwc or
    naive). Each refresh draws a fresh base pool, keeps the negatives the
    partial ensemble scores at or above ``tau_adv`` and fits the next block
    of trees on the stage-1 rows plus those (``append``, default) or on
    positives plus those only (``replace``). When nothing is mined the next
    block trains on the stage-1 rows. Returns ``None`` when there are fewer
    than ``min_positives`` positives.
    """
    if len(positives) < config.min_positives:
        return None
    rng = rng if rng is not None else np.random.default_rng([config.seed, rel])
    log = log if log is not None else RelationTrainingLog(rel)
    E = model.num_entities
    entity32 = model.entity.astype(np.float32)
    strategy = base_strategy(profile, E, config)
    pos = positives.array

    def pool() -> np.ndarray:
        return sample_pool(rel, positives, profile, strategy, config.negatives, E,
                           config.delta_rcwc, rng)

    base_neg = pool()
    stage1 = _matrix(entity32, pos, base_neg)
    log.strategy, log.positives, log.base_negatives = strategy, len(pos), len(base_neg)
    if log.keep_pools:
        log.pools.append(base_neg)

    def refresh(ensemble: TreeEnsemble) -> LabeledMatrix:
        fresh = pool()
        if len(fresh):
            scores = sigmoid(ensemble.margin_pair_rows(entity32, fresh[:, 0], fresh[:, 1]))
            adv, _ = sampling.select_adversarial(fresh, scores, config.tau_adv)
        else:
            adv = fresh
        log.adversarial.append(len(adv))
        if log.keep_pools:
            log.pools.append(adv)
        if len(adv) == 0:
            return stage1
        if config.adversarial_mode == "append":
            return _matrix(entity32, pos, np.concatenate([base_neg, adv]))
        return _matrix(entity32, pos, adv)

    sizes = config.stage_sizes()
    schedule = [(sizes[0], stage1)] + [(k, refresh) for k in sizes[1:]]
    return train_ensemble(schedule, config.gbt)


def lcwa_score(rel: int, tail: int, yhat: float, profile: RelationProfile,
               delta_lcw: float) -> float:
    """Zero the score of out-of-range tails for relations whose lcw index exceeds ``delta_lcw``."""
    if profile.lcw > delta_lcw:
        return float(yhat) if tail in profile.range else 0.0
    return float(yhat)


def lcwa_gate(scores: np.ndarray, profile: RelationProfile, delta_lcw: float) -> np.ndarray:
    if profile.lcw <= delta_lcw:
        return scores
    out = np.zeros_like(scores)
    ids = profile.range_ids
    out[ids] = scores[ids]
    return out


class RelationScorer:
    """Scores every entity as a tail candidate for ``(head, rel, ?)``.

    With an ensemble the raw score is the classifier probability; without one
    it is ``sigmoid(gamma - d_rel(head, t))`` from the embedding. The LCWA
    gate is applied on top when enabled.
    """

    def __init__(self, rel: int, model: EmbeddingModel, ensemble: Optional[TreeEnsemble] = None,
                 profile: Optional[RelationProfile] = None, delta_lcw: float = 0.9,
                 use_lcwa: bool = True, entity32: Optional[np.ndarray] = None):
        self.rel = rel
        self.model = model
        self.ensemble = ensemble
        self.profile = profile
        self.delta_lcw = delta_lcw
        self.use_lcwa = use_lcwa and profile is not None
        self.entity32 = entity32 if entity32 is not None else model.entity.astype(np.float32)
        self._all = np.arange(model.num_entities, dtype=np.int64)

    @property
    def is_fallback(self) -> bool:
        return self.ensemble is None

    def raw(self, head: int) -> np.ndarray:
        if self.ensemble is None:
            return sigmoid(self.model.gamma - tail_distances(self.model, head, self.rel))
        return sigmoid(self.ensemble.margin_pairs(self.entity32, head, self._all))

    def __call__(self, head: int) -> np.ndarray:
        s = self.raw(head)
        if self.use_lcwa:
            s = lcwa_gate(s, self.profile, self.delta_lcw)
        return s


def embedding_scorers(model: EmbeddingModel, num_relation_slots: int) -> Dict[int, RelationScorer]:
    """Ungated distance-ranking baseline for every relation slot."""
    ent32 = model.entity.astype(np.float32)
    return {r: RelationScorer(r, model, use_lcwa=False, entity32=ent32)
            for r in range(num_relation_slots)}


@dataclass(frozen=True)
class RankResult:
    head: int
    rel: int
    tail: int
    rank: int
    candidates: int


def rank_from_scores(scores: np.ndarray, target: int, filtered: np.ndarray) -> Tuple[int, int]:
    """Mean-tie filtered rank of ``target`` among ``scores``.

    ``filtered`` lists entity ids to drop from the candidate list; the
    target itself is never dropped. rank = 1 + #higher + ceil(#ties / 2),
    i.e. ``1 + higher + ties/2`` rounded half up.
    """
    keep = np.ones(len(scores), dtype=bool)
    if len(filtered):
        keep[filtered] = False
    keep[target] = True
    cand = scores[keep]
    s = scores[target]
    higher = int(np.count_nonzero(cand > s))
    ties = int(np.count_nonzero(cand == s)) - 1
    return 1 + higher + (ties + 1) // 2, int(keep.sum())


def filtered_rank(triple, store: TripleStore, scorer: Callable[[int], np.ndarray]) -> RankResult:
    """Rank ``(h, r, t)`` against every tail corruption not known in any split."""
    h, r, t = (int(x) for x in triple)
    scores = scorer(h)
    rank, n = rank_from_scores(scores, t, store.known_tails(h, r))
    return RankResult(h, r, t, rank, n)


@dataclass
class MetricsReport:
    mr: float
    mrr: float
    hits: Dict[int, float]
    count: int
    random_mrr: float = float("nan")
    per_relation: Dict[int, dict] = field(default_factory=dict)
    note: str = "filtered tail ranking; both directions aggregated (h, r, ?) and (t, r^-1, ?)"

    @classmethod
    def from_ranks(cls, results: Sequence[RankResult], relation_names=None) -> "MetricsReport":
        if not results:
            raise ValueError("no ranks to aggregate")
        ranks = np.array([r.rank for r in results], dtype=np.float64)
        cands = np.array([r.candidates for r in results], dtype=np.float64)
        summary = _summarise(ranks)
        harmonic = np.array([_harmonic(int(n)) for n in cands])
        per = {}
        rels = np.array([r.rel for r in results])
        for rel in sorted(set(rels.tolist())):
            entry = _summarise(ranks[rels == rel])
            if relation_names is not None:
                entry["name"] = relation_names(rel)
            per[rel] = entry
        return cls(mr=summary["MR"], mrr=summary["MRR"],
                   hits={k: summary[f"H@{k}"] for k in HITS_AT}, count=len(results),
                   random_mrr=float(np.mean(harmonic / cands)), per_relation=per)

    def metrics(self) -> Dict[str, float]:
        out = {"MR": self.mr, "MRR": self.mrr}
        out.update({f"H@{k}": self.hits[k] for k in HITS_AT})
        return out

    def to_json(self) -> str:
        body = {"note": self.note, "count": self.count, "metrics": self.metrics(),
                "random_mrr": self.random_mrr,
                "per_relation": {str(k): v for k, v in sorted(self.per_relation.items())}}
        return json.dumps(body, indent=1, sort_keys=True) + "\n"

    def to_table(self) -> str:
        m = self.metrics()
        head = "".join(f"{k:>10}" for k in m)
        vals = f"{m['MR']:>10.1f}" + "".join(f"{m[k]:>10.4f}" for k in list(m)[1:])
        return f"# {self.note}\n# queries: {self.count}\n{head}\n{vals}\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["relation", "name", "count", "MR", "MRR"] + [f"H@{k}" for k in HITS_AT])
        for rel, e in sorted(self.per_relation.items()):
            w.writerow([rel, e.get("name", ""), e["count"], repr(e["MR"]), repr(e["MRR"])]
                       + [repr(e[f"H@{k}"]) for k in HITS_AT])
        return buf.getvalue()


def _harmonic(n: int) -> float:
    if n < 1000:
        return float(np.sum(1.0 / np.arange(1, n + 1)))
    return math.log(n) + 0.5772156649015329 + 1.0 / (2 * n) - 1.0 / (12 * n * n)


def _summarise(ranks: np.ndarray) -> dict:
    out = {"count": int(len(ranks)), "MR": float(np.mean(ranks)), "MRR": float(np.mean(1.0 / ranks))}
    for k in HITS_AT:
        out[f"H@{k}"] = float(np.mean(ranks <= k))
    return out


def evaluation_queries(triples: np.ndarray, num_relations: int) -> np.ndarray:
    """Both directions of every triple: ``(h, r, t)`` and ``(t, r + R, h)``."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    inv = triples[:, [2, 1, 0]].copy()
    inv[:, 1] += num_relations
    return np.concatenate([triples, inv])


def evaluate(store: TripleStore, scorers: Mapping[int, Callable[[int], np.ndarray]],
             split: str = "test", subset: Optional[int] = None,
             fallback: Optional[Callable[[int], Callable[[int], np.ndarray]]] = None
             ) -> MetricsReport:
    """Filtered MR/MRR/Hits@k over ``split`` in both directions.

    Relations without a scorer use ``fallback(rel)``; without a fallback a
    missing scorer is an error.
    """
    triples = store.split(split)
    if subset is not None:
        triples = triples[:subset]
    queries = evaluation_queries(triples, store.num_relations)
    order = np.lexsort((queries[:, 2], queries[:, 0], queries[:, 1]))
    results: List[RankResult] = []
    cache_key, cache = None, None
    missing = set()
    for h, r, t in queries[order].tolist():
        scorer = scorers.get(r)
        if scorer is None:
            if fallback is None:
                raise KeyError(f"no scorer for relation {r}")
            if r not in missing:
                logger.warning("no scorer for relation %d; using fallback", r)
                missing.add(r)
            scorer = fallback(r)
        if cache_key != (h, r):
            cache_key, cache = (h, r), scorer(h)
        rank, n = rank_from_scores(cache, t, store.known_tails(h, r))
        results.append(RankResult(h, r, t, rank, n))
    R = store.num_relations
    names = lambda rel: store.relations[rel] if rel < R else store.relations[rel - R] + "_inverse"
    return MetricsReport.from_ranks(results, names)


@dataclass
class PipelineResult:
    prepared: PreparedKG
    ensembles: Dict[int, Optional[TreeEnsemble]]
    scorers: Dict[int, RelationScorer]
    report: Optional[MetricsReport] = None
    logs: Dict[int, RelationTrainingLog] = field(default_factory=dict)


def train_all(prepared: PreparedKG, model: EmbeddingModel, config: PipelineConfig,
              relations: Optional[Iterable[int]] = None,
              on_done: Optional[Callable[[int, Optional[TreeEnsemble]], None]] = None
              ) -> Tuple[Dict[int, Optional[TreeEnsemble]], Dict[int, RelationTrainingLog]]:
    """Train every relation slot; each gets its own rng stream from ``(seed, rel)``."""
    rels = sorted(prepared.positives) if relations is None else list(relations)
    logs = {r: RelationTrainingLog(r) for r in rels}

    def job(r):
        rng = np.random.default_rng([config.seed, r])
        ens = train_relation(r, prepared.positives[r], prepared.profiles[r], model, config,
                             rng, logs[r])
        if on_done is not None:
            on_done(r, ens)
        return ens

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as ex:
            ensembles = dict(zip(rels, ex.map(job, rels)))
    else:
        ensembles = {r: job(r) for r in rels}
    return ensembles, logs


def build_scorers(prepared: PreparedKG, model: EmbeddingModel,
                  ensembles: Mapping[int, Optional[TreeEnsemble]],
                  config: PipelineConfig) -> Dict[int, RelationScorer]:
    ent32 = model.entity.astype(np.float32)
    return {r: RelationScorer(r, model, ensembles.get(r), prepared.profiles[r], config.delta_lcw,
                              config.use_lcwa, ent32)
            for r in sorted(prepared.positives)}


def run_pipeline(store: TripleStore, model: EmbeddingModel, config: PipelineConfig,
                 split: str = "test", subset: Optional[int] = None) -> PipelineResult:
    prepared = prepare(store, config)
    ensembles, logs = train_all(prepared, model, config)
    scorers = build_scorers(prepared, model, ensembles, config)
    report = evaluate(store, scorers, split, subset)
    return PipelineResult(prepared, ensembles, scorers, report, logs)


def ablation_run(store: TripleStore, model: EmbeddingModel, config: PipelineConfig,
                 disabled: Iterable[str], split: str = "test",
                 subset: Optional[int] = None) -> MetricsReport:
    """Rerun the pipeline with the named modules bypassed."""
    return run_pipeline(store, model, config.ablate(disabled), split, subset).report


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_report(report: MetricsReport, directory: str, manifest: Optional[dict] = None,
                 prefix: str = "metrics") -> None:
    """``<prefix>.json``, ``<prefix>.txt``, ``<prefix>_per_relation.csv`` and ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    outputs = {f"{prefix}.json": report.to_json(), f"{prefix}.txt": report.to_table(),
               f"{prefix}_per_relation.csv": report.to_csv()}
    if manifest is not None:
        outputs["manifest.json"] = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    for name, text in outputs.items():
        with open(os.path.join(directory, name), "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
