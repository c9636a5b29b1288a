"""Desk-scale runs: reduced dimensions and tree counts, small subsamples."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numpy as np

from .embedding import TRANSLATIONAL, EmbeddingModel, EmbeddingTrainConfig, train_embeddings
from .gbt import GbtConfig
from .kg import SPLITS, TripleStore, load_dataset_dir
from .pipeline import (MetricsReport, PipelineConfig, PipelineResult, ablation_run,
                       embedding_scorers, evaluate, run_pipeline)

logger = logging.getLogger(__name__)

DATA_ENV = "LINKBOOST_DATA"


def dataset_dir(name: str) -> Optional[str]:
    """``$LINKBOOST_DATA/<name>`` (as given or lower-case) when all three split files exist."""
    root = os.environ.get(DATA_ENV, "")
    if not root:
        return None
    for candidate in dict.fromkeys((name, name.lower())):
        path = os.path.join(root, candidate)
        if all(os.path.isfile(os.path.join(path, f"{s}.txt")) for s in SPLITS):
            return path
    return None


def load_named(name: str) -> Optional[TripleStore]:
    path = dataset_dir(name)
    return load_dataset_dir(path) if path else None


def subsample_top_entities(store: TripleStore, n: int = 2000) -> TripleStore:
    """Keep the ``n`` most frequent train entities and every triple among them.

    Frequency counts head and tail occurrences in train; ties go to the
    lower id. Relations left without triples are dropped and ids re-densified.
    """
    counts = np.bincount(store.train[:, [0, 2]].ravel(), minlength=store.num_entities)
    order = np.lexsort((np.arange(store.num_entities), -counts))
    keep = np.zeros(store.num_entities, dtype=bool)
    keep[order[:n]] = True

    def induced(arr):
        return arr[keep[arr[:, 0]] & keep[arr[:, 2]]]

    splits = {s: induced(store.split(s)) for s in SPLITS}
    ent_ids = np.flatnonzero(keep)
    used_rels = np.unique(np.concatenate([a[:, 1] for a in splits.values()]))
    ent_map = np.full(store.num_entities, -1, dtype=np.int64)
    ent_map[ent_ids] = np.arange(len(ent_ids))
    rel_map = np.full(store.num_relations, -1, dtype=np.int64)
    rel_map[used_rels] = np.arange(len(used_rels))

    def remap(arr):
        return np.stack([ent_map[arr[:, 0]], rel_map[arr[:, 1]], ent_map[arr[:, 2]]], axis=1)

    return TripleStore([store.entities[i] for i in ent_ids],
                       [store.relations[r] for r in used_rels],
                       *(remap(splits[s]) for s in SPLITS))


def desk_configs(dim: int = 50, estimators: int = 300, depth: int = 3, negatives: int = 32,
                 steps: int = 20000, kind: str = TRANSLATIONAL, gamma: float = 6.0,
                 seed: int = 0):
    emb = EmbeddingTrainConfig(kind=kind, dim=dim, steps=steps, negatives=64, gamma=gamma,
                               seed=seed)
    pipe = PipelineConfig(negatives=negatives, seed=seed,
                          gbt=GbtConfig(num_estimators=estimators, max_depth=depth,
                                        learning_rate=0.1, seed=seed))
    return emb, pipe


@dataclass
class DeskRun:
    model: EmbeddingModel
    baseline: MetricsReport
    result: PipelineResult

    @property
    def report(self) -> MetricsReport:
        return self.result.report


def desk_run(store: TripleStore, emb_config: EmbeddingTrainConfig, config: PipelineConfig,
             model: Optional[EmbeddingModel] = None, split: str = "test",
             subset: Optional[int] = None) -> DeskRun:
    """Train embeddings (unless given), the classifier pipeline and the distance baseline."""
    if model is None:
        model = train_embeddings(store, emb_config)
    baseline = evaluate(store, embedding_scorers(model, 2 * store.num_relations), split, subset)
    result = run_pipeline(store, model, config, split, subset)
    logger.info("baseline MRR %.4f  pipeline MRR %.4f", baseline.mrr, result.report.mrr)
    return DeskRun(model, baseline, result)


def ablation_table(store: TripleStore, model: EmbeddingModel, config: PipelineConfig,
                   names: Iterable[str] = ("rcwc", "lcwa-prediction"),
                   split: str = "test", subset: Optional[int] = None) -> Dict[str, MetricsReport]:
    out = {"full": run_pipeline(store, model, config, split, subset).report}
    for name in names:
        out[name] = ablation_run(store, model, config, [name], split, subset)
    return out
