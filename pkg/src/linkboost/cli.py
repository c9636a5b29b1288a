"""Command-line front end.

Working directory layout::

    SCHEMA                      layout tag, checked by every command
    .lock                       held while a command runs
    data/                       id-encoded splits and vocabularies
    analysis/                   positives.tsv, subrelations.tsv, profiles.jsonl, summary.txt
    embedding/model.bin         embedding model (+ model.bin.ckpt.json)
    classifiers/rel_NNNN.gbt    one ensemble per relation slot, or rel_NNNN.fallback
    reports/<name>/             metrics.json, metrics.txt, metrics_per_relation.csv, manifest.json

The config file is a flat JSON object; see ``CONFIG_KEYS``. Command-line
flags override file values.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from typing import Dict, List, Optional

import numpy as np
from filelock import FileLock, Timeout

from .embedding import DivergenceError, EmbeddingTrainConfig, EmbeddingTrainer, load_model
from .gbt import GbtConfig, NonFiniteMarginError, dumps_ensemble, loads_ensemble
from .kg import DatasetError, PairSet, load_dataset, load_store, save_store
from .pipeline import (ABLATIONS, FAMILY_DEFAULTS, PipelineConfig, PreparedKG, RelationScorer,
                       ablation_run, embedding_scorers, evaluate, file_sha256, prepare,
                       train_all, write_report)
from .relations import load_profiles, save_profiles

logger = logging.getLogger("linkboost")

SCHEMA_TAG = "linkboost-workdir 1\n"

_PIPE_KEYS = {f.name for f in fields(PipelineConfig)} - {"gbt"}
_GBT_KEYS = {f.name for f in fields(GbtConfig)} - {"seed"}
_EMB_KEYS = {"embedding_" + f.name for f in fields(EmbeddingTrainConfig)} - {"embedding_seed"}
_RUN_KEYS = {"train", "valid", "test", "dataset", "workdir", "family", "deterministic",
             "validation_subset"}
CONFIG_KEYS = frozenset(_PIPE_KEYS | _GBT_KEYS | _EMB_KEYS | _RUN_KEYS)


class CliError(Exception):
    pass


class RunConfig:
    """Flat key/value run configuration split into the typed sub-configs."""

    def __init__(self, values: Optional[dict] = None):
        values = dict(values or {})
        unknown = sorted(set(values) - CONFIG_KEYS)
        if unknown:
            raise CliError(f"unknown config key(s): {', '.join(unknown)}")
        family = values.get("family")
        if family is not None:
            if family not in FAMILY_DEFAULTS:
                raise CliError(f"unknown family {family!r}; choose from {sorted(FAMILY_DEFAULTS)}")
            preset = FAMILY_DEFAULTS[family]
            defaults = {"negatives": preset["negatives"],
                        "num_estimators": preset["num_estimators"],
                        "max_depth": preset["max_depth"],
                        "learning_rate": preset["learning_rate"],
                        "embedding_dim": preset["dim"], "embedding_gamma": preset["gamma"]}
            values = {**defaults, **values}
        self.values = values

    @classmethod
    def from_file(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise CliError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})")
        if not isinstance(data, dict):
            raise CliError(f"{path}: config must be a JSON object")
        return cls(data)

    def set(self, key: str, value) -> None:
        if value is not None:
            self.values[key] = value

    @property
    def seed(self) -> int:
        return int(self.values.get("seed", 0))

    def pipeline(self) -> PipelineConfig:
        gbt = {k: self.values[k] for k in _GBT_KEYS if k in self.values}
        pipe = {k: self.values[k] for k in _PIPE_KEYS if k in self.values}
        try:
            return PipelineConfig(gbt=GbtConfig(seed=self.seed, **gbt), **pipe)
        except (TypeError, ValueError) as e:
            raise CliError(f"invalid pipeline config: {e}")

    def embedding(self) -> EmbeddingTrainConfig:
        emb = {k[len("embedding_"):]: self.values[k] for k in _EMB_KEYS if k in self.values}
        try:
            return EmbeddingTrainConfig(seed=self.seed, **emb)
        except (TypeError, ValueError) as e:
            raise CliError(f"invalid embedding config: {e}")

    def dataset_paths(self) -> List[str]:
        v = self.values
        if "dataset" in v:
            return [os.path.join(v["dataset"], f"{s}.txt") for s in ("train", "valid", "test")]
        missing = [s for s in ("train", "valid", "test") if s not in v]
        if missing:
            raise CliError(f"config needs 'dataset' or all of train/valid/test (missing {missing})")
        return [v["train"], v["valid"], v["test"]]


class Workdir:
    def __init__(self, root: str):
        self.root = root
        self._lock: Optional[FileLock] = None

    def path(self, *parts: str) -> str:
        return os.path.join(self.root, *parts)

    def __enter__(self) -> "Workdir":
        os.makedirs(self.root, exist_ok=True)
        tag = self.path("SCHEMA")
        if os.path.exists(tag):
            with open(tag, encoding="utf-8") as f:
                if f.read() != SCHEMA_TAG:
                    raise CliError(f"{self.root}: unsupported working-directory schema; "
                                   "rerun 'prepare' in a fresh directory")
        else:
            stale = [n for n in os.listdir(self.root) if n != ".lock"]
            if stale:
                raise CliError(f"{self.root}: not a linkboost working directory (no SCHEMA tag)")
            with open(tag, "w", encoding="utf-8") as f:
                f.write(SCHEMA_TAG)
        self._lock = FileLock(self.path(".lock"))
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            raise CliError(f"{self.root}: working directory is locked by another run")
        return self

    def __exit__(self, *exc) -> None:
        if self._lock is not None:
            self._lock.release()

    def require(self, *parts: str, hint: str) -> str:
        p = self.path(*parts)
        if not os.path.exists(p):
            raise CliError(f"missing {p}; run '{hint}' first")
        return p


def _write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def _write_pairs(path: str, pair_sets: Dict[int, PairSet]) -> None:
    lines = [f"{r}\t{h}\t{t}\n" for r in sorted(pair_sets) for h, t in pair_sets[r].array.tolist()]
    _write_text(path, "".join(lines))


def _read_pairs(path: str, num_slots: int) -> Dict[int, PairSet]:
    buckets: Dict[int, list] = {r: [] for r in range(num_slots)}
    with open(path, encoding="utf-8") as f:
        for line in f:
            r, h, t = map(int, line.split("\t"))
            buckets[r].append((h, t))
    return {r: PairSet(r, frozenset(p)) for r, p in buckets.items()}


def _load_prepared(wd: Workdir, config: PipelineConfig) -> PreparedKG:
    store = load_store(wd.require("data", hint="prepare"))
    slots = 2 * store.num_relations
    positives = _read_pairs(wd.require("analysis", "positives.tsv", hint="prepare"), slots)
    profiles = load_profiles(wd.require("analysis", "profiles.jsonl", hint="prepare"))
    links = []
    with open(wd.require("analysis", "subrelations.tsv", hint="prepare")) as f:
        for line in f:
            a, b = line.split("\t")
            links.append((int(a), int(b)))
    floor = next(iter(profiles.values())).cooc.floor if profiles else 0
    if config.use_rcwc and config.delta_rcwc < floor:
        raise CliError(f"delta_rcwc={config.delta_rcwc} is below the prepared co-occurrence "
                       f"floor {floor}; rerun 'prepare'")
    return PreparedKG(store, {}, links, positives, profiles)


def _ensemble_path(wd: Workdir, rel: int, suffix: str) -> str:
    return wd.path("classifiers", f"rel_{rel:04d}.{suffix}")


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args, run: RunConfig, wd: Workdir) -> int:
    config = run.pipeline()
    train, valid, test = run.dataset_paths()
    store = load_dataset(train, valid, test)
    prepared = prepare(store, config)
    save_store(store, wd.path("data"))
    os.makedirs(wd.path("analysis"), exist_ok=True)
    _write_pairs(wd.path("analysis", "positives.tsv"), prepared.positives)
    _write_text(wd.path("analysis", "subrelations.tsv"),
                "".join(f"{a}\t{b}\n" for a, b in prepared.links))
    floor = config.delta_rcwc if np.isfinite(config.delta_rcwc) else 0
    save_profiles(prepared.profiles, wd.path("analysis", "profiles.jsonl"), floor)
    s = store.stats()
    summary = (f"{'Dataset':<12}{'#Ent':>10}{'#Rel':>8}{'#Train':>10}{'#Valid':>9}{'#Test':>9}\n"
               f"{os.path.basename(os.path.dirname(os.path.abspath(train))) or '-':<12}"
               f"{s['entities']:>10}{s['relations']:>8}{s['train']:>10}{s['valid']:>9}"
               f"{s['test']:>9}\n"
               f"relations: {s['relations']} forward, {2 * s['relations']} with inverses\n"
               f"subrelation links: {len(prepared.links)}\n")
    _write_text(wd.path("analysis", "summary.txt"), summary)
    manifest = {"config": run.values, "seed": run.seed,
                "inputs": {p: file_sha256(p) for p in (train, valid, test)}}
    _write_text(wd.path("analysis", "manifest.json"),
                json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    sys.stdout.write(summary)
    return 0


def cmd_train_embeddings(args, run: RunConfig, wd: Workdir) -> int:
    run.set("embedding_kind", args.kind)
    run.set("embedding_dim", args.dim)
    run.set("embedding_steps", args.steps)
    config = run.embedding()
    store = load_store(wd.require("data", hint="prepare"))
    os.makedirs(wd.path("embedding"), exist_ok=True)
    model_path = wd.path("embedding", "model.bin")
    if args.resume and os.path.exists(model_path + ".ckpt.json"):
        trainer = EmbeddingTrainer.resume(store, config, model_path)
        logger.info("resuming embedding training at step %d", trainer.step)
    else:
        trainer = EmbeddingTrainer(store, config)
    subset = int(run.values.get("validation_subset", 200))

    def on_log(tr: EmbeddingTrainer, loss: float) -> None:
        tr.save_checkpoint(model_path)
        if len(store.valid) and subset > 0:
            rep = evaluate(store, embedding_scorers(tr.model, 2 * store.num_relations),
                           "valid", subset)
            logger.info("step %d  validation MRR %.4f (first %d valid triples)",
                        tr.step, rep.mrr, min(subset, len(store.valid)))

    trainer.run(callback=on_log)
    trainer.save_checkpoint(model_path)
    print(f"embedding model written to {model_path} (step {trainer.step})")
    return 0


def cmd_train_classifiers(args, run: RunConfig, wd: Workdir) -> int:
    config = run.pipeline()
    prepared = _load_prepared(wd, config)
    model = load_model(wd.require("embedding", "model.bin", hint="train-embeddings"))
    if model.num_entities != prepared.store.num_entities:
        raise CliError("embedding model does not match the prepared dataset")
    os.makedirs(wd.path("classifiers"), exist_ok=True)
    slots = 2 * prepared.store.num_relations
    todo = [r for r in range(slots) if not (os.path.exists(_ensemble_path(wd, r, "gbt"))
                                            or os.path.exists(_ensemble_path(wd, r, "fallback")))]
    skipped = slots - len(todo)

    def on_done(rel: int, ens) -> None:
        n = len(prepared.positives[rel])
        if ens is None:
            _write_text(_ensemble_path(wd, rel, "fallback"),
                        f"{n} positives < min_positives {config.min_positives}\n")
            logger.info("relation %d/%d: fallback (%d positives)", rel + 1, slots, n)
        else:
            _write_text(_ensemble_path(wd, rel, "gbt"), dumps_ensemble(ens, rel))
            logger.info("relation %d/%d: %d trees on %d positives", rel + 1, slots, len(ens), n)

    train_all(prepared, model, config, todo, on_done)
    done = len(todo)
    print(f"{slots} classifier slots: {done} trained now, {skipped} already present")
    return 0


def _scorers(wd: Workdir, prepared: PreparedKG, model, config: PipelineConfig):
    ent32 = model.entity.astype(np.float32)
    out = {}
    for rel in range(2 * prepared.store.num_relations):
        gbt_path = _ensemble_path(wd, rel, "gbt")
        ens = None
        if os.path.exists(gbt_path):
            with open(gbt_path, encoding="utf-8") as f:
                _, ens = loads_ensemble(f.read())
        elif not os.path.exists(_ensemble_path(wd, rel, "fallback")):
            raise CliError(f"no classifier for relation {rel}; run 'train-classifiers' first")
        out[rel] = RelationScorer(rel, model, ens, prepared.profiles[rel], config.delta_lcw,
                                  config.use_lcwa, ent32)
    return out


def cmd_evaluate(args, run: RunConfig, wd: Workdir) -> int:
    config = run.pipeline()
    model_path = wd.require("embedding", "model.bin", hint="train-embeddings")
    model = load_model(model_path)
    if args.ablate:
        bad = [a for a in args.ablate if a not in ABLATIONS]
        if bad:
            raise CliError(f"unknown ablation {bad[0]!r}; choose from {', '.join(ABLATIONS)}")
        store = load_store(wd.require("data", hint="prepare"))
        report = ablation_run(store, model, config, args.ablate, args.split, args.subset)
        name = "ablate-" + "+".join(sorted(args.ablate))
    else:
        prepared = _load_prepared(wd, config)
        store = prepared.store
        report = evaluate(store, _scorers(wd, prepared, model, config), args.split, args.subset)
        name = "full"
    name = f"{name}-{args.split}" + (f"-first{args.subset}" if args.subset else "")
    inputs = {os.path.relpath(model_path, wd.root): file_sha256(model_path)}
    for p in sorted(os.listdir(wd.path("data"))):
        inputs[f"data/{p}"] = file_sha256(wd.path("data", p))
    manifest = {"config": run.values, "pipeline": config.to_dict(), "seed": run.seed,
                "deterministic": bool(run.values.get("deterministic", False)),
                "split": args.split, "subset": args.subset, "ablate": sorted(args.ablate or []),
                "inputs": inputs}
    out_dir = wd.path("reports", name)
    write_report(report, out_dir, manifest)
    sys.stdout.write(report.to_table())
    print(f"report written to {out_dir}")
    return 0


def cmd_predict(args, run: RunConfig, wd: Workdir) -> int:
    config = run.pipeline()
    if args.k < 1:
        raise CliError("k must be >= 1")
    prepared = _load_prepared(wd, config)
    store = prepared.store
    if args.head not in store.entity_index:
        raise CliError(f"unknown entity {args.head!r}")
    if args.relation not in store.relation_index:
        raise CliError(f"unknown relation {args.relation!r}")
    rel = store.relation_index[args.relation] + (store.num_relations if args.inverse else 0)
    model = load_model(wd.require("embedding", "model.bin", hint="train-embeddings"))
    scorer = _scorers(wd, prepared, model, config)[rel]
    scores = scorer(store.entity_index[args.head])
    order = np.lexsort((np.arange(len(scores)), -scores))[:args.k]
    out = sys.stdout
    for t in order.tolist():
        out.write(f"{store.entities[t]}\t{scores[t]:.8g}\n")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="linkboost",
                                description="Per-relation boosted-tree link prediction.")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--workdir", help="working directory (overrides config)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--threads", type=int, help="relation-level worker threads")
    p.add_argument("--deterministic", action="store_true",
                   help="single worker thread; identical inputs give identical outputs")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("prepare", help="load the dataset and compute relation priors")

    e = sub.add_parser("train-embeddings", help="train the entity/relation embedding")
    e.add_argument("--kind", choices=("translational", "rotational"))
    e.add_argument("--dim", type=int)
    e.add_argument("--steps", type=int)
    e.add_argument("--resume", action="store_true", help="continue from the last checkpoint")

    sub.add_parser("train-classifiers", help="train one ensemble per relation slot")

    v = sub.add_parser("evaluate", help="filtered ranking metrics")
    v.add_argument("--ablate", action="append", metavar="MODULE",
                   help=f"bypass a module ({', '.join(ABLATIONS)}); repeatable")
    v.add_argument("--subset", type=int, help="only the first N triples of the split")
    v.add_argument("--split", default="test", choices=("valid", "test"))

    q = sub.add_parser("predict", help="top-k tails for (head, relation, ?)")
    q.add_argument("head")
    q.add_argument("relation")
    q.add_argument("k", type=int)
    q.add_argument("--inverse", action="store_true", help="query the inverse relation")
    return p


COMMANDS = {
    "prepare": cmd_prepare,
    "train-embeddings": cmd_train_embeddings,
    "train-classifiers": cmd_train_classifiers,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        run = RunConfig.from_file(args.config)
        run.set("seed", args.seed)
        run.set("threads", args.threads)
        if args.deterministic:
            run.set("deterministic", True)
            run.set("threads", 1)
        workdir = args.workdir or run.values.get("workdir")
        if not workdir:
            raise CliError("no working directory (use --workdir or 'workdir' in the config)")
        with Workdir(workdir) as wd:
            return COMMANDS[args.command](args, run, wd)
    except (CliError, DatasetError, DivergenceError, NonFiniteMarginError) as e:
        msg = str(e)
    except (OSError, ValueError, KeyError) as e:
        msg = f"{type(e).__name__}: {e}"
    print(f"linkboost: error: {msg.splitlines()[0] if msg else 'failed'}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
