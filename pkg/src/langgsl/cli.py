"""Command line entry point: ``langgsl {synth,clean,train,attack,eval}``.

Settings come from built-in defaults, then ``--config FILE``, then the named
flags (``--seed``, ``--scenario``, ``--jobs``), then dotted overrides such as
``--gslm.lr 0.005``. Every command writes only below ``--out`` and records the
fully resolved configuration there as ``resolved_config.ini``.

Failures print one JSON line ``{"error": <kind>, "message": <text>}`` to
stderr and exit nonzero (2 for usage/config problems, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attack import STRATEGIES, robustness_sweep, rows_to_csv, rows_to_json, summarize
from .cleaning import CACHE_FILENAME, LlmCache, clean_records
from .config import ConfigError, RunConfig, derive_seed
from .data import (DatasetError, SplitMasks, SyntheticConfig, edge_homophily, load_dataset,
                   load_splits, make_synthetic_tag, save_dataset, split_nodes)
from .features import TextFeaturizer, Vocabulary
from .graph import dump_adjacency, load_adjacency, normalize_adjacency
from .gslm import GcnModel, gcn_forward
from .local_model import LocalModel, lm_forward
from .mutual import evaluate, featurize, fit_langgsl

logger = logging.getLogger("langgsl")

RESOLVED_CONFIG = "resolved_config.ini"
_MODEL_ARRAYS = {"lm": ("W1", "b1", "W2", "b2"), "gslm": ("U1", "b1", "U2", "b2")}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(path, model, seed=None, round=None) -> Path:
    """Write ``model`` as an ``.npz`` with a JSON ``header`` (kind, dims, seed, round)."""
    kind = "lm" if isinstance(model, LocalModel) else "gslm"
    names = _MODEL_ARRAYS[kind]
    arrays = {k: getattr(model, k) for k in names}
    header = {"kind": kind, "dims": [int(arrays[names[0]].shape[0]), int(arrays[names[0]].shape[1]),
                                     int(arrays[names[2]].shape[1])],
              "seed": seed, "round": round, "dropout_rate": float(model.dropout_rate),
              "activation": model.activation}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def checkpoint_header(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return json.loads(str(z["header"]))


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        arrays = [z[k] for k in _MODEL_ARRAYS[header["kind"]]]
    cls = LocalModel if header["kind"] == "lm" else GcnModel
    return cls(*arrays, dropout_rate=header["dropout_rate"], activation=header["activation"])


# --- shared plumbing ----------------------------------------------------------

def _split_overrides(extra: list) -> dict:
    """Turn ``['--gslm.lr', '0.1', '--graph.k=5']`` into ``{'gslm.lr': '0.1', 'graph.k': '5'}``."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            key, value = tok[2:], extra[i + 1]
            i += 2
        out[key] = value
    return out


def resolve_config(args, extra: list) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    flags = {}
    if getattr(args, "seed", None) is not None:
        flags["train.seed"] = args.seed
    if getattr(args, "scenario", None):
        flags["train.scenario"] = args.scenario.upper()
    if getattr(args, "jobs", None) is not None:
        flags["attack.jobs"] = args.jobs
    cfg = cfg.updated(flags)
    return cfg.updated(_split_overrides(extra))


def _prepare_out(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_CONFIG).write_text(cfg.to_text())
    return out


def _dataset(args):
    if not args.dataset:
        raise UsageError("--dataset is required")
    return load_dataset(args.dataset)


def _splits(args, g, cfg: RunConfig) -> SplitMasks:
    masks = load_splits(args.dataset)
    if masks is not None:
        if masks.node_count != g.node_count:
            raise DatasetError("splits.json does not match the dataset size")
        return masks
    return split_nodes(g, cfg.split.train_ratio, cfg.split.val_ratio,
                       derive_seed(cfg.train.seed, "split"))


# --- commands -----------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    s = cfg.synth
    syn = SyntheticConfig(s.nodes_per_class, s.num_classes, s.intra_edge_prob, s.inter_edge_prob,
                          s.vocab_size, s.tokens_per_node, s.class_token_skew)
    out = _prepare_out(args, cfg)
    g = make_synthetic_tag(syn, derive_seed(cfg.train.seed, "synth"))
    masks = split_nodes(g, cfg.split.train_ratio, cfg.split.val_ratio,
                        derive_seed(cfg.train.seed, "split"))
    save_dataset(g, out, masks)
    print(json.dumps({"nodes": g.node_count, "edges": g.num_edges,
                      "edge_homophily": edge_homophily(g), "out": str(out)}))
    return 0


def cmd_clean(args, cfg: RunConfig) -> int:
    g = _dataset(args)
    out = _prepare_out(args, cfg)
    cache_path = out / CACHE_FILENAME
    if args.cache:
        # seed the output cache from an existing file; the source is only read
        src = Path(args.cache)
        src = src / CACHE_FILENAME if src.is_dir() else src
        if not src.is_file():
            raise UsageError(f"no cache file at {src}")
        if src.resolve() != cache_path.resolve():
            shutil.copyfile(src, cache_path)
    records = clean_records(list(g.raw_texts), cfg.llm, LlmCache(cache_path), args.offline)
    cleaned = g.with_cleaned_texts([r.as_text() for r in records])
    save_dataset(cleaned, out, load_splits(args.dataset))
    counts = {s: sum(r.source == s for r in records) for s in ("llm", "cache", "passthrough")}
    (out / "cleaning_report.json").write_text(json.dumps(counts, indent=2, sort_keys=True) + "\n")
    print(json.dumps(counts, sort_keys=True))
    return 0


def _summary(state) -> dict:
    best = {"lm_round": state.best_lm_round, "gslm_round": state.best_gslm_round}
    for head, rnd in (("lm", state.best_lm_round), ("gslm", state.best_gslm_round)):
        entry = next(e for e in state.trace if e["round"] == rnd)
        best[head] = entry[head]
    return best


def cmd_train(args, cfg: RunConfig) -> int:
    g = _dataset(args)
    masks = _splits(args, g, cfg)
    out = _prepare_out(args, cfg)
    tc = cfg.train
    X, featurizer = featurize(g, tc)
    A = g.adjacency if tc.scenario == "TR" else None
    state, metrics = fit_langgsl(X, g.labels, masks, A, tc, g.num_classes)
    doc = {"scenario": tc.scenario, "seed": tc.seed, "em_rounds": tc.em_rounds,
           "rounds": metrics.rounds, "best": _summary(state)}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "metrics.csv").write_text(metrics.to_csv())
    (out / "splits.json").write_text(json.dumps(masks.to_dict(), indent=2) + "\n")
    featurizer.save_vocabulary(out / "vocab.tsv")
    save_checkpoint(out / "checkpoints" / "lm.npz", state.best_lm, tc.seed, state.best_lm_round)
    save_checkpoint(out / "checkpoints" / "gslm.npz", state.best_gcn, tc.seed,
                    state.best_gslm_round)
    dump_adjacency(state.best_adjacency, out / "graph_refined.txt")
    print(json.dumps({"best": doc["best"], "out": str(out)}, sort_keys=True))
    return 0


def cmd_attack(args, cfg: RunConfig) -> int:
    g = _dataset(args)
    masks = _splits(args, g, cfg)
    a = cfg.attack
    if a.strategy not in STRATEGIES:
        raise ConfigError(f"attack.strategy must be one of {', '.join(STRATEGIES)}")
    if a.seeds < 1:
        raise ConfigError("attack.seeds must be >= 1")
    if not a.rates or any(not 0.0 <= r <= 1.0 for r in a.rates):
        raise ConfigError("attack.rates must be a nonempty list of values in [0, 1]")
    out = _prepare_out(args, cfg)
    seeds = [derive_seed(cfg.train.seed, "attack_run", i) for i in range(a.seeds)]
    rows = robustness_sweep(g, masks, a.rates, replace(cfg.train, scenario="TR"),
                            strategy=a.strategy, seeds=seeds, jobs=a.jobs)
    (out / "attack_results.csv").write_text(rows_to_csv(rows))
    (out / "attack_results.json").write_text(rows_to_json(rows))
    for s in summarize(rows):
        print(f"{s['strategy']}\t{s['rate']:.3f}\t{s['method']}\t{s['mean']:.4f}\t{s['std']:.4f}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    g = _dataset(args)
    ckpt = Path(args.checkpoint)
    for name in ("vocab.tsv", "checkpoints/lm.npz", "checkpoints/gslm.npz", "graph_refined.txt"):
        if not (ckpt / name).is_file():
            raise UsageError(f"checkpoint directory lacks {name}")
    masks = load_splits(ckpt) or _splits(args, g, cfg)
    featurizer = TextFeaturizer.from_vocabulary(Vocabulary.load(ckpt / "vocab.tsv"),
                                                cfg.train.features.method)
    X = featurizer.transform(g.texts(cfg.train.features.source))
    lm = load_checkpoint(ckpt / "checkpoints" / "lm.npz")
    gcn = load_checkpoint(ckpt / "checkpoints" / "gslm.npz")
    H, q = lm_forward(lm, X)
    A = load_adjacency(ckpt / "graph_refined.txt", g.node_count)
    p = gcn_forward(gcn, normalize_adjacency(A), H)
    idx = getattr(masks, args.split)
    result = {"split": args.split}
    for head, dist in (("lm", q), ("gslm", p)):
        acc, f1 = evaluate(dist, g.labels, idx)
        result[head] = {"accuracy": acc, "f1": f1}
    print(json.dumps(result, sort_keys=True))
    return 0


COMMANDS = {"synth": cmd_synth, "clean": cmd_clean, "train": cmd_train, "attack": cmd_attack,
            "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="langgsl", description="Mutual learning of a text classifier and a graph learner.",
        epilog="Any config key can be overridden as --section.key VALUE (e.g. --gslm.lr 0.005).")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True, out=True):
        p.add_argument("--config", help="config file ([section] key = value)")
        p.add_argument("--seed", type=int, help="root seed (train.seed)")
        if dataset:
            p.add_argument("--dataset", help="dataset directory")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        return p

    common(sub.add_parser("synth", help="generate a planted synthetic dataset"), dataset=False)
    p = common(sub.add_parser("clean", help="clean node texts with an LLM"))
    p.add_argument("--offline", action="store_true", help="never call the service; misses pass through")
    p.add_argument("--cache", help="existing llm_cache.jsonl to start from (read only)")
    p = common(sub.add_parser("train", help="run mutual learning and write metrics"))
    p.add_argument("--scenario", type=str.upper, choices=("TR", "TI"),
                   help="TR uses the dataset's edges, TI infers a graph from embeddings")
    p = common(sub.add_parser("attack", help="robustness sweep under edge perturbations"))
    p.add_argument("--jobs", type=int, help="worker threads for independent cells")
    p = common(sub.add_parser("eval", help="evaluate a train output directory"), out=False)
    p.add_argument("--checkpoint", required=True, help="output directory of a train run")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except UsageError as exc:
        return _fail("UsageError", exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args, extra)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        return _fail(type(exc).__name__, exc, 2)
    except (DatasetError, FileNotFoundError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        logger.debug("unhandled error", exc_info=True)
        return _fail(type(exc).__name__, exc, 1)


if __name__ == "__main__":
    sys.exit(main())
