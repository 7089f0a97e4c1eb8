"""``bookgraph`` command line: ingest, validate, stats, split, train, evaluate,
ablate, recommend and export-embeddings.

Exit codes: 0 success, 1 usage error, 2 data validation failure,
3 leakage-guard failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

import bookgraph
from bookgraph.graph import BookGraph, EntityKind, GraphError, load_graph, read_interactions, validate_graph
from bookgraph.ingest import IngestError, SplitSpec, split_from_indices, split_interactions

log = logging.getLogger("bookgraph")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_LEAKAGE = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "data.dir": None,
    "data.embeddings": None,
    "data.text_dim": 256,
    "model.name": "two_tower",
    "split.train": 0.70,
    "split.valid": 0.15,
    "split.test": 0.15,
    "split.seed": 42,
    "split.file": None,
    "eval.cutoffs": [5, 10, 50],
    "eval.seeds": [0],
    "eval.ablate": ["side", "relations", "interaction"],
    "eval.subsets": ["warm", "cold"],
    "ingest.max_violations": 0,
    "validate.max_violations": 0,
}
NAMESPACES = ("data", "model", "split", "eval", "ingest", "validate")
# array holding one row per book, by model kind
ITEM_EMBEDDINGS = {
    "als": "item_factors",
    "explicit_mf": "Q",
    "hybrid_warp": "item_repr",
    "lightgcn": "item_final",
    "hgnn": "item_final",
    "two_tower": "item_z",
}


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(path: str | None, overrides: list[str], flags: dict) -> dict:
    """Defaults, then the JSON file, then ``--set key=value``, then dedicated flags."""
    cfg = dict(DEFAULT_CONFIG)
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        cfg.update(data)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        cfg[key.strip()] = _parse_value(value)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    for key in cfg:
        if key.split(".", 1)[0] not in NAMESPACES or "." not in key:
            raise UsageError(f"unknown config key {key!r}; keys live under {', '.join(n + '.*' for n in NAMESPACES)}")
    from bookgraph.models import MODEL_NAMES

    if cfg["model.name"] not in MODEL_NAMES:
        raise UsageError(f"unknown model {cfg['model.name']!r}; choose from {', '.join(MODEL_NAMES)}")
    seeds = cfg["eval.seeds"]
    if isinstance(seeds, (int, str)):
        seeds = _parse_seeds(str(seeds))
    if not seeds:
        raise UsageError("eval.seeds must not be empty")
    cfg["eval.seeds"] = [int(s) for s in seeds]
    return dict(sorted(cfg.items()))


def _parse_seeds(raw: str) -> list[int]:
    try:
        return [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"seeds must be comma-separated integers, got {raw!r}") from None


def model_hparams(cfg: dict) -> dict:
    return {k[6:]: v for k, v in cfg.items() if k.startswith("model.") and k != "model.name"}


def digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    import scipy
    import torch

    return {
        "bookgraph": bookgraph.__version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False, default=str) + "\n", encoding="utf-8")


def write_manifest(out: Path, command: str, cfg: dict, seed, inputs: list[Path], outputs: list[Path]) -> None:
    """Everything needed to re-run the command; no timestamps, so reruns are byte-identical."""
    write_json(
        out / f"{command}.manifest.json",
        {
            "command": command,
            "config": cfg,
            "config_digest": digest(cfg),
            "seed": seed,
            "versions": versions(),
            "inputs": {str(p): file_digest(p) for p in inputs if p.is_file()},
            "outputs": sorted(p.name for p in outputs),
        },
    )


# ---------------------------------------------------------------------------
# data access


def _data_dir(cfg: dict) -> Path:
    if not cfg["data.dir"]:
        raise UsageError("no dataset given; pass --data or set data.dir")
    path = Path(cfg["data.dir"])
    if not path.is_dir():
        raise UsageError(f"dataset directory {path} does not exist")
    return path


def load_dataset(cfg: dict):
    path = _data_dir(cfg)
    graph = load_graph(path)
    tsv = path / "interactions.tsv"
    if not tsv.is_file():
        raise UsageError(f"{tsv} not found; run 'bookgraph ingest' first")
    return graph, read_interactions(tsv, graph), path


def load_split(cfg: dict, interactions):
    if cfg["split.file"]:
        path = Path(cfg["split.file"])
        if not path.is_file():
            raise UsageError(f"split file {path} not found")
        data = json.loads(path.read_text(encoding="utf-8"))
        if data.get("n_interactions") != len(interactions):
            raise ValidationFailure(
                f"split file covers {data.get('n_interactions')} interactions, dataset has {len(interactions)}"
            )
        return split_from_indices(interactions, data)
    return split_interactions(interactions, _split_spec(cfg))


def _split_spec(cfg: dict) -> SplitSpec:
    try:
        return SplitSpec(cfg["split.train"], cfg["split.valid"], cfg["split.test"], int(cfg["split.seed"]))
    except ValueError as e:
        raise UsageError(str(e)) from None


def load_feature_set(cfg: dict, graph: BookGraph):
    from bookgraph.features import build_features, load_embeddings

    table = None
    if cfg["data.embeddings"]:
        ids = {b.id: i for i, b in enumerate(graph.books)}
        table = load_embeddings(cfg["data.embeddings"], graph.n_books, ids)
    return build_features(graph, embeddings=table, text_dim=int(cfg["data.text_dim"]))


def _inputs(cfg: dict) -> list[Path]:
    paths = []
    if cfg.get("data.dir"):
        root = Path(cfg["data.dir"])
        paths += sorted(root.glob("entities/*.jsonl")) + sorted(root.glob("edges/*.jsonl")) + [root / "interactions.tsv"]
    for key in ("split.file", "data.embeddings"):
        if cfg.get(key):
            paths.append(Path(cfg[key]))
    return paths


def _fit(cfg: dict, graph, split, features, seed: int):
    from bookgraph.models import make_model

    try:
        model = make_model(cfg["model.name"], graph.n_users, graph.n_books, **model_hparams(cfg))
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    return model.fit(split.train, graph=graph, features=features, valid=split.valid, seed=seed)


def _load_checkpoint(path: str, graph: BookGraph):
    from bookgraph.models.base import load_model

    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    model = load_model(path)
    if (model.n_users, model.n_items) != (graph.n_users, graph.n_books):
        raise ValidationFailure(
            f"checkpoint was trained for {model.n_users} users x {model.n_items} books, "
            f"dataset has {graph.n_users} x {graph.n_books}"
        )
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args, cfg) -> int:
    from bookgraph.ingest import run_ingest

    raw, out = Path(args.raw_dir), Path(args.out_dir)
    if not raw.is_dir():
        raise UsageError(f"raw directory {raw} does not exist")
    result = run_ingest(raw, out)
    report = validate_graph(result.graph)
    summary = {**result.report, "violations": report.counts()}
    write_json(out / "validation.json", {"ok": report.ok, "violations": [f"{v.kind}: {v.detail}" for v in report.violations]})
    cfg = {**cfg, "data.dir": str(out)}
    write_manifest(out, "ingest", cfg, None, sorted(raw.glob("*.jsonl")),
                   [out / "ingest_report.json", out / "interactions.tsv", out / "quarantine.jsonl", out / "validation.json"])
    print(json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False))
    if len(report) > int(cfg["ingest.max_violations"]):
        print(f"{len(report)} integrity violations exceed the limit of {cfg['ingest.max_violations']}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_validate(args, cfg) -> int:
    path = _data_dir(cfg)
    graph = load_graph(path)
    report = validate_graph(graph)
    out = {
        "ok": report.ok,
        "counts": report.counts(),
        "unresolved_references": len(graph.unresolved),
        "violations": [f"{v.kind}: {v.detail}" for v in report.violations[: args.limit]],
    }
    print(json.dumps(out, indent=2, sort_keys=True, ensure_ascii=False))
    return EXIT_OK if len(report) <= int(cfg["validate.max_violations"]) else EXIT_INVALID


def cmd_stats(args, cfg) -> int:
    from bookgraph.analytics import category_engagement, compute_profile, format_profile, jaccard_affinity

    path = _data_dir(cfg)
    graph = load_graph(path)
    profile = compute_profile(graph)
    affinity = jaccard_affinity(graph, args.top_n)
    data = profile.to_dict()
    data["publisher_affinity"] = [
        {"publisher_a": r.publisher_a, "publisher_b": r.publisher_b, "shared": r.shared, "jaccard": r.jaccard}
        for r in affinity
    ]
    data["category_engagement"] = [
        {"category": n, "books": b, "reviews": r} for n, b, r in category_engagement(graph, args.top_n)
    ]
    text = format_profile(profile, affinity)
    if args.out:
        out = Path(args.out)
        write_json(out / "profile.json", data)
        (out / "profile.txt").write_text(text, encoding="utf-8")
        write_manifest(out, "stats", cfg, None, _inputs(cfg), [out / "profile.json", out / "profile.txt"])
    print(text)
    return EXIT_OK


def cmd_split(args, cfg) -> int:
    graph, interactions, _ = load_dataset(cfg)
    spec = _split_spec(cfg)
    split = split_interactions(interactions, spec)
    out = Path(args.out)
    write_json(
        out,
        {
            "spec": {"train": spec.train_frac, "valid": spec.valid_frac, "test": spec.test_frac, "seed": spec.seed},
            "interactions": "interactions.tsv",
            "n_interactions": len(interactions),
            "train": split.train_index.tolist(),
            "valid": split.valid_index.tolist(),
            "test": split.test_index.tolist(),
        },
    )
    write_manifest(out.parent, "split", cfg, spec.seed, _inputs(cfg), [out])
    print(json.dumps(dict(zip(("train", "valid", "test"), split.sizes()))))
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from bookgraph.models.base import save_model

    graph, interactions, _ = load_dataset(cfg)
    split = load_split(cfg, interactions)
    features = load_feature_set(cfg, graph)
    seed = cfg["eval.seeds"][0]
    model = _fit(cfg, graph, split, features, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.bin"
    save_model(model, ckpt, extra={"config_digest": digest(cfg), "text_source": features.text_source})
    write_json(out / "fit_log.json", model.fit_log)
    write_json(out / "effective_config.json", cfg)
    write_manifest(out, "train", cfg, seed, _inputs(cfg),
                   [ckpt, out / "model.bin.json", out / "fit_log.json", out / "effective_config.json"])
    print(json.dumps({"checkpoint": str(ckpt), "model": model.name, "seed": seed}))
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    from bookgraph.eval import EvalProtocol, aggregate_seeds, evaluate_model, format_reports, format_summaries

    graph, interactions, _ = load_dataset(cfg)
    split = load_split(cfg, interactions)
    protocol = EvalProtocol(tuple(cfg["eval.cutoffs"]))
    out = Path(args.out)
    inputs = _inputs(cfg)
    if args.checkpoint:
        model = _load_checkpoint(args.checkpoint, graph)
        report = evaluate_model(model, split, protocol)
        result, text = report.to_dict(), format_reports([report])
        seed = model.seed
        inputs.append(Path(args.checkpoint))
    else:
        features = load_feature_set(cfg, graph)
        reports = [evaluate_model(_fit(cfg, graph, split, features, s), split, protocol, config=cfg)
                   for s in cfg["eval.seeds"]]
        summary = aggregate_seeds(reports)
        result, text = summary.to_dict(), format_reports(reports) + "\n" + format_summaries([summary])
        seed = cfg["eval.seeds"]
    write_json(out / "report.json", result)
    (out / "report.txt").write_text(text, encoding="utf-8")
    write_json(out / "effective_config.json", cfg)
    write_manifest(out, "evaluate", cfg, seed, inputs, [out / "report.json", out / "report.txt", out / "effective_config.json"])
    print(text)
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    from bookgraph.eval import EvalProtocol, format_ablation, run_ablation

    graph, interactions, _ = load_dataset(cfg)
    split = load_split(cfg, interactions)
    features = load_feature_set(cfg, graph)
    seed = cfg["eval.seeds"][0]
    try:
        rows = run_ablation(cfg["model.name"], cfg["eval.ablate"], split, graph, features, model_hparams(cfg),
                            seed=seed, subsets=cfg["eval.subsets"], protocol=EvalProtocol(tuple(cfg["eval.cutoffs"])))
    except (TypeError, ValueError, KeyError) as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    write_json(out / "ablation.json", [
        {"setting": r.setting, "removed": r.removed, "subset": r.subset, "report": r.report.to_dict()} for r in rows
    ])
    text = format_ablation(rows)
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    write_json(out / "effective_config.json", cfg)
    write_manifest(out, "ablate", cfg, seed, _inputs(cfg), [out / "ablation.json", out / "ablation.txt", out / "effective_config.json"])
    print(text)
    return EXIT_OK


def cmd_recommend(args, cfg) -> int:
    graph = load_graph(_data_dir(cfg))
    model = _load_checkpoint(args.checkpoint, graph)
    try:
        user = graph.index_of(EntityKind.USER, args.user)
    except (KeyError, GraphError):
        raise UsageError(f"unknown user id {args.user!r}") from None
    recs = model.rank(user, n=args.n)
    history = [graph.books[b].id for b in model.train_items(user)]
    result = {
        "user": args.user,
        "model": model.name,
        "history": history,
        "recommendations": [
            {"rank": r, "book": graph.books[b].id, "title": graph.books[b].title, "score": s}
            for r, (b, s) in enumerate(recs, 1)
        ],
    }
    if not recs:
        result["note"] = "every book is in this user's training history, so no candidates remain"
    print(json.dumps(result, indent=2, ensure_ascii=False))
    if args.out:
        out = Path(args.out)
        write_json(out / "recommendations.json", result)
        write_manifest(out, "recommend", cfg, model.seed, _inputs(cfg) + [Path(args.checkpoint)], [out / "recommendations.json"])
    return EXIT_OK


def cmd_export_embeddings(args, cfg) -> int:
    from bookgraph.features import write_embeddings

    graph = load_graph(_data_dir(cfg))
    model = _load_checkpoint(args.checkpoint, graph)
    attr = ITEM_EMBEDDINGS.get(model.name)
    if attr is None:
        raise UsageError(f"model {model.name!r} has no book embeddings; use one of {', '.join(sorted(ITEM_EMBEDDINGS))}")
    vectors = np.asarray(getattr(model, attr))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(out, vectors, [b.id for b in graph.books])
    write_manifest(out.parent, "export-embeddings", cfg, model.seed, [Path(args.checkpoint)], [out])
    print(json.dumps({"path": str(out), "books": vectors.shape[0], "dim": vectors.shape[1]}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with flat data.*/model.*/split.*/eval.* keys")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--data", help="dataset directory (data.dir)")
    common.add_argument("--model", help="model name (model.name)")
    common.add_argument("--split", help="split index file (split.file)")
    common.add_argument("--seeds", help="comma-separated seeds (eval.seeds)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="bookgraph", description="Top-N book recommendation benchmark over a heterogeneous book graph.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="normalize raw record files into a graph dataset")
    s.add_argument("raw_dir")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("validate", parents=[common], help="check graph integrity")
    s.add_argument("--limit", type=int, default=50, help="violations to print")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("stats", parents=[common], help="dataset profile tables")
    s.add_argument("--out")
    s.add_argument("--top-n", type=int, default=10)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("split", parents=[common], help="write a train/valid/test index file")
    s.add_argument("--out", required=True, help="split JSON path")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", parents=[common], help="fit one model and save a checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint, or train and evaluate per seed")
    s.add_argument("--checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common], help="full model plus single-signal removals, warm and cold")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("recommend", parents=[common], help="Top-N books for one user")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--user", required=True, help="external user id, e.g. USER000001")
    s.add_argument("-n", type=int, default=10)
    s.add_argument("--out")
    s.set_defaults(func=cmd_recommend)

    s = sub.add_parser("export-embeddings", parents=[common], help="write book embeddings in the embedding file format")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv: list[str] | None = None) -> int:
    from bookgraph.eval import LeakageError
    from bookgraph.features import EmbeddingFileError
    from bookgraph.models.base import ModelFileError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        import torch

        torch.set_num_threads(1)
        flags = {"data.dir": args.data, "model.name": args.model, "split.file": args.split,
                 "eval.seeds": _parse_seeds(args.seeds) if args.seeds else None}
        cfg = load_config(args.config, args.set, flags)
        return args.func(args, cfg)
    except UsageError as e:
        print(f"bookgraph: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except LeakageError as e:
        print(f"bookgraph: leakage guard: {e}", file=sys.stderr)
        return EXIT_LEAKAGE
    except (ValidationFailure, GraphError, IngestError, ModelFileError, EmbeddingFileError) as e:
        print(f"bookgraph: invalid data: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
