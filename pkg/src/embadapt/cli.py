"""Command-line entry point: embed, train, transform, evaluate, search."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .adapter import load_checkpoint, save_checkpoint, transform
from .config import GAIN_MODES, LOSS_VARIANTS, TrainConfig
from .data import EmbeddingTable, split_train_val, validate_dataset
from .errors import EmbAdaptError
from .evaluation import evaluate, rank_candidates, score_all
from .io import (
    EncoderEndpointConfig,
    fetch_embeddings,
    load_jsonl_items,
    load_qrels_tsv,
    read_embeddings,
    write_embeddings,
)
from .trainer import train


def _atomic_write(path: str, writer) -> None:
    """Run writer(tmp_path) then rename; never leaves a partial file behind."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embadapt",
        description="Train and apply residual adapters on frozen text embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_embed = sub.add_parser("embed", help="fetch embeddings from a remote encoder")
    p_embed.add_argument("--items", required=True, help="items .jsonl file")
    p_embed.add_argument("--endpoint-config", required=True, help="endpoint config JSON")
    p_embed.add_argument("--out", required=True, help="output .sadp file")

    p_train = sub.add_parser("train", help="train an adapter on qrels")
    p_train.add_argument("--queries", required=True, help="query embeddings .sadp")
    p_train.add_argument("--corpus", required=True, help="corpus embeddings .sadp")
    p_train.add_argument("--qrels", required=True, help="relevance judgments .tsv")
    p_train.add_argument("--out", required=True, help="output checkpoint path")
    p_train.add_argument("--log", help="training log JSONL (default: <out>.log.jsonl)")
    p_train.add_argument("--config", help="TrainConfig JSON file; flags override it")
    p_train.add_argument("--val-ratio", type=float, default=0.8,
                         help="train fraction of the query split (default 0.8)")
    p_train.add_argument("--alpha", type=float)
    p_train.add_argument("--beta", type=float)
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--max-iters", type=int)
    p_train.add_argument("--patience", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--neg-ratio", type=int)
    p_train.add_argument("--hidden", type=int)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--eval-every", type=int)
    p_train.add_argument("--loss-variant", choices=LOSS_VARIANTS)
    p_train.add_argument("--no-skip", action="store_true")
    p_train.add_argument("--separate-adapters", action="store_true")
    p_train.add_argument("--gain", choices=GAIN_MODES)

    p_tf = sub.add_parser("transform", help="apply a checkpoint to an embedding file")
    p_tf.add_argument("--in", dest="infile", required=True)
    p_tf.add_argument("--model", required=True)
    p_tf.add_argument("--which", choices=("query", "corpus"), default="query")
    p_tf.add_argument("--out", required=True)
    p_tf.add_argument("--force", action="store_true")

    p_eval = sub.add_parser("evaluate", help="compute nDCG@k against qrels")
    p_eval.add_argument("--queries", required=True)
    p_eval.add_argument("--corpus", required=True)
    p_eval.add_argument("--qrels", required=True)
    p_eval.add_argument("--model")
    p_eval.add_argument("--k", type=int, default=10)
    p_eval.add_argument("--gain", choices=GAIN_MODES, default="standard")
    p_eval.add_argument("--json", action="store_true", help="emit machine-readable JSON")
    p_eval.add_argument("--per-query", help="write per-query nDCG TSV here")
    p_eval.add_argument("--force", action="store_true")

    p_search = sub.add_parser("search", help="top-k corpus matches for one query")
    p_search.add_argument("--corpus", required=True)
    p_search.add_argument("--model")
    p_search.add_argument("--k", type=int, default=10)
    p_search.add_argument("--vector", help="comma-separated query vector")
    p_search.add_argument("--text", help="query text (requires --endpoint-config)")
    p_search.add_argument("--endpoint-config")
    p_search.add_argument("--force", action="store_true")
    return parser


def cmd_embed(args) -> int:
    items = load_jsonl_items(args.items)
    cfg = EncoderEndpointConfig.from_json_file(args.endpoint_config)
    table = fetch_embeddings(list(items), cfg)
    _atomic_write(args.out, lambda tmp: write_embeddings(table, tmp))
    print(f"wrote {len(table)} embeddings dim={table.dim} "
          f"encoder_tag={table.encoder_tag!r} -> {args.out}")
    return 0


def _effective_config(args) -> TrainConfig:
    base: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            base = json.load(f)
    flag_map = {
        "alpha": args.alpha,
        "beta": args.beta,
        "batch_size": args.batch_size,
        "max_iterations": args.max_iters,
        "patience": args.patience,
        "learning_rate": args.lr,
        "neg_subsample_ratio": args.neg_ratio,
        "hidden": args.hidden,
        "seed": args.seed,
        "eval_every": args.eval_every,
        "loss_variant": args.loss_variant,
        "gain": args.gain,
    }
    for key, value in flag_map.items():
        if value is not None:
            base[key] = value
    if args.no_skip:
        base["use_skip"] = False
    if args.separate_adapters:
        base["separate_adapters"] = True
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    q_table = read_embeddings(args.queries)
    c_table = read_embeddings(args.corpus)
    rels = load_qrels_tsv(args.qrels)

    dangling = [
        (qid, cid)
        for qid, cid, _ in rels.triplets
        if qid not in q_table or cid not in c_table
    ]
    if dangling:
        raise EmbAdaptError(
            f"{len(dangling)} qrels rows reference missing embeddings, "
            f"first: {dangling[0]}"
        )

    train_rels, val_rels = split_train_val(rels, args.val_ratio, cfg.seed)
    model, report = train(q_table, c_table, train_rels, val_rels, cfg)

    log_path = args.log or args.out + ".log.jsonl"
    _atomic_write(args.out, lambda tmp: save_checkpoint(model, tmp))
    _atomic_write(log_path, lambda tmp: Path(tmp).write_text(report.to_jsonl()))

    zero_shot = report.entries[0].val_ndcg
    print(f"effective config: {json.dumps(cfg.to_dict(), sort_keys=True)}")
    print(f"zero-shot validation nDCG@10: {zero_shot:.5f}")
    print(f"best validation nDCG@10: {report.best_val_ndcg:.5f} "
          f"at iteration {report.best_iteration} ({report.stop_reason})")
    print(f"checkpoint -> {args.out}")
    print(f"training log -> {log_path}")
    return 0


def cmd_transform(args) -> int:
    table = read_embeddings(args.infile)
    model = load_checkpoint(args.model)
    model.check_tag(table, args.force)
    adapted = transform(model, table.vectors, args.which)
    out_table = EmbeddingTable(table.ids, adapted, table.encoder_tag)
    _atomic_write(args.out, lambda tmp: write_embeddings(out_table, tmp))
    print(f"wrote {len(out_table)} adapted ({args.which}) embeddings -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    q_table = read_embeddings(args.queries)
    c_table = read_embeddings(args.corpus)
    rels = load_qrels_tsv(args.qrels)
    model = load_checkpoint(args.model) if args.model else None
    report = evaluate(q_table, c_table, rels, model, k=args.k,
                      gain=args.gain, force=args.force)
    if args.per_query:
        lines = [f"{qid}\t{v:.6f}" for qid, v in sorted(report.per_query_ndcg.items())]
        _atomic_write(args.per_query, lambda tmp: Path(tmp).write_text("\n".join(lines) + "\n"))
    print(report.to_json() if args.json else report.to_text())
    return 0


def cmd_search(args) -> int:
    c_table = read_embeddings(args.corpus)
    model = load_checkpoint(args.model) if args.model else None
    if (args.vector is None) == (args.text is None):
        raise EmbAdaptError("search requires exactly one of --vector or --text")
    if args.vector is not None:
        query = np.array([float(x) for x in args.vector.split(",")], dtype=np.float32)
    else:
        if not args.endpoint_config:
            raise EmbAdaptError("--text requires --endpoint-config")
        cfg = EncoderEndpointConfig.from_json_file(args.endpoint_config)
        from .data import TextItem

        query = fetch_embeddings([TextItem(id="q", text=args.text)], cfg).vector("q")
    if query.shape[0] != c_table.dim:
        raise EmbAdaptError(
            f"query dim {query.shape[0]} does not match corpus dim {c_table.dim}"
        )
    q_table = EmbeddingTable(["q"], query[None, :], c_table.encoder_tag)
    scores = score_all(q_table, c_table, model, force=args.force)
    for cid, score in rank_candidates(c_table.ids, scores[0], args.k):
        print(f"{cid}\t{score:.6f}")
    return 0


_COMMANDS = {
    "embed": cmd_embed,
    "train": cmd_train,
    "transform": cmd_transform,
    "evaluate": cmd_evaluate,
    "search": cmd_search,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (EmbAdaptError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
