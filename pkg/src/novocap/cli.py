"""Command-line surface: train, expand, caption, eval, genworld, gradcheck.

Configuration precedence is command-line flag > --config file entry >
built-in default. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric
failure; every failure prints a single-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .captioner import TrainConfig, corpus_log_priors, gradient_audit, train
from .cbs import caption_image
from .checkpoint import load_checkpoint, save_checkpoint
from .converter import BIAS_POLICIES, expand_vocabulary
from .errors import DataError, NumericError, UsageError
from .features import (
    STATUS_KNOWN,
    STATUS_NOVEL,
    ingest_dataset_file,
    ingest_feature_file,
)
from .metrics import evaluate, write_report
from .microworld import WorldConfig, generate, write_world
from .model import ModelConfig, assembled_tables, init_model
from .vocab import build_vocabulary

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage errors to 1
        raise UsageError(message)


def _load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        with open(p, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc.msg}")
    if not isinstance(obj, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    return obj


def _resolve(args, file_cfg, key, default):
    """flag > config file > default; flags use None as the unset sentinel."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in file_cfg:
        return file_cfg[key]
    return default


def _onoff(value: str) -> bool:
    if value in ("on", "off"):
        return value == "on"
    raise UsageError(f"expected on|off, got {value!r}")


def cmd_genworld(args) -> int:
    cfg_file = _load_config_file(args.config)
    cfg = WorldConfig(
        seed=int(_resolve(args, cfg_file, "seed", 0)),
        d_v=int(_resolve(args, cfg_file, "d_v", 32)),
        noise=float(_resolve(args, cfg_file, "noise", 0.1)),
        train_images=int(_resolve(args, cfg_file, "train_images", 2000)),
        val_images=int(_resolve(args, cfg_file, "val_images", 200)),
        test_images=int(_resolve(args, cfg_file, "test_images", 400)),
    )
    world = generate(cfg)
    write_world(world, args.out)
    print(
        f"world written to {args.out}: {len(world.train)} train / "
        f"{len(world.val)} val / {len(world.test)} test images, "
        f"{len(world.known)} known + {len(world.novel)} novel categories"
    )
    return 0


def cmd_train(args) -> int:
    cfg_file = _load_config_file(args.config)
    dataset = ingest_dataset_file(args.dataset)
    val = ingest_dataset_file(args.val) if args.val else None
    categories = ingest_feature_file(args.features, status=STATUS_KNOWN)

    d_v = categories[0].prototype.shape[0]
    if dataset[0].feature.shape[0] != d_v:
        raise DataError(
            f"dataset feature dimension {dataset[0].feature.shape[0]} != category dimension {d_v}"
        )
    model_cfg = ModelConfig(
        d_v=d_v,
        d1=int(_resolve(args, cfg_file, "d1", 64)),
        d2=int(_resolve(args, cfg_file, "hidden", 64)),
        bias_policy=str(_resolve(args, cfg_file, "bias_policy", "offset")),
        novel_bias_delta=float(_resolve(args, cfg_file, "delta", 2.0)),
    )
    captions = [c for rec in dataset for c in rec.captions]
    vocab = build_vocabulary(
        captions, categories, min_count=int(_resolve(args, cfg_file, "min_count", 1))
    )
    seed = int(_resolve(args, cfg_file, "seed", 0))
    model = init_model(
        vocab, categories, model_cfg, seed=seed,
        log_priors=corpus_log_priors(vocab, captions),
    )
    train_cfg = TrainConfig(
        learning_rate=float(_resolve(args, cfg_file, "learning_rate", 1e-3)),
        epochs=int(_resolve(args, cfg_file, "epochs", 30)),
        batch_size=int(_resolve(args, cfg_file, "batch_size", 32)),
        seed=seed,
    )
    model, curve = train(model, dataset, train_cfg, val=val)

    out = Path(args.out)
    save_checkpoint(
        model,
        out,
        extra={"trained_on": Path(args.dataset).name, "epochs": train_cfg.epochs, "seed": seed},
    )
    curve_path = Path(args.curve) if args.curve else out.with_suffix(".loss.csv")
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss" + (",val_loss\n" if val is not None else "\n"))
        for epoch, train_loss, val_loss in curve:
            row = f"{epoch},{train_loss!r}"
            if val is not None:
                row += f",{val_loss!r}"
            fh.write(row + "\n")
    if not args.no_figures:
        from .reports import render_loss_curve

        render_loss_curve(curve, curve_path.with_suffix(".png"))
    print(f"checkpoint written to {out}; final train loss {curve[-1][1]:.4f}")
    return 0


def cmd_expand(args) -> int:
    model = load_checkpoint(args.checkpoint)
    new_categories = ingest_feature_file(args.features, status=STATUS_NOVEL)
    if args.bias_policy is not None or args.delta is not None:
        policy = args.bias_policy or model.config.bias_policy
        if policy not in BIAS_POLICIES:
            raise UsageError(f"bias policy must be one of {BIAS_POLICIES}")
        model = dataclasses.replace(
            model,
            config=dataclasses.replace(
                model.config,
                bias_policy=policy,
                novel_bias_delta=float(args.delta) if args.delta is not None else model.config.novel_bias_delta,
            ),
        )
    expanded = expand_vocabulary(model, new_categories)
    save_checkpoint(expanded, args.out, extra={"expanded_from": Path(args.checkpoint).name})
    old_v = len(model.vocab)
    print(f"vocabulary expanded: {old_v} -> {len(expanded.vocab)} tokens")
    for row, name, number in expanded.vocab.category_rows():
        if row >= old_v:
            surface = expanded.vocab.surface(row)
            print(f"  token {row}: {surface!r} ({name}, {'plural' if number == 'p' else 'singular'})")
    return 0


def cmd_caption(args) -> int:
    cfg_file = _load_config_file(args.config)
    model = load_checkpoint(args.checkpoint)
    dataset = ingest_dataset_file(args.dataset)
    beam_size = int(_resolve(args, cfg_file, "beam_size", 5))
    max_len = int(_resolve(args, cfg_file, "max_len", 20))
    constraints_on = _onoff(str(_resolve(args, cfg_file, "constraints", "on")))
    article_fix = _onoff(str(_resolve(args, cfg_file, "article_fix", "on")))
    tables = assembled_tables(model)

    results = []
    for rec in sorted(dataset, key=lambda r: r.image_id):
        results.append(
            caption_image(
                model,
                rec,
                beam_size=beam_size,
                max_len=max_len,
                constraints_on=constraints_on,
                article_fix=article_fix,
                tables=tables,
            )
        )
    with open(args.out, "w", encoding="utf-8") as fh:
        for res in results:
            satisfied = ",".join(str(g) for g in res.satisfied) or "-"
            fh.write(f"{res.image_id}\t{res.text}\t{res.logprob!r}\t{satisfied}\n")
    print(f"{len(results)} captions written to {args.out}")
    return 0


def read_outputs_file(path):
    out = []
    p = Path(path)
    if not p.exists():
        raise DataError(f"outputs file not found: {p}")
    with open(p, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise DataError(f"{p}:{lineno}: expected tab-separated image_id and caption")
            out.append((parts[0], parts[1]))
    if not out:
        raise DataError(f"{p}: no captions")
    return out


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = ingest_dataset_file(args.dataset)
    outputs = read_outputs_file(args.outputs)
    known_names = {c.name for c in model.categories if c.status == STATUS_KNOWN}
    novel_ids = {
        rec.image_id
        for rec in dataset
        if any(name not in known_names for name, _ in rec.tags)
    }
    known_ids = {rec.image_id for rec in dataset} - novel_ids
    report = evaluate(outputs, dataset, subsets={"known": known_ids, "novel": novel_ids})
    details = args.details or str(Path(args.report).with_suffix(".details.csv"))
    write_report(report, args.report, details_path=details)
    if not args.no_figures:
        from .reports import render_subset_scores

        render_subset_scores(report, Path(args.report).with_suffix(".png"))
    for name, count, mean in report.subsets:
        print(f"{name},{count},{mean:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    errors = gradient_audit(seeds=args.seeds, tamper_block=args.tamper_block)
    failed = []
    for name in sorted(errors):
        ok = errors[name] < GRADCHECK_TOLERANCE
        print(f"{'PASS' if ok else 'FAIL'} {name}: max relative error {errors[name]:.3e}")
        if not ok:
            failed.append(name)
    if failed:
        raise NumericError(f"gradient check failed for blocks: {', '.join(failed)}")
    print(f"all {len(errors)} parameter blocks pass at {GRADCHECK_TOLERANCE:g}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="novocap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("genworld", help="generate a synthetic micro-world")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--d-v", dest="d_v", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--train-images", dest="train_images", type=int)
    p.add_argument("--val-images", dest="val_images", type=int)
    p.add_argument("--test-images", dest="test_images", type=int)
    p.set_defaults(func=cmd_genworld)

    p = sub.add_parser("train", help="train captioner and converter from scratch")
    p.add_argument("--dataset", required=True)
    p.add_argument("--val")
    p.add_argument("--features", required=True, help="known-category feature file")
    p.add_argument("--out", required=True)
    p.add_argument("--curve", help="loss curve csv path")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--d1", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--min-count", dest="min_count", type=int)
    p.add_argument("--bias-policy", dest="bias_policy", choices=BIAS_POLICIES)
    p.add_argument("--delta", type=float)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("expand", help="add novel categories without retraining")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="novel-category feature file")
    p.add_argument("--out", required=True)
    p.add_argument("--bias-policy", dest="bias_policy", choices=BIAS_POLICIES)
    p.add_argument("--delta", type=float)
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("caption", help="decode captions for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--beam-size", dest="beam_size", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--constraints", choices=["on", "off"])
    p.add_argument("--article-fix", dest="article_fix", choices=["on", "off"])
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="score generated captions with CIDEr-D")
    p.add_argument("--outputs", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--details")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tamper-block", dest="tamper_block", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
