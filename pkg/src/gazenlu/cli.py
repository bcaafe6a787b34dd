"""Command-line entry point wiring the pipeline into reproducible runs.

Every command writes its artifacts into a self-describing run directory
named by a short hash of the resolved configuration plus the seed
(override the root with GAZENLU_RUNS or the exact directory with --out).
manifest.json records the full resolved configuration and is the only
artifact allowed to contain timestamps; everything else is byte-stable
under reruns. Exit codes: 0 success, 1 validation or IO failure, 2 usage.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from .augmentor import GAZE, TEXT_ONLY, ModelConfig, JointModel
from .corpus import (DatasetSpec, GazeRecord, TextInstance, load_dataset,
                     load_gaze_corpus, make_synthetic_suite, write_dataset,
                     write_gaze_corpus)
from .diffcore import RngState, checkpoint_hash, load_checkpoint, save_checkpoint
from .evalkit import (ABLATIONS, EvalReport, Experiment, load_reports, metric,
                      metric_fn_for, reports_to_csv, run_ablations,
                      run_crossval, run_lowresource, save_reports,
                      scores_from_logits, sweep_scanpaths)
from .gazegen import SOFT_CONVOLUTION, STRAIGHT_THROUGH, GumbelConfig
from .textenc import TextEncoderConfig, Vocab, build_vocab, tokenize
from .trainkit import (GazeModel, TrainConfig, encode_instances, load_config,
                       predict_instances, pretrain_generator, train_joint)

SUITE_FILE = "suite.json"
MANIFEST = "manifest.json"
MODEL_META = "model.json"
VOCAB_FILE = "vocab.txt"


# -- plumbing ------------------------------------------------------------


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:10]


def _run_dir(args, verb: str, resolved: dict, seed: int) -> str:
    if getattr(args, "out", None):
        path = args.out
    else:
        root = os.environ.get("GAZENLU_RUNS", "runs")
        path = os.path.join(root, f"{verb}-{_config_hash(resolved)}-s{seed}")
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(run_dir: str, verb: str, resolved: dict) -> None:
    _write_json(os.path.join(run_dir, MANIFEST), {
        "verb": verb,
        "resolved_config": resolved,
        "created_unix": time.time(),
        "argv": sys.argv[1:],
    })


def _resolved(args, skip=("out", "func", "verb")) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip or callable(v):
            continue
        out[k] = v
    return out


# -- config (de)serialization --------------------------------------------


def _text_cfg_dict(cfg: TextEncoderConfig) -> dict:
    return dataclasses.asdict(cfg)


def _model_meta(model_cfg: ModelConfig, train_cfg: TrainConfig | None) -> dict:
    meta = {
        "kind": "joint",
        "text": _text_cfg_dict(model_cfg.text),
        "gen_hidden": model_cfg.gen_hidden,
        "l_max": model_cfg.l_max,
        "scan_hidden": model_cfg.scan_hidden,
        "task_kind": model_cfg.task_kind,
        "n_classes": model_cfg.n_classes,
        "share_text_encoder": model_cfg.share_text_encoder,
        "model_kind": model_cfg.model_kind,
        "gumbel": dataclasses.asdict(model_cfg.gumbel),
        "scan_dropout": model_cfg.scan_dropout,
    }
    if train_cfg is not None:
        meta["train"] = dataclasses.asdict(train_cfg)
    return meta


def _model_cfg_from_meta(meta: dict) -> ModelConfig:
    return ModelConfig(
        text=TextEncoderConfig(**meta["text"]),
        gen_hidden=meta["gen_hidden"],
        l_max=meta["l_max"],
        scan_hidden=meta["scan_hidden"],
        task_kind=meta["task_kind"],
        n_classes=meta["n_classes"],
        share_text_encoder=meta["share_text_encoder"],
        model_kind=meta["model_kind"],
        gumbel=GumbelConfig(**meta["gumbel"]),
        scan_dropout=meta["scan_dropout"],
    )


def _spec_from_dict(d: dict) -> DatasetSpec:
    return DatasetSpec(
        name=d["name"], fields=d["fields"], label_kind=d["label_kind"],
        metric_id=d["metric_id"], n_classes=d["n_classes"],
        label_range=tuple(d["label_range"]),
    )


def _load_task(data_dir: str, task: str):
    suite = _read_json(os.path.join(data_dir, SUITE_FILE))
    if task not in suite["tasks"]:
        raise ValueError(f"task {task!r} not in {data_dir}/{SUITE_FILE} "
                         f"(have {sorted(suite['tasks'])})")
    entry = suite["tasks"][task]
    spec = _spec_from_dict(entry["spec"])
    splits = {}
    for split in ("train", "dev", "test"):
        splits[split] = load_dataset(os.path.join(data_dir, entry[split]), spec)
    return spec, splits


def _load_vocab_for(args) -> Vocab:
    return Vocab.load(args.vocab)


def _build_text_cfg(args, vocab: Vocab) -> TextEncoderConfig:
    return TextEncoderConfig(
        vocab_size=len(vocab.token_to_id), d_model=args.d_model,
        n_layers=args.n_layers, n_heads=args.n_heads, d_ff=args.d_ff,
        max_len=args.max_len,
    )


def _train_cfg_from_args(args, parser, require_lr: bool = True) -> TrainConfig:
    flag_map = {
        "lr": args.lr, "batch_size": args.batch_size,
        "max_epochs": args.max_epochs, "patience": args.patience,
        "tau": args.tau, "n_scanpaths_train": args.n_scanpaths,
        "freeze_generator": args.freeze_generator,
        "pretrained_generator": args.pretrained_generator,
        "seed": args.seed, "weight_decay": args.weight_decay,
        "pretrain_lr": args.pretrain_lr,
    }
    overrides = {k: v for k, v in flag_map.items() if v is not None}
    if args.config:
        return load_config(args.config, overrides)
    if "lr" not in overrides:
        if require_lr:
            parser.error("--lr is required when no --config file is given")
        overrides["lr"] = overrides.get("pretrain_lr", TrainConfig(lr=1.0).pretrain_lr)
    return TrainConfig(**overrides)


# -- shared flags --------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--gen-hidden", type=int, default=64)
    p.add_argument("--l-max", type=int, default=32)
    p.add_argument("--scan-hidden", type=int, default=None)
    p.add_argument("--gumbel-mode", choices=[STRAIGHT_THROUGH, SOFT_CONVOLUTION],
                   default=STRAIGHT_THROUGH)
    p.add_argument("--hard-eval", action="store_true")
    p.add_argument("--share-text-encoder", action="store_true")
    p.add_argument("--text-only", action="store_true",
                   help="no-gaze baseline: original-order content tokens")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value training config file")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--n-scanpaths", type=int)
    p.add_argument("--freeze-generator", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--pretrained-generator",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--pretrain-lr", type=float)


def _model_cfg_from_args(args, vocab: Vocab, spec: DatasetSpec | None,
                         tau: float) -> ModelConfig:
    n_classes = spec.n_classes if spec else 2
    task_kind = "classification"
    if spec and spec.label_kind == "real":
        task_kind = "regression"
    return ModelConfig(
        text=_build_text_cfg(args, vocab),
        gen_hidden=args.gen_hidden,
        l_max=args.l_max,
        scan_hidden=args.scan_hidden,
        task_kind=task_kind,
        n_classes=n_classes,
        share_text_encoder=args.share_text_encoder,
        model_kind=TEXT_ONLY if args.text_only else GAZE,
        gumbel=GumbelConfig(temperature=tau, mode=args.gumbel_mode,
                            hard_eval=args.hard_eval),
    )


def _experiment(args, parser):
    """Common setup for train/eval-style verbs: task, vocab, model, config."""
    spec, splits = _load_task(args.data_dir, args.task)
    vocab = _load_vocab_for(args)
    cfg = _train_cfg_from_args(args, parser)
    model_cfg = _model_cfg_from_args(args, vocab, spec, cfg.tau)
    gen_state = None
    if getattr(args, "generator", None):
        gen_state = load_checkpoint(args.generator)
    return spec, splits, vocab, cfg, model_cfg, gen_state


# -- verbs ---------------------------------------------------------------


def cmd_make_synthetic(args, parser) -> int:
    resolved = _resolved(args)
    out = args.out or os.path.join(
        os.environ.get("GAZENLU_RUNS", "runs"),
        f"make-synthetic-{_config_hash(resolved)}-s{args.seed}",
    )
    os.makedirs(out, exist_ok=True)
    suite = make_synthetic_suite(
        args.seed,
        n_gaze_train=args.n_gaze_train, n_gaze_dev=args.n_gaze_dev,
        readers=args.readers,
        n_keyword=tuple(args.n_keyword), n_pairs=tuple(args.n_pairs),
    )
    write_gaze_corpus(os.path.join(out, "gaze_train.tsv"), suite.gaze_train)
    write_gaze_corpus(os.path.join(out, "gaze_dev.tsv"), suite.gaze_dev)
    tasks = {}
    for name, spec, splits in (
        ("keyword", suite.keyword_spec,
         (suite.keyword_train, suite.keyword_dev, suite.keyword_test)),
        ("pairs", suite.pairs_spec,
         (suite.pairs_train, suite.pairs_dev, suite.pairs_test)),
    ):
        entry = {"spec": {
            "name": spec.name, "fields": spec.fields,
            "label_kind": spec.label_kind, "metric_id": spec.metric_id,
            "n_classes": spec.n_classes, "label_range": list(spec.label_range),
        }}
        for split, insts in zip(("train", "dev", "test"), splits):
            fname = f"{name}_{split}.tsv"
            write_dataset(os.path.join(out, fname), spec, insts)
            entry[split] = fname
        tasks[name] = entry
    _write_json(os.path.join(out, SUITE_FILE), {
        "seed": args.seed,
        "gaze": {"train": "gaze_train.tsv", "dev": "gaze_dev.tsv"},
        "tasks": tasks,
    })
    _write_manifest(out, "make-synthetic", resolved)
    print(out)
    return 0


def cmd_build_vocab(args, parser) -> int:
    lines: list[str] = []
    for path in args.corpus or []:
        with open(path, encoding="utf-8") as f:
            lines.extend(line.rstrip("\n") for line in f if line.strip())
    if args.from_synthetic:
        d = args.from_synthetic
        suite = _read_json(os.path.join(d, SUITE_FILE))
        for rec in load_gaze_corpus(os.path.join(d, suite["gaze"]["train"])):
            lines.append(rec.text)
        for rec in load_gaze_corpus(os.path.join(d, suite["gaze"]["dev"])):
            lines.append(rec.text)
        for entry in suite["tasks"].values():
            spec = _spec_from_dict(entry["spec"])
            for split in ("train", "dev", "test"):
                for inst in load_dataset(os.path.join(d, entry[split]), spec):
                    lines.append(inst.text1)
                    if inst.text2 is not None:
                        lines.append(inst.text2)
    if not lines:
        raise ValueError("no corpus text: pass --corpus and/or --from-synthetic")
    vocab = build_vocab(lines, args.vocab_size,
                        max_pieces_per_word=args.max_pieces_per_word)
    vocab.save(args.out)
    print(f"{args.out}: {len(vocab.token_to_id)} tokens")
    return 0


def cmd_pretrain_gaze(args, parser) -> int:
    vocab = _load_vocab_for(args)
    cfg = _train_cfg_from_args(args, parser, require_lr=False)
    train_recs = load_gaze_corpus(args.train)
    dev_recs = load_gaze_corpus(args.dev)
    resolved = _resolved(args)
    resolved["train_config"] = dataclasses.asdict(cfg)
    run_dir = _run_dir(args, "pretrain-gaze", resolved, cfg.seed)

    text_cfg = _build_text_cfg(args, vocab)
    model = GazeModel(text_cfg, gen_hidden=args.gen_hidden, l_max=args.l_max,
                      seed=cfg.seed)
    log_path = os.path.join(run_dir, "log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    state, hist = pretrain_generator(
        model, train_recs, dev_recs, vocab, cfg, log_path=log_path
    )
    save_checkpoint(os.path.join(run_dir, "generator.ckpt"), state)
    vocab.save(os.path.join(run_dir, VOCAB_FILE))
    _write_json(os.path.join(run_dir, MODEL_META), {
        "kind": "gaze_pretrain",
        "text": _text_cfg_dict(text_cfg),
        "gen_hidden": args.gen_hidden,
        "l_max": args.l_max,
        "train": dataclasses.asdict(cfg),
        "best_epoch": hist["best_epoch"],
        "best_dev_nll": hist["best_dev_nll"],
    })
    _write_manifest(run_dir, "pretrain-gaze", resolved)
    print(run_dir)
    return 0


def cmd_train(args, parser) -> int:
    spec, splits, vocab, cfg, model_cfg, gen_state = _experiment(args, parser)
    train_insts, dev_insts = splits["train"], splits["dev"]
    if args.k is not None:
        from .corpus import low_resource_split

        split = low_resource_split(len(train_insts), args.k,
                                   args.data_seed if args.data_seed is not None
                                   else cfg.seed)
        dev_insts = [train_insts[i] for i in split.dev_ids]
        train_insts = [train_insts[i] for i in split.train_ids]
    resolved = _resolved(args)
    resolved["train_config"] = dataclasses.asdict(cfg)
    run_dir = _run_dir(args, "train", resolved, cfg.seed)

    model = JointModel(model_cfg, RngState(cfg.seed, 0).substream("model"))
    log_path = os.path.join(run_dir, "log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    state, hist = train_joint(
        model, train_insts, dev_insts, vocab, cfg,
        metric_fn=metric_fn_for(spec.metric_id),
        generator_state=gen_state, log_path=log_path,
    )
    save_checkpoint(os.path.join(run_dir, "model.ckpt"), state)
    vocab.save(os.path.join(run_dir, VOCAB_FILE))
    meta = _model_meta(model_cfg, cfg)
    meta["task"] = args.task
    meta["best_epoch"] = hist["best_epoch"]
    meta["best_dev_metric"] = hist["best_dev_metric"]
    _write_json(os.path.join(run_dir, MODEL_META), meta)
    _write_manifest(run_dir, "train", resolved)
    print(run_dir)
    return 0


def _load_joint(run_dir: str):
    meta = _read_json(os.path.join(run_dir, MODEL_META))
    if meta.get("kind") != "joint":
        raise ValueError(f"{run_dir}: not a joint-model run directory")
    model_cfg = _model_cfg_from_meta(meta)
    vocab = Vocab.load(os.path.join(run_dir, VOCAB_FILE))
    cfg = TrainConfig(**meta["train"])
    model = JointModel(model_cfg, RngState(cfg.seed, 0).substream("model"))
    ckpt = os.path.join(run_dir, "model.ckpt")
    model.load_state_dict(load_checkpoint(ckpt))
    return model, model_cfg, vocab, cfg, meta, ckpt


def cmd_evaluate(args, parser) -> int:
    model, model_cfg, vocab, cfg, meta, ckpt = _load_joint(args.model)
    spec, splits = _load_task(args.data_dir, args.task)
    insts = splits[args.split]
    n_paths = args.n_scanpaths or cfg.n_scanpaths_train
    hash_before = checkpoint_hash(ckpt)

    encs = encode_instances(insts, vocab, model_cfg.text.max_len)
    ids = [i.instance_id for i in insts]
    logits = predict_instances(
        model, encs, ids, n_paths,
        RngState(cfg.seed, 0).substream("evaluate", args.split),
    )
    labels = np.array([i.label for i in insts])
    report = EvalReport(
        task=spec.name, metric_id=spec.metric_id, values=[], run_labels=[],
        config={"split": args.split, "n_scanpaths": n_paths,
                "model": args.model, "seed": cfg.seed},
    )
    try:
        value = metric(spec.metric_id,
                       scores_from_logits(spec.metric_id, logits), labels)
        report.values.append(value)
        report.run_labels.append(args.split)
    except ValueError as ex:
        report.errors.append(str(ex))
    save_checkpoint_state = checkpoint_hash(ckpt)
    if save_checkpoint_state != hash_before:
        raise RuntimeError("evaluation mutated the model checkpoint")

    resolved = _resolved(args)
    run_dir = _run_dir(args, "evaluate", resolved, cfg.seed)
    save_reports(os.path.join(run_dir, "report.json"), {"evaluate": report})
    _write_manifest(run_dir, "evaluate", resolved)
    if report.values:
        print(f"{spec.metric_id} {report.values[0]:.6f}")
    else:
        print(f"{spec.metric_id} undefined: {report.errors[0]}")
    print(run_dir)
    return 0


def cmd_generate(args, parser) -> int:
    meta = _read_json(os.path.join(args.model, MODEL_META))
    if meta.get("kind") != "gaze_pretrain":
        raise ValueError(f"{args.model}: not a gaze pretraining run directory")
    vocab = Vocab.load(os.path.join(args.model, VOCAB_FILE))
    text_cfg = TextEncoderConfig(**meta["text"])
    model = GazeModel(text_cfg, gen_hidden=meta["gen_hidden"],
                      l_max=meta["l_max"], seed=meta["train"]["seed"])
    model.load_state_dict(load_checkpoint(os.path.join(args.model, "generator.ckpt")))
    model.eval()

    with open(args.input, encoding="utf-8") as f:
        texts = [line.strip() for line in f if line.strip()]
    rng = RngState(args.seed, 0).substream("generate")
    rows = []
    from .diffcore import no_grad
    with no_grad():
        for i, text in enumerate(texts):
            enc = tokenize(text, None, vocab, text_cfg.max_len)
            from .textenc import collate

            batch = collate([enc])
            _, _, words = model.gen_encoder.forward_batch(batch, None)
            ws = model.generator.encode_words_batch(words, batch.word_counts)
            n_words = int(batch.word_counts[0])
            for p in range(args.n_paths):
                sp = model.generator.sample_hard(
                    ws[0, :n_words, :], f"s{i}", rng.substream(f"s{i}", p)
                )
                rows.append({"sentence_id": f"s{i}",
                             "fixations": sp.fixations,
                             "stopped": bool(sp.stopped)})
    with open(args.out, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"{args.out}: {len(rows)} scanpaths")
    return 0


def _driver_common(args, parser):
    spec, splits, vocab, cfg, model_cfg, gen_state = _experiment(args, parser)
    exp = Experiment(spec=spec, vocab=vocab, model_cfg=model_cfg,
                     generator_state=gen_state)
    return exp, splits, cfg


def cmd_crossval(args, parser) -> int:
    exp, splits, cfg = _driver_common(args, parser)
    instances = splits["train"] + splits["dev"] + splits["test"]
    report = run_crossval(exp, instances, cfg, folds=args.folds, jobs=args.jobs)
    resolved = _resolved(args)
    resolved["train_config"] = dataclasses.asdict(cfg)
    run_dir = _run_dir(args, "crossval", resolved, cfg.seed)
    save_reports(os.path.join(run_dir, "report.json"), {"crossval": report})
    _write_manifest(run_dir, "crossval", resolved)
    print(f"{report.metric_id} mean {report.mean:.4f} stderr {report.stderr:.4f} "
          f"over {len(report.values)} folds")
    print(run_dir)
    return 0


def cmd_lowresource(args, parser) -> int:
    exp, splits, cfg = _driver_common(args, parser)
    reports = run_lowresource(
        exp, splits["train"], splits["test"], cfg,
        Ks=args.ks, data_seeds=args.data_seeds, jobs=args.jobs,
    )
    resolved = _resolved(args)
    resolved["train_config"] = dataclasses.asdict(cfg)
    run_dir = _run_dir(args, "lowresource", resolved, cfg.seed)
    save_reports(os.path.join(run_dir, "report.json"), reports)
    _write_manifest(run_dir, "lowresource", resolved)
    for name in sorted(reports):
        r = reports[name]
        print(f"{name}: {r.metric_id} mean {r.mean:.4f} stderr {r.stderr:.4f}")
    print(run_dir)
    return 0


def cmd_sweep(args, parser) -> int:
    exp, splits, cfg = _driver_common(args, parser)
    points = sweep_scanpaths(
        exp, splits["train"], splits["dev"], splits["test"], cfg,
        counts=args.counts, seeds=args.seeds, jobs=args.jobs,
    )
    resolved = _resolved(args)
    resolved["train_config"] = dataclasses.asdict(cfg)
    run_dir = _run_dir(args, "sweep", resolved, cfg.seed)
    save_reports(os.path.join(run_dir, "report.json"), points)
    reports_to_csv(os.path.join(run_dir, "curve.csv"), points)
    _write_manifest(run_dir, "sweep", resolved)
    for count in args.counts:
        r = points[f"n{count}"]
        print(f"n_scanpaths={count}: mean {r.mean:.4f} stderr {r.stderr:.4f}")
    print(run_dir)
    return 0


def cmd_ablate(args, parser) -> int:
    exp, splits, cfg = _driver_common(args, parser)
    if exp.generator_state is None:
        parser.error("--generator checkpoint is required for ablations")
    reports = run_ablations(exp, splits["train"], splits["dev"],
                            splits["test"], cfg, jobs=args.jobs)
    resolved = _resolved(args)
    resolved["train_config"] = dataclasses.asdict(cfg)
    run_dir = _run_dir(args, "ablate", resolved, cfg.seed)
    save_reports(os.path.join(run_dir, "report.json"), reports)
    _write_manifest(run_dir, "ablate", resolved)
    for name in ABLATIONS:
        print(f"{name}: {reports[name].metric_id} {reports[name].mean:.4f}")
    print(run_dir)
    return 0


def cmd_report(args, parser) -> int:
    reports = load_reports(args.input)
    for name in sorted(reports):
        r = reports[name]
        line = (f"{name}: task={r.task} metric={r.metric_id} "
                f"mean={r.mean:.4f} stderr={r.stderr:.4f} runs={len(r.values)}")
        if r.errors:
            line += f" errors={len(r.errors)}"
        print(line)
    if args.csv:
        reports_to_csv(args.csv, reports)
        print(args.csv)
    return 0


# -- parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gazenlu",
        description="Scanpath-augmented language understanding pipeline",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("make-synthetic", help="write the synthetic benchmark suite")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n-gaze-train", type=int, default=400)
    p.add_argument("--n-gaze-dev", type=int, default=100)
    p.add_argument("--readers", type=int, default=2)
    p.add_argument("--n-keyword", type=int, nargs=3, default=[2000, 500, 500],
                   metavar=("TRAIN", "DEV", "TEST"))
    p.add_argument("--n-pairs", type=int, nargs=3, default=[1000, 300, 300],
                   metavar=("TRAIN", "DEV", "TEST"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("build-vocab", help="build a subword vocabulary")
    p.add_argument("--corpus", action="append",
                   help="plain text file, one line per text (repeatable)")
    p.add_argument("--from-synthetic", help="synthetic suite directory")
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--max-pieces-per-word", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain-gaze", help="fit the generator to fixation data")
    p.add_argument("--train", required=True, help="gaze corpus TSV")
    p.add_argument("--dev", required=True, help="held-out gaze corpus TSV")
    p.add_argument("--vocab", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain_gaze)

    def task_parser(name, help_text, needs_generator=True):
        q = sub.add_parser(name, help=help_text)
        q.add_argument("--task", required=True)
        q.add_argument("--data-dir", required=True)
        q.add_argument("--vocab", required=True)
        if needs_generator:
            q.add_argument("--generator", help="pretrained generator checkpoint")
        _add_model_flags(q)
        _add_train_flags(q)
        q.add_argument("--jobs", type=int, default=1)
        q.add_argument("--out")
        return q

    p = task_parser("train", "joint fine-tuning on a labeled task")
    p.add_argument("--k", type=int, help="low-resource training-set size")
    p.add_argument("--data-seed", type=int, help="shuffling seed for --k")

    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained model on a split")
    p.add_argument("--model", required=True, help="training run directory")
    p.add_argument("--task", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=["train", "dev", "test"], default="test")
    p.add_argument("--n-scanpaths", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", help="sample scanpaths for input texts")
    p.add_argument("--model", required=True, help="pretraining run directory")
    p.add_argument("--input", required=True, help="text file, one sentence per line")
    p.add_argument("--n-paths", type=int, default=1)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = task_parser("crossval", "k-fold cross-validation protocol")
    p.add_argument("--folds", type=int, default=10)
    p.set_defaults(func=cmd_crossval)

    p = task_parser("lowresource", "low-resource protocol over data seeds")
    p.add_argument("--ks", type=int, nargs="+", default=[200, 500, 1000])
    p.add_argument("--data-seeds", type=int, nargs="+",
                   default=[111, 222, 333, 444, 555])
    p.set_defaults(func=cmd_lowresource)

    p = task_parser("sweep", "scanpath-count sweep")
    p.add_argument("--counts", type=int, nargs="+", default=[1, 3, 5, 7])
    p.add_argument("--seeds", type=int, nargs="+", default=[42])
    p.set_defaults(func=cmd_sweep)

    p = task_parser("ablate", "full vs frozen vs scratch generator")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="print a report file; optionally emit CSV")
    p.add_argument("--input", required=True, help="report.json path")
    p.add_argument("--csv", help="write flat CSV here")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (ValueError, OSError, KeyError, FloatingPointError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
