"""Command-line entry point: ``pbp {synth,prepare,train,eval,probe,ablate-masking}``.

Exit codes: 0 success, 2 usage or input error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from pbprompt.corpus import (
    MASKED_TYPES,
    AnnotationError,
    PromptType,
    SplitSpec,
    build_generalisation_testset,
    generate_synthetic_corpus,
    mask_corpus,
    read_annotations,
    read_prompts,
    split_dataset,
    tag_frequencies,
    write_prompts,
    write_sentences,
)

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3
LAYER_MODES = {"last": "last_layer", "meanpool": "mean_pool_all_layers"}

log = logging.getLogger("pbprompt")


class InputError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# helpers


def _prompt_file(path: str | None, default_name: str) -> Path:
    if not path:
        raise InputError("--prompts is required")
    p = Path(path)
    if p.is_dir():
        p = p / default_name
    if not p.is_file():
        raise InputError(f"prompt file not found: {p}")
    return p


def _load_prompts(path: Path):
    try:
        return read_prompts(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _training_config(args):
    from pbprompt.training import TrainingConfig

    overrides = {}
    flag_map = {"lambda_": "lambda_aux", "lr": "learning_rate", "train_batch": "train_batch_size",
                "eval_batch": "eval_batch_size", "max_epochs": "max_epochs", "seed": "seed",
                "masking": "masking", "rate": "mask_rate"}
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "layer_mode", None):
        overrides["layer_mode"] = LAYER_MODES[args.layer_mode]
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip().replace("-", "_")
        try:
            overrides.setdefault(key, TrainingConfig.coerce(key, raw.strip()))
        except (KeyError, ValueError) as exc:
            raise InputError(str(exc)) from exc
    try:
        if getattr(args, "config", None):
            if not Path(args.config).is_file():
                raise InputError(f"config file not found: {args.config}")
            return TrainingConfig.from_file(args.config, **overrides)
        return TrainingConfig(**overrides)
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"invalid configuration: {exc}") from exc


def _print_config(cfg) -> None:
    print("effective config: " + " ".join(f"{k}={v}" for k, v in dataclasses.asdict(cfg).items()))


def _encoder_and_vocab(spec: str, cfg, prompts, vocab_path: Path | None):
    from pbprompt.encoders import HFEncoder, Vocab

    if spec.startswith("hf:"):
        from transformers import AutoTokenizer
        import os

        name = spec[3:]
        tok = AutoTokenizer.from_pretrained(name, cache_dir=os.environ.get("PBP_CACHE_DIR"))
        return HFEncoder.from_pretrained(name), Vocab.from_hf_tokenizer(tok)
    if spec != "toy":
        raise InputError(f"unknown encoder {spec!r}; use 'toy' or 'hf:<name>'")
    vocab = Vocab.load(vocab_path) if vocab_path and vocab_path.is_file() else Vocab.from_prompts(prompts)
    return None, vocab


def _type_counts(prompts) -> dict[str, int]:
    counts = Counter(p.prompt_type.value for p in prompts)
    return {t.value: counts.get(t.value, 0) for t in PromptType}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    sentences = generate_synthetic_corpus(args.seed or 0, args.n_sentences, args.vocab_size)
    write_sentences(args.out, sentences)
    print(f"wrote {len(sentences)} sentences to {args.out}")
    return EXIT_OK


def _read_corpus(paths):
    sentences = []
    for path in paths:
        if not Path(path).is_file():
            raise InputError(f"cannot read annotation file: {path}")
        try:
            sentences += read_annotations(path)
        except (UnicodeDecodeError, AnnotationError, ValueError, KeyError) as exc:
            raise InputError(f"{path}: {exc}") from exc
    if not sentences:
        raise InputError("no sentences parsed from " + ", ".join(paths))
    return sentences


def cmd_prepare(args) -> int:
    from pbprompt.encoders import Vocab

    sentences = _read_corpus(args.corpus)
    seed = args.seed or 0
    prompts = mask_corpus(sentences, args.masking, args.rate, seed)
    spec = SplitSpec(args.train_fraction, seed, args.overlap_threshold)
    train, test = split_dataset(prompts, spec)
    general = build_generalisation_testset(train, test, spec)
    out = Path(args.prompts)
    out.mkdir(parents=True, exist_ok=True)
    write_prompts(out / "train.jsonl", train)
    write_prompts(out / "test.jsonl", tag_frequencies(train, test))
    write_prompts(out / "generalisation.jsonl", general)
    Vocab.build(p.unmask() for p in prompts).save(out / "vocab.txt")

    n_tokens = sum(len(p.tokens) for p in prompts)
    n_masked = sum(len(p.masked_positions) for p in prompts)
    summary = {
        "masking": args.masking,
        "rate": args.rate if args.masking == "random" else None,
        "seed": seed,
        "sentences": len(prompts),
        "train": len(train),
        "test": len(test),
        "generalisation": len(general),
        "zero_shot_spans": sum(f == 0 for p in general for f in p.answer_frequencies),
        "masked_token_fraction": n_masked / n_tokens if n_tokens else 0.0,
        "type_counts": _type_counts(prompts),
        "train_type_counts": _type_counts(train),
        "generalisation_type_counts": _type_counts(general),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    lines = [f"{'type':<10}{'#':>8}"] + [f"{t:<10}{c:>8}" for t, c in summary["type_counts"].items()]
    lines.append(f"masked-token fraction: {summary['masked_token_fraction']:.4f}")
    lines.append(f"train/test/generalisation: {len(train)}/{len(test)}/{len(general)}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_train(args) -> int:
    from pbprompt.core import save_checkpoint
    from pbprompt.training import TrainingAborted, train

    cfg = _training_config(args)
    path = _prompt_file(args.prompts, "train.jsonl")
    prompts = _load_prompts(path)
    if not prompts:
        raise InputError(f"no prompts in {path}")
    validation = _load_prompts(Path(args.validation)) if args.validation else None
    if not args.checkpoint:
        raise InputError("--checkpoint is required")
    _print_config(cfg)
    encoder, vocab = _encoder_and_vocab(args.encoder, cfg, prompts, path.parent / "vocab.txt")
    log_path = Path(args.log or f"{args.checkpoint}.log.tsv")

    def show(rec):
        val = "" if rec.val_em is None else f" val_em={rec.val_em:.2f} val_pm={rec.val_pm:.2f}"
        print(f"epoch {rec.epoch:4d} loss={rec.train_loss:.4f} ppl={rec.train_perplexity:.4f}{val}", flush=True)

    try:
        model, train_log = train(prompts, cfg, encoder, validation, vocab, on_epoch=show)
    except TrainingAborted as exc:
        save_checkpoint(args.checkpoint, exc.model, {"training": dataclasses.asdict(cfg)})
        exc.log.write(log_path)
        _err(f"training aborted: {exc}; last good checkpoint written to {args.checkpoint}")
        return EXIT_RUNTIME
    save_checkpoint(args.checkpoint, model, {"training": dataclasses.asdict(cfg)})
    train_log.write(log_path)
    print(f"stopped: {train_log.stop_reason}; checkpoint {args.checkpoint}; log {log_path}")
    return EXIT_OK


def _load_model(path):
    from pbprompt.core import CheckpointError, load_checkpoint

    if not path or not Path(path).is_file():
        raise InputError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise InputError(str(exc)) from exc


def cmd_eval(args) -> int:
    from pbprompt.evaluation import attention_diagnostics, build_report, span_predictions

    model = _load_model(args.checkpoint)
    path = _prompt_file(args.prompts, "test.jsonl")
    prompts = [p for p in _load_prompts(path) if p.mask_spans]
    if not prompts:
        raise InputError(f"no masked prompts in {path}")
    mode = args.mode.replace("-", "_")
    results = model.predict(prompts, mode, batch_size=args.eval_batch or 8)
    preds = span_predictions(prompts, [r["spans"] for r in results])
    report = build_report(preds, prompts, mode, attention_diagnostics(prompts, results))
    if args.report:
        Path(f"{args.report}.txt").write_text(report.to_text(), encoding="utf-8")
        Path(f"{args.report}.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    else:
        print(report.to_text(), end="")
    print(f"EM={report.em:.2f} PM={report.pm:.2f} ({report.n_spans} spans, mode {mode})")
    return EXIT_OK


def cmd_probe(args) -> int:
    from pbprompt.core import prompt_from_text

    model = _load_model(args.checkpoint)
    try:
        prompt = prompt_from_text(args.text)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    res = model.predict([prompt], args.mode.replace("-", "_"), topk=args.topk)[0]
    print(f"type={prompt.prompt_type.value}")
    for j, ranked in zip(prompt.masked_positions, res["topk"]):
        print(f"mask@{j}: " + "  ".join(f"{tok} {prob:.4f}" for tok, prob in ranked))
    return EXIT_OK


def run_ablation(sentences, cfg, target: float | None = None) -> dict:
    """Train once per masking mode with a shared config; return per-mode results."""
    from pbprompt.training import TrainingAborted, train

    target = cfg.target_perplexity + cfg.epsilon if target is None else target
    out = {}
    for masking in ("custom", "random"):
        prompts = mask_corpus(sentences, masking, cfg.mask_rate, cfg.seed)
        run_cfg = cfg.replace(masking=masking)
        try:
            _, train_log = train(prompts, run_cfg)
            aborted = False
        except TrainingAborted as exc:
            train_log, aborted = exc.log, True
        out[masking] = {"log": train_log, "epochs": train_log.epochs_to_perplexity(target), "aborted": aborted}
    return out


def cmd_ablate_masking(args) -> int:
    cfg = _training_config(args)
    sentences = _read_corpus(args.corpus)
    _print_config(cfg)
    results = run_ablation(sentences, cfg)
    prefix = args.report or "ablation"
    lines = [f"{'masking':<10}{'epochs to ppl<=' + format(cfg.target_perplexity + cfg.epsilon, 'g'):>22}"]
    for masking, res in results.items():
        cell = str(res["epochs"]) if res["epochs"] is not None else f"not reached (>{cfg.max_epochs})"
        if res["aborted"]:
            cell += " [aborted]"
        lines.append(f"{masking:<10}{cell:>22}")
        res["log"].write(f"{prefix}.{masking}.tsv")
    lines.append("")
    lines.append("per-epoch train perplexity")
    for masking, res in results.items():
        lines.append(f"{masking}: " + " ".join(f"{p:.4f}" for p in res["log"].perplexities))
    text = "\n".join(lines) + "\n"
    Path(f"{prefix}.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_training_flags(p) -> None:
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any training config field")
    p.add_argument("--lambda", dest="lambda_", type=float, help="auxiliary loss weight")
    p.add_argument("--lr", type=float)
    p.add_argument("--train-batch", type=int)
    p.add_argument("--eval-batch", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--layer-mode", choices=sorted(LAYER_MODES))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic annotated corpus (JSON lines)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-sentences", type=int, default=50)
    p.add_argument("--vocab-size", type=int, default=200)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="mask, split and tag an annotated corpus")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--prompts", required=True, help="output directory")
    p.add_argument("--masking", choices=["custom", "random"], default="custom")
    p.add_argument("--rate", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--overlap-threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fine-tune encoder + PBC head")
    p.add_argument("--prompts", help="train prompt file or prepare output directory")
    p.add_argument("--validation", help="validation prompt file")
    p.add_argument("--checkpoint", help="checkpoint to write")
    p.add_argument("--log", help="train log path (default: <checkpoint>.log.tsv)")
    p.add_argument("--encoder", default="toy", help="'toy' or 'hf:<model name>'")
    p.add_argument("--masking", choices=["custom", "random"])
    p.add_argument("--rate", type=float)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on test prompts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--mode", choices=["baseline", "pbc", "contextual-pbc"], default="contextual-pbc")
    p.add_argument("--report", help="output prefix for <report>.txt and <report>.jsonl")
    p.add_argument("--eval-batch", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="rank candidate fillers for [MASK] sentinels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("text")
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--mode", choices=["baseline", "pbc", "contextual-pbc"], default="contextual-pbc")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate-masking", help="epochs to target perplexity, custom vs random masking")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--report", help="output prefix")
    p.add_argument("--rate", type=float)
    _add_training_flags(p)
    p.set_defaults(func=cmd_ablate_masking)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        _err(str(exc))
        return EXIT_INPUT
    except (FloatingPointError, RuntimeError) as exc:
        _err(f"runtime failure: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
