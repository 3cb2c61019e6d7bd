"""Command-line entry point.

Subcommands cover the full workflow: build-corpus (metadata to training
records through the two-stage pipeline), split (stratified train/validation
partition), train (adapter training over a frozen backbone), eval
(multiple-choice benchmark scoring), and inspect (checkpoint census and
digest). Exit codes: 0 success, 1 fatal input error, 2 completed with parked
records. ALARM_SEED overrides any configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_arrays
from .corpus import (
    DEFAULT_CANDIDATES,
    DEFAULT_VAL_FRAC,
    FilterRules,
    build_corpus,
    load_corpus,
    save_corpus,
    split_corpus,
)
from .backbone import load_toy_backbone
from .encoders import bank_from_config, default_toy_bank
from .errors import AlarmError, InvalidInputError
from .evalmcq import evaluate_model, load_benchmark
from .llm import ROLE_INSTRUCT, ROLE_REASONING, HttpLlmClient, MockLlmClient
from .model import (
    VARIANT_CA,
    VARIANT_E,
    AudioTextModel,
    load_ensemble,
    load_model,
)
from .trainer import TrainConfig, Trainer, TrainExample, init_from_single_encoder

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2

_VARIANT_ALIASES = {
    "single-content": "single-content",
    "single-speech": "single-speech-traits",
    "single-speech-traits": "single-speech-traits",
    "single-music": "single-music",
    "single-sound": "single-sound",
    "ca": "ca",
    "p": "p",
    "e": "e",
}
_TRAIN_VARIANTS = sorted(v for v in _VARIANT_ALIASES if v != "e")
_EVAL_VARIANTS = sorted(_VARIANT_ALIASES)


def _env_seed() -> int | None:
    raw = os.environ.get("ALARM_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise InvalidInputError(f"ALARM_SEED must be an integer, got {raw!r}") from exc


def _resolve_seed(cli_value: int) -> int:
    env = _env_seed()
    return cli_value if env is None else env


class _Parser(argparse.ArgumentParser):
    """Argument errors raise instead of exiting, so main can map them to 1."""

    def error(self, message):
        raise InvalidInputError(message)


# --- build-corpus -----------------------------------------------------------


def _cmd_build_corpus(args) -> int:
    rules = FilterRules.from_file(args.rules) if args.rules else FilterRules()
    if args.budget is not None:
        rules = replace(rules, budget=args.budget)
    if args.mock:
        instruct = MockLlmClient.from_file(args.mock, ROLE_INSTRUCT)
        reasoning = MockLlmClient.from_file(args.mock, ROLE_REASONING)
    else:
        instruct = HttpLlmClient(args.llm_endpoint, ROLE_INSTRUCT, args.instruct_model)
        reasoning = HttpLlmClient(args.llm_endpoint, ROLE_REASONING, args.reasoning_model)
    report = build_corpus(
        args.manifest,
        instruct,
        reasoning,
        rules,
        args.out,
        n_candidates=args.candidates,
        concurrency=args.concurrency,
        seed=_resolve_seed(args.seed),
        resume=not args.fresh,
    )
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(
        f"wrote {report.written}/{report.total} records to {args.out} "
        f"({report.resumed} resumed, {len(report.parked)} parked)"
    )
    for entry in report.parked:
        print(f"parked {entry['id']}: {entry['reason']}")
    return EXIT_PARTIAL if report.parked else EXIT_OK


# --- split ------------------------------------------------------------------


def _cmd_split(args) -> int:
    records = load_corpus(args.corpus)
    train, val = split_corpus(records, args.val_frac, _resolve_seed(args.seed))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_corpus(train, str(out_dir / "train.jsonl"))
    save_corpus(val, str(out_dir / "val.jsonl"))
    print(f"split {len(records)} records into {len(train)} train / {len(val)} val under {out_dir}")
    return EXIT_OK


# --- train ------------------------------------------------------------------


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise InvalidInputError(f"config file {path} must hold a JSON object")
    return data


def _train_config(data: dict) -> TrainConfig:
    kwargs = dict(data.get("train", {}))
    if "betas" in kwargs:
        kwargs["betas"] = tuple(kwargs["betas"])
    config = TrainConfig(**kwargs)
    env = _env_seed()
    return config if env is None else replace(config, seed=env)


def _bank(data: dict):
    if "bank" in data:
        return bank_from_config(data["bank"])
    return default_toy_bank(int(data.get("feature_dim", 64)))


def _checkpoint_variant(path: str) -> str:
    _, metadata = load_arrays(path)
    return str(metadata.get("config", {}).get("variant", ""))


def _cmd_train(args) -> int:
    variant = _VARIANT_ALIASES[args.variant]
    data = _load_config(args.config)
    config = _train_config(data)
    examples = [
        TrainExample(audio=rec.audio_ref, prompt=rec.prompt, response=rec.r_text)
        for rec in load_corpus(args.corpus)
    ]

    init_from = args.init_from or []
    if len(init_from) > 1:
        if variant != VARIANT_CA:
            raise InvalidInputError(
                "multiple --init-from checkpoints warm-start the ca variant only"
            )
        sources = {}
        for path in init_from:
            source_variant = _checkpoint_variant(path)
            if not source_variant.startswith("single-"):
                raise InvalidInputError(
                    f"{path}: warm-start sources must be single-encoder checkpoints, "
                    f"got {source_variant!r}"
                )
            sources[source_variant.removeprefix("single-")] = path
        model_kwargs = dict(data.get("model", {}))
        env = _env_seed()
        if env is not None:
            model_kwargs["seed"] = env
        model = AudioTextModel(_bank(data), load_toy_backbone(), variant, **model_kwargs)
        model = init_from_single_encoder(model, sources)
    elif len(init_from) == 1:
        model, _ = load_model(init_from[0])
        if model.variant != variant:
            raise InvalidInputError(
                f"checkpoint holds variant {model.variant!r}, requested {variant!r}"
            )
    else:
        model_kwargs = dict(data.get("model", {}))
        env = _env_seed()
        if env is not None:
            model_kwargs["seed"] = env
        model = AudioTextModel(_bank(data), load_toy_backbone(), variant, **model_kwargs)

    out_dir = Path(args.out)
    trainer = Trainer(model, config)
    result = trainer.fit(examples, out_dir=out_dir, log_path=out_dir / "train_log.jsonl")
    loss = f"{result.final_loss:.6f}" if result.final_loss is not None else "n/a"
    print(
        f"trained {variant} for {result.steps} steps over {len(examples)} examples; "
        f"final loss {loss}; checkpoint {result.final_path}"
    )
    return EXIT_OK


# --- eval -------------------------------------------------------------------


def _cmd_eval(args) -> int:
    variant = _VARIANT_ALIASES[args.variant]
    if variant == VARIANT_E:
        if not args.checkpoint2:
            raise InvalidInputError(
                "variant e needs --checkpoint (fused) and --checkpoint2 (content)"
            )
        model = load_ensemble(args.checkpoint, args.checkpoint2)
    else:
        if args.checkpoint2:
            raise InvalidInputError("--checkpoint2 applies to variant e only")
        model, _ = load_model(args.checkpoint)
        if model.variant != variant:
            raise InvalidInputError(
                f"checkpoint holds variant {model.variant!r}, requested {variant!r}"
            )
    items = load_benchmark(args.benchmark)
    report = evaluate_model(
        model, items, max_new_tokens=args.max_new_tokens, strict=args.strict
    )
    report.save(args.report)
    for category in sorted(report.categories):
        bucket = report.categories[category]
        print(f"{category}: {bucket['correct']}/{bucket['total']} = {bucket['accuracy']:.3f}")
    print(
        f"overall: {report.overall['correct']}/{report.overall['total']} "
        f"= {report.overall['accuracy']:.3f} "
        f"({report.errored} errored, {report.truncations} truncated)"
    )
    return EXIT_OK


# --- inspect ----------------------------------------------------------------


def _cmd_inspect(args) -> int:
    arrays, metadata = load_arrays(args.checkpoint)
    print(f"kind: {metadata.get('kind', 'unknown')}")
    config = metadata.get("config", {})
    if "variant" in config:
        print(f"variant: {config['variant']}")
    print(f"step: {metadata.get('step', 0)}")
    print(f"frozen digest: {metadata.get('fingerprint', 'absent')}")
    census = metadata.get("census", [])
    if census:
        values = sum(int(arrays[name].size) for name in census if name in arrays)
        print(f"trainable parameters: {len(census)} tensors, {values} values")
        for name in census:
            shape = "x".join(str(d) for d in arrays[name].shape) if name in arrays else "?"
            print(f"  {name} [{shape}]")
    else:
        print("trainable parameters: none recorded")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="alarm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    build = sub.add_parser("build-corpus", help="build training records from a metadata manifest")
    build.add_argument("--manifest", required=True, help="input manifest (JSONL)")
    build.add_argument("--rules", help="filter rules file (JSON)")
    endpoint = build.add_mutually_exclusive_group(required=True)
    endpoint.add_argument("--llm-endpoint", help="chat-completion endpoint URL")
    endpoint.add_argument("--mock", help="deterministic mock client table (JSON)")
    build.add_argument("--candidates", type=int, default=DEFAULT_CANDIDATES)
    build.add_argument("--budget", type=int, help="override the rephrasing thinking budget")
    build.add_argument("--concurrency", type=int, default=1)
    build.add_argument("--seed", type=int, default=0)
    build.add_argument("--out", required=True, help="output corpus (JSONL)")
    build.add_argument("--report", help="write the build report here (JSON)")
    build.add_argument("--fresh", action="store_true", help="ignore any existing output file")
    build.add_argument("--instruct-model", default="instruct-1")
    build.add_argument("--reasoning-model", default="reasoning-1")
    build.set_defaults(func=_cmd_build_corpus)

    split = sub.add_parser("split", help="stratified train/validation split")
    split.add_argument("--corpus", required=True)
    split.add_argument("--val-frac", type=float, default=DEFAULT_VAL_FRAC)
    split.add_argument("--seed", type=int, default=0)
    split.add_argument("--out-dir", required=True)
    split.set_defaults(func=_cmd_split)

    train = sub.add_parser("train", help="train audio adapters over the frozen backbone")
    train.add_argument("--corpus", required=True)
    train.add_argument("--variant", required=True, choices=_TRAIN_VARIANTS)
    train.add_argument("--config", help="JSON config with train/model/bank sections")
    train.add_argument("--init-from", nargs="*", default=[],
                       help="checkpoint to continue from, or four single-encoder "
                            "checkpoints to warm-start the ca variant")
    train.add_argument("--out", required=True, help="checkpoint output directory")
    train.set_defaults(func=_cmd_train)

    evaluate = sub.add_parser("eval", help="score a multiple-choice benchmark")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--checkpoint2", help="content-stream checkpoint (variant e)")
    evaluate.add_argument("--variant", required=True, choices=_EVAL_VARIANTS)
    evaluate.add_argument("--benchmark", required=True)
    evaluate.add_argument("--report", required=True)
    evaluate.add_argument("--strict", action="store_true",
                          help="count errored items as incorrect instead of excluding them")
    evaluate.add_argument("--max-new-tokens", type=int, default=64)
    evaluate.set_defaults(func=_cmd_eval)

    inspect = sub.add_parser("inspect", help="print checkpoint census, digest, and step")
    inspect.add_argument("--checkpoint", required=True)
    inspect.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except AlarmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
