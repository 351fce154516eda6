"""Command-line entry point: gen-synthetic, train, eval, reward.

Exit codes: 0 success, 2 configuration error, 3 data/IO error,
4 similarity-provider error, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from filelock import FileLock, Timeout

from ssgrpo.embed import Endpoint, ExternalProvider, SyntheticProvider
from ssgrpo.errors import (
    ConfigError,
    DataError,
    InvalidConfig,
    NumericError,
    ProviderError,
    UnknownSample,
)
from ssgrpo.evaluation import evaluate_policy
from ssgrpo.grpo import TrainConfig, TrainState, run_training
from ssgrpo.policy import PolicyParams, SlotSpec
from ssgrpo.rewards import RewardWeights, total_reward
from ssgrpo.serialization import (
    config_hash,
    dumps,
    load_checkpoint,
    load_config_file,
    log_header,
    read_dataset,
    record_line,
    save_checkpoint,
    write_dataset,
)
from ssgrpo.synth import SynthConfig, generate_dataset

logger = logging.getLogger("ssgrpo")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PROVIDER, EXIT_NUMERIC = 0, 2, 3, 4, 5

LOG_NAME = "log.jsonl"
CHECKPOINT_NAME = "checkpoint.json"

# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "steps": "steps",
    "group_size": "group_size",
    "beta": "beta",
    "eps": "eps",
    "k_refresh": "refresh_interval",
    "seed": "seed",
    "regime": "regime",
    "lr": "learning_rate",
    "bins": "bins",
}


def build_provider(spec: Optional[dict]):
    """Similarity provider from a config mapping; synthetic when unspecified."""
    spec = dict(spec or {"kind": "synthetic"})
    kind = spec.pop("kind", "synthetic")
    if kind == "synthetic":
        return SyntheticProvider()
    timeout = float(spec.get("timeout", 10.0))
    if kind == "tcp":
        return ExternalProvider(Endpoint("tcp", host=spec.get("host", "127.0.0.1"),
                                         port=int(spec["port"]), timeout=timeout))
    if kind == "process":
        return ExternalProvider(Endpoint("process", argv=tuple(spec["argv"]), timeout=timeout))
    raise InvalidConfig("provider.kind", f"unknown provider kind {kind!r}")


def resolve_train_config(file_cfg: dict, args: argparse.Namespace) -> TrainConfig:
    merged = dict(file_cfg)
    for flag, name in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            merged[name] = value
    return TrainConfig.from_dict(merged)


def check_ids(params: PolicyParams, dataset) -> None:
    for s in dataset:
        params.row(s.id)


def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    d = load_config_file(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.num_samples is not None:
        d["num_samples"] = args.num_samples
    cfg = SynthConfig.from_dict(d)
    write_dataset(generate_dataset(cfg), args.out)
    logger.info("wrote %d samples to %s", cfg.num_samples, args.out)
    return EXIT_OK


def _truncate_log(log_path: Path, header: str, upto_step: int) -> None:
    kept = [header]
    if log_path.exists():
        for line in log_path.read_text(encoding="utf-8").splitlines(keepends=True)[1:]:
            if json.loads(line)["step"] < upto_step:
                kept.append(line)
    log_path.write_text("".join(kept), encoding="utf-8")


def cmd_train(args: argparse.Namespace) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    provider_spec = file_cfg.pop("provider", None)
    templates = file_cfg.pop("templates", None)
    cfg = resolve_train_config(file_cfg, args)
    spec = SlotSpec(bins=cfg.bins, templates=tuple(templates)) if templates else SlotSpec(bins=cfg.bins)
    dataset = read_dataset(args.dataset)
    try:
        spec.audit(max(max(s.width, s.height) for s in dataset))
        spec.audit(min(min(s.width, s.height) for s in dataset))
    except ValueError as exc:
        raise InvalidConfig("bins/templates", str(exc)) from exc

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise DataError(f"{out} is in use by another process") from None
    try:
        if args.resume:
            state, saved_cfg = load_checkpoint(args.resume)
            if config_hash(saved_cfg, state.params_current.spec) != config_hash(cfg, spec):
                raise InvalidConfig("config", "does not match the checkpoint being resumed")
            check_ids(state.params_current, dataset)
        else:
            params = PolicyParams.uniform(spec, [s.id for s in dataset])
            state = TrainState.initial(params, cfg.seed)

        log_path = out / LOG_NAME
        header = log_header(cfg, spec, {"dataset_size": len(dataset)})
        _truncate_log(log_path, header, state.step if args.resume else 0)
        provider = build_provider(provider_spec)
        ckpt_path = out / CHECKPOINT_NAME

        with open(log_path, "a", encoding="utf-8") as log:
            def on_record(st, record):
                log.write(record_line(record))
                if st.step % cfg.checkpoint_interval == 0:
                    log.flush()
                    save_checkpoint(st, cfg, ckpt_path)
                    logger.info("step %d: mean reward %.3f", st.step, record.mean_reward)

            try:
                state = run_training(state, dataset, provider, cfg, on_record=on_record)
            finally:
                log.flush()
                if hasattr(provider, "close"):
                    provider.close()
        save_checkpoint(state, cfg, ckpt_path)
    finally:
        lock.release()
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.dataset)
    check_ids(state.params_current, dataset)
    report = evaluate_policy(state.params_current, dataset)
    sys.stdout.write(dumps(report.to_dict()) + "\n")
    return EXIT_OK


def cmd_reward(args: argparse.Namespace) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    dataset = {s.id: s for s in read_dataset(args.dataset)}
    provider = build_provider(file_cfg.get("provider"))
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        with open(args.completions, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    item = json.loads(line)
                    sid, text = item["id"], item["text"]
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataError(f"{args.completions}:{lineno}: bad completion line: {exc}") from exc
                if sid not in dataset:
                    raise UnknownSample(sid)
                b = total_reward(text, dataset[sid], provider, RewardWeights())
                assert b.total == b.format + b.spatial + b.semantic
                out.write(dumps({"id": sid, **b.to_dict()}) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
        if hasattr(provider, "close"):
            provider.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssgrpo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic grounding dataset")
    p.add_argument("--config", help="JSON synthetic-data config")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-samples", type=int)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train a policy with GRPO or SFT")
    p.add_argument("dataset")
    p.add_argument("--config", help="JSON training config (flags take precedence)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--group-size", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--k-refresh", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--bins", type=int)
    p.add_argument("--regime", choices=["grpo", "sft"])
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (Acc@0.5, mIoU)")
    p.add_argument("dataset")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reward", help="score completions offline")
    p.add_argument("completions", help="JSONL of {\"id\", \"text\"}")
    p.add_argument("dataset")
    p.add_argument("--config", help="JSON config with an optional provider section")
    p.add_argument("--out", help="output path (default: stdout)")
    p.set_defaults(func=cmd_reward)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
