"""
Timbre Command Line.
extract | train | transfer | interpolate | reconstruct | verify.
Each command prints one JSON summary on stdout; failures print one JSON
error line on stderr and exit with status 1.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import torch

from app.checkpoint import save_feature_stack
from app.config import CliConfig, Settings, get_settings
from app.corpus import extract_corpus, extract_file, normalize_peak, prepare_clip, read_manifest, write_wav
from app.exceptions import ConfigError, CorpusError, TimbreError
from app.features import CHANNEL_ORDER, extract_stack, filterbank_for
from app.metrics import get_metrics_collector
from app.models import Direction, Domain, FeatureSet, FeatureStack, NnlsConfig
from app.reconstruction import resynthesize
from app.structured_logging import setup_structured_logging, start_run, structured_logger
from app.trainer import (
    FINAL_CHECKPOINT,
    METRICS_LOG,
    TrainState,
    Trainer,
    fit_stats,
    load_checkpoint,
    new_state,
    sample_style,
)
from app.translator import sweep_style, transfer_stack
from app.verify import run_checks

logger = logging.getLogger(__name__)

Summary = Dict[str, Any]

# Training flags whose values come from the checkpoint when resuming.
RESUME_FIXED_FLAGS = {
    "--seed": "seed",
    "--lr": "lr",
    "--weight-decay": "weight_decay",
    "--patch-frames": "patch_frames",
    "--checkpoint-every": "checkpoint_every",
    "--feature-set": "feature_set",
    "--config": "config",
}


# ==================== Helpers ====================


def _load_cli_config(args: argparse.Namespace, overrides: Dict[str, Any]) -> CliConfig:
    base = CliConfig.from_file(args.config) if getattr(args, "config", None) else CliConfig()
    return base.merged(overrides)


def _nnls_config(args: argparse.Namespace) -> NnlsConfig:
    return _load_cli_config(
        args, {"nnls_max_iters": args.nnls_max_iters, "nnls_tol": args.nnls_tol}
    ).nnls_config()


def _render(
    state: TrainState,
    stack: FeatureStack,
    direction: Direction,
    z: torch.Tensor,
    nnls: NnlsConfig,
    settings: Settings,
):
    """Clip-level translation followed by resynthesis with the source phase."""
    fc = state.feature_config
    translated = transfer_stack(
        state.translator, stack, direction, z, state.stats, state.train_config.patch_frames, fc
    )
    audio = resynthesize(translated.mel, translated.phase, filterbank_for(fc), nnls, fc.window, fc.gamma)
    return normalize_peak(audio, settings.peak_level)


def _source_stack(path: Path, state: TrainState, settings: Settings) -> FeatureStack:
    fc = state.feature_config
    return extract_stack(prepare_clip(path, fc.sample_rate, settings.peak_level), fc)


def _write_csv(stack: FeatureStack, folder: Path, stem: str) -> List[str]:
    folder.mkdir(parents=True, exist_ok=True)
    written = []
    for name in CHANNEL_ORDER:
        target = folder / f"{stem}_{name}.csv"
        np.savetxt(target, getattr(stack, name), delimiter=",", fmt="%.9g")
        written.append(str(target))
    return written


# ==================== Commands ====================


def cmd_extract(args: argparse.Namespace, settings: Settings) -> Summary:
    fc = settings.feature_config()
    if args.manifest:
        manifest = read_manifest(args.manifest, Domain(args.domain))
        stacks = extract_corpus(
            manifest, fc, Path(args.cache_dir or settings.cache_dir), args.jobs or settings.jobs,
            settings.peak_level,
        )
        return {"command": "extract", "clips": len(stacks), "cache_dir": str(args.cache_dir or settings.cache_dir)}

    if not args.input or not args.out:
        raise CorpusError("extract needs --in and --out, or --manifest")
    stack = extract_file(args.input, fc, peak_level=settings.peak_level)
    save_feature_stack(stack, args.out)
    summary: Summary = {
        "command": "extract",
        "out": str(args.out),
        "frames": stack.n_frames,
        "n_mels": stack.n_mels,
    }
    if args.csv_dir:
        summary["csv"] = _write_csv(stack, Path(args.csv_dir), Path(args.input).stem)
    return summary


def cmd_train(args: argparse.Namespace, settings: Settings) -> Summary:
    if args.resume:
        fixed = [flag for flag, dest in RESUME_FIXED_FLAGS.items() if getattr(args, dest) is not None]
        if fixed:
            raise ConfigError(
                f"{', '.join(fixed)} cannot change on --resume; the checkpoint fixes them",
                flags=fixed,
            )
    cli_config = _load_cli_config(
        args,
        {
            "max_iters": args.iters,
            "seed": args.seed,
            "lr": args.lr,
            "weight_decay": args.weight_decay,
            "patch_frames": args.patch_frames,
            "checkpoint_every": args.checkpoint_every,
            "feature_set": args.feature_set,
        },
    )
    out = Path(args.out)

    if args.resume:
        state = load_checkpoint(args.resume)
        if args.iters is not None:
            state.train_config = state.train_config.model_copy(update={"max_iters": args.iters})
        fc = state.feature_config
    else:
        fc = settings.feature_config()

    cache_dir = Path(args.cache_dir or settings.cache_dir)
    jobs = args.jobs or settings.jobs
    stacks = {
        domain: extract_corpus(read_manifest(path, domain), fc, cache_dir, jobs, settings.peak_level)
        for domain, path in ((Domain.X, args.domain_x), (Domain.Y, args.domain_y))
    }

    if not args.resume:
        state = new_state(
            cli_config.network_config(settings.style_dim),
            cli_config.train_config(),
            fc,
            fit_stats(stacks),
            echo=cli_config.model_dump(mode="json", exclude_none=True),
        )

    reports = Trainer(state, stacks, out).run()
    summary: Summary = {
        "command": "train",
        "iterations": state.iteration,
        "checkpoint": str(out / FINAL_CHECKPOINT),
        "metrics_log": str(out / METRICS_LOG),
    }
    if reports:
        summary["final"] = reports[-1].model_dump()
    return summary


def cmd_transfer(args: argparse.Namespace, settings: Settings) -> Summary:
    state = load_checkpoint(args.ckpt)
    direction = Direction(args.direction)
    stack = _source_stack(args.input, state, settings)
    z = sample_style(torch.Generator().manual_seed(args.seed), state.network_config.style_dim)

    audio = _render(state, stack, direction, z, _nnls_config(args), settings)
    write_wav(args.out, audio)
    get_metrics_collector().record_transfer(direction.value)
    structured_logger.info("Transfer written", out=str(args.out), direction=direction.value, seed=args.seed)
    return {
        "command": "transfer",
        "out": str(args.out),
        "direction": direction.value,
        "seed": args.seed,
        "duration": audio.duration,
    }


def cmd_interpolate(args: argparse.Namespace, settings: Settings) -> Summary:
    state = load_checkpoint(args.ckpt)
    direction = Direction(args.direction)
    values = np.linspace(args.value_from, args.value_to, args.steps)
    z = sample_style(torch.Generator().manual_seed(args.seed), state.network_config.style_dim)
    codes = sweep_style(z, args.dim, values, state.network_config.style_dim)

    stack = _source_stack(args.input, state, settings)
    nnls = _nnls_config(args)
    out = Path(args.out)
    written = []
    for i, code in enumerate(codes):
        target = out / f"interp_{i:02d}.wav"
        write_wav(target, _render(state, stack, direction, code, nnls, settings))
        get_metrics_collector().record_transfer(direction.value)
        written.append(str(target))
    return {
        "command": "interpolate",
        "dim": args.dim,
        "values": [float(v) for v in values],
        "outputs": written,
    }


def cmd_reconstruct(args: argparse.Namespace, settings: Settings) -> Summary:
    fc = settings.feature_config()
    stack = extract_stack(prepare_clip(args.input, fc.sample_rate, settings.peak_level), fc)
    audio = resynthesize(stack.mel, stack.phase, filterbank_for(fc), _nnls_config(args), fc.window, fc.gamma)
    write_wav(args.out, normalize_peak(audio, settings.peak_level))
    return {"command": "reconstruct", "out": str(args.out), "duration": audio.duration}


def cmd_verify(args: argparse.Namespace, settings: Settings) -> Summary:
    results = run_checks(seed=args.seed, with_training=args.with_training, workdir=args.workdir)
    return {
        "command": "verify",
        "passed": all(r.passed for r in results),
        "checks": [r.model_dump() for r in results],
    }


COMMANDS: Dict[str, Callable[[argparse.Namespace, Settings], Summary]] = {
    "extract": cmd_extract,
    "train": cmd_train,
    "transfer": cmd_transfer,
    "interpolate": cmd_interpolate,
    "reconstruct": cmd_reconstruct,
    "verify": cmd_verify,
}


# ==================== Parser ====================


def _add_nnls_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--nnls-max-iters", type=int, default=None)
    parser.add_argument("--nnls-tol", type=float, default=None)
    parser.add_argument("--config", type=Path, default=None, help="key = value config file")


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(prog="timbre", description=settings.app_name)
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.app_version}")
    parser.add_argument("--log-level", default=None)
    parser.add_argument("--jobs", type=int, default=None, help="parallel extraction workers")
    parser.add_argument("--cache-dir", type=Path, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="compute and cache feature stacks")
    p.add_argument("--in", dest="input", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--domain", choices=[d.value for d in Domain], default=Domain.X.value)
    p.add_argument("--csv-dir", type=Path)

    p = sub.add_parser("train", help="train a translator on two unpaired corpora")
    p.add_argument("--domain-x", type=Path, required=True)
    p.add_argument("--domain-y", type=Path, required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--patch-frames", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--feature-set", choices=[f.value for f in FeatureSet])
    p.add_argument("--resume", type=Path)
    p.add_argument("--config", type=Path)

    for name, help_text in (("transfer", "translate one clip"), ("interpolate", "sweep one style dimension")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--ckpt", type=Path, required=True)
        p.add_argument("--in", dest="input", type=Path, required=True)
        p.add_argument("--direction", choices=[d.value for d in Direction], default=Direction.X2Y.value)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True)
        _add_nnls_flags(p)
        if name == "interpolate":
            p.add_argument("--dim", type=int, default=5)
            p.add_argument("--from", dest="value_from", type=float, default=-3.0)
            p.add_argument("--to", dest="value_to", type=float, default=3.0)
            p.add_argument("--steps", type=int, default=7)

    p = sub.add_parser("reconstruct", help="extract and resynthesize without translation")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_nnls_flags(p)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--with-training", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workdir", type=Path)
    return parser


# ==================== Entry point ====================


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    settings = get_settings()
    setup_structured_logging(args.log_level or settings.log_level, settings.log_json)
    run_id = start_run(args.command)
    if settings.deterministic:
        torch.set_num_threads(1)

    try:
        summary = COMMANDS[args.command](args, settings)
    except TimbreError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return 1
    except Exception as e:
        logger.debug("Unexpected failure", exc_info=True)
        print(json.dumps({"error": "internal_error", "message": str(e)}), file=sys.stderr)
        return 1
    finally:
        if settings.metrics_enabled and settings.metrics_textfile:
            get_metrics_collector().write_textfile(settings.metrics_textfile)

    summary["run_id"] = run_id
    print(json.dumps(summary, default=str))
    if args.command == "verify" and not summary["passed"]:
        return 1
    return 0
