"""
Timbre Trainer.
Alternating discriminator/generator optimization over unpaired patch
streams, style sampling, checkpoint save/resume and training metrics.
"""
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import ValidationError

from app.blocks import backward
from app.checkpoint import (
    decode_bytes,
    decode_json,
    encode_bytes,
    encode_json,
    read_container,
    require,
    write_container,
)
from app.corpus import PatchPlan, segment_features
from app.exceptions import CheckpointError, CorpusError, NonFiniteError
from app.features import ChannelStats
from app.losses import (
    adversarial_losses,
    content_loss,
    generator_objective,
    intrinsic_consistency_loss,
    reconstruction_loss,
    style_loss,
)
from app.metrics import MetricsCollector, MetricsLog, get_metrics_collector
from app.models import (
    Domain,
    FeatureConfig,
    FeatureStack,
    LossReport,
    NetworkConfig,
    TrainConfig,
)
from app.structured_logging import structured_logger
from app.translator import Translator, build_translator

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
MOVING_AVERAGE_WINDOW = 50
FINAL_CHECKPOINT = "final.ckpt"
METRICS_LOG = "metrics.log"


# ==================== Optimizer ====================


def make_optimizer(params: Sequence[torch.nn.Parameter], cfg: TrainConfig) -> torch.optim.AdamW:
    """Adam with bias correction and decoupled weight decay."""
    return torch.optim.AdamW(
        params,
        lr=cfg.lr,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
        weight_decay=cfg.weight_decay,
    )


def adam_step(optimizer: torch.optim.Optimizer, names: Optional[Dict[int, str]] = None) -> None:
    """One update; refuses non-finite gradients and verifies the parameters stay finite."""
    names = names or {}
    params = [p for group in optimizer.param_groups for p in group["params"]]
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            name = names.get(id(p), "<unnamed>")
            raise NonFiniteError(f"non-finite gradient for {name}", parameter=name)
    optimizer.step()
    for p in params:
        if not torch.isfinite(p).all():
            name = names.get(id(p), "<unnamed>")
            raise NonFiniteError(f"parameter {name} became non-finite", parameter=name)


def sample_style(generator: torch.Generator, style_dim: int = 8) -> torch.Tensor:
    """Independent standard-normal style code."""
    return torch.randn(style_dim, generator=generator)


# ==================== State ====================


class TrainState:
    """Everything a training run needs to continue bit-exactly."""

    def __init__(
        self,
        translator: Translator,
        train_config: TrainConfig,
        feature_config: FeatureConfig,
        stats: Dict[Domain, ChannelStats],
        generator: Optional[torch.Generator] = None,
        iteration: int = 0,
        echo: Optional[Dict[str, Any]] = None,
    ):
        self.translator = translator
        self.network_config: NetworkConfig = translator.config
        self.train_config = train_config
        self.feature_config = feature_config
        self.stats = stats
        self.generator = generator or torch.Generator().manual_seed(train_config.seed)
        self.iteration = iteration
        self.echo = echo or {}

        self.gen_opt = make_optimizer(translator.generator_parameters(), train_config)
        self.dis_opt = make_optimizer(translator.discriminator_parameters(), train_config)
        self.param_names = {id(p): name for name, p in translator.named_parameters()}

    def stats_tensors(self, domain: Domain) -> Tuple[torch.Tensor, torch.Tensor]:
        mean, std = self.stats[domain].affine(self.network_config.feature_set)
        return torch.from_numpy(mean).unsqueeze(0), torch.from_numpy(std).unsqueeze(0)


def new_state(
    network_config: NetworkConfig,
    train_config: TrainConfig,
    feature_config: FeatureConfig,
    stats: Dict[Domain, ChannelStats],
    echo: Optional[Dict[str, Any]] = None,
) -> TrainState:
    translator = build_translator(network_config, seed=train_config.seed)
    return TrainState(translator, train_config, feature_config, stats, echo=echo)


# ==================== Iteration ====================


def _check_finite(terms: Dict[str, torch.Tensor]) -> None:
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NonFiniteError(f"loss term {name} is non-finite", term=name)


def _generator_terms(
    x: torch.Tensor,
    y: torch.Tensor,
    z_x: torch.Tensor,
    z_y: torch.Tensor,
    state: TrainState,
) -> Dict[str, torch.Tensor]:
    translator = state.translator
    weights = state.train_config.weights
    feature_set = state.network_config.feature_set
    eta = state.feature_config.eta

    codes_x = translator.encode(x, Domain.X)
    codes_y = translator.encode(y, Domain.Y)

    x_hat = translator.decode(codes_x.content, codes_x.style, Domain.X)
    y_hat = translator.decode(codes_y.content, codes_y.style, Domain.Y)
    recon = reconstruction_loss(x, x_hat) + reconstruction_loss(y, y_hat)

    u = translator.decode(codes_y.content, z_x, Domain.X)
    v = translator.decode(codes_x.content, z_y, Domain.Y)
    codes_u = translator.encode(u, Domain.X)
    codes_v = translator.encode(v, Domain.Y)
    content = content_loss(codes_y.content, codes_u.content) + content_loss(
        codes_x.content, codes_v.content
    )
    style = style_loss(z_x, codes_u.style) + style_loss(z_y, codes_v.style)

    gen_x, _ = adversarial_losses(translator.discriminate(x, Domain.X), translator.discriminate(u, Domain.X))
    gen_y, _ = adversarial_losses(translator.discriminate(y, Domain.Y), translator.discriminate(v, Domain.Y))

    # intrinsic relations hold in feature units only
    mean_x, std_x = state.stats_tensors(Domain.X)
    mean_y, std_y = state.stats_tensors(Domain.Y)
    ic_u = intrinsic_consistency_loss(u * std_x + mean_x, weights, feature_set, eta)
    ic_v = intrinsic_consistency_loss(v * std_y + mean_y, weights, feature_set, eta)

    return {
        "adv_g": gen_x + gen_y,
        "content": content,
        "style": style,
        "recon": recon,
        "ic_mfcc": ic_u.mfcc + ic_v.mfcc,
        "ic_delta": ic_u.delta + ic_v.delta,
        "ic_env": ic_u.env + ic_v.env,
    }


def train_iteration(
    x: torch.Tensor,
    y: torch.Tensor,
    state: TrainState,
    update_generator: bool = True,
) -> Tuple[TrainState, LossReport]:
    """
    One discriminator step followed by one generator step on a patch per domain.
    With update_generator=False the generator terms are only evaluated.
    """
    translator = state.translator
    style_dim = state.network_config.style_dim
    z_x = sample_style(state.generator, style_dim).unsqueeze(0)
    z_y = sample_style(state.generator, style_dim).unsqueeze(0)

    with torch.no_grad():
        fake_x = translator.translate(y, Domain.Y, z_x)
        fake_y = translator.translate(x, Domain.X, z_y)
    state.dis_opt.zero_grad(set_to_none=True)
    _, disc_x = adversarial_losses(
        translator.discriminate(x, Domain.X), translator.discriminate(fake_x, Domain.X)
    )
    _, disc_y = adversarial_losses(
        translator.discriminate(y, Domain.Y), translator.discriminate(fake_y, Domain.Y)
    )
    adv_d = disc_x + disc_y
    _check_finite({"adv_d": adv_d})
    backward(adv_d)
    adam_step(state.dis_opt, state.param_names)

    with torch.set_grad_enabled(update_generator):
        terms = _generator_terms(x, y, z_x, z_y, state)
        total = generator_objective(terms, state.train_config.weights)
    _check_finite({**terms, "total": total})
    if update_generator:
        state.gen_opt.zero_grad(set_to_none=True)
        backward(total)
        adam_step(state.gen_opt, state.param_names)

    state.iteration += 1
    report = LossReport(
        adv_d=float(adv_d),
        total=float(total),
        **{name: float(value) for name, value in terms.items()},
    )
    return state, report


# ==================== Patch sampling ====================


class PatchSampler:
    """Uniform over clips, then uniform over valid crop offsets of the chosen clip."""

    def __init__(
        self,
        stacks: Sequence[FeatureStack],
        stats: ChannelStats,
        network_config: NetworkConfig,
        patch_frames: int,
        generator: torch.Generator,
        domain: Optional[Domain] = None,
    ):
        self.patch_frames = patch_frames
        self.generator = generator
        self.clips: List[np.ndarray] = []
        self.plans: List[PatchPlan] = []
        for stack in stacks:
            plan = segment_features(stack, patch_frames, domain)
            if plan is None:
                continue
            channels = stack.channels(network_config.feature_set)
            self.clips.append(stats.normalize(channels, network_config.feature_set))
            self.plans.append(plan)
        if not self.clips:
            raise CorpusError(f"no clip has at least {patch_frames} frames")

    def __len__(self) -> int:
        return len(self.clips)

    def sample(self) -> torch.Tensor:
        index = int(torch.randint(len(self.clips), (1,), generator=self.generator))
        offsets = self.plans[index].n_offsets
        start = int(torch.randint(offsets, (1,), generator=self.generator))
        patch = self.clips[index][:, :, start:start + self.patch_frames]
        return torch.from_numpy(np.ascontiguousarray(patch)).unsqueeze(0)


# ==================== Checkpoints ====================


def _config_payload(state: TrainState) -> Dict[str, Any]:
    return {
        "network": state.network_config.model_dump(mode="json"),
        "train": state.train_config.model_dump(mode="json"),
        "feature": state.feature_config.model_dump(mode="json"),
        "echo": state.echo,
    }


def save_checkpoint(state: TrainState, path: Path) -> None:
    """Parameters, adam moments, RNG, normalization statistics and configuration."""
    entries: Dict[str, np.ndarray] = {
        "config": encode_json(_config_payload(state)),
        "state/iteration": np.array([state.iteration], dtype=np.float32),
        "rng/torch": encode_bytes(state.generator.get_state().numpy().tobytes()),
    }
    for domain, stats in state.stats.items():
        entries[f"stats/{domain.value}"] = np.array([stats.mean, stats.std], dtype=np.float32)
    for name, tensor in state.translator.state_dict().items():
        entries[f"param/{name}"] = tensor.detach().cpu().numpy()
    for tag, optimizer in (("gen", state.gen_opt), ("dis", state.dis_opt)):
        sd = optimizer.state_dict()
        entries[f"adam/{tag}/groups"] = encode_json(sd["param_groups"])
        for index, slots in sd["state"].items():
            for key, value in slots.items():
                entries[f"adam/{tag}/{index}/{key}"] = np.asarray(
                    value.numpy() if torch.is_tensor(value) else value, dtype=np.float32
                )
    write_container(entries, path)
    get_metrics_collector().record_checkpoint()
    structured_logger.info("Checkpoint written", path=str(path), iteration=state.iteration)


def _load_optimizer(optimizer: torch.optim.Optimizer, entries: Dict[str, np.ndarray], tag: str) -> None:
    groups = decode_json(require(entries, f"adam/{tag}/groups"))
    for group in groups:
        group["betas"] = tuple(group["betas"])
    prefix = f"adam/{tag}/"
    slots: Dict[int, Dict[str, torch.Tensor]] = {}
    for name, value in entries.items():
        if not name.startswith(prefix) or name.endswith("/groups"):
            continue
        index, key = name[len(prefix):].split("/", 1)
        slots.setdefault(int(index), {})[key] = torch.from_numpy(value.copy())
    try:
        optimizer.load_state_dict({"state": slots, "param_groups": groups})
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"optimizer state {tag} does not match the network: {e}") from e


def load_checkpoint(path: Path) -> TrainState:
    entries = read_container(path)
    payload = decode_json(require(entries, "config"))
    try:
        network_config = NetworkConfig(**payload["network"])
        train_config = TrainConfig(**payload["train"])
        feature_config = FeatureConfig(**payload["feature"])
    except (ValidationError, KeyError) as e:
        raise CheckpointError(f"checkpoint {path} carries an invalid configuration: {e}") from e

    translator = Translator(network_config)
    params = {}
    for name in translator.state_dict():
        params[name] = torch.from_numpy(require(entries, f"param/{name}").copy())
    translator.load_state_dict(params)

    stats = {}
    for domain in Domain:
        values = require(entries, f"stats/{domain.value}")
        stats[domain] = ChannelStats(
            mean=[float(v) for v in values[0]], std=[float(v) for v in values[1]]
        )

    generator = torch.Generator()
    rng = bytearray(decode_bytes(require(entries, "rng/torch")))
    generator.set_state(torch.frombuffer(rng, dtype=torch.uint8).clone())

    state = TrainState(
        translator,
        train_config,
        feature_config,
        stats,
        generator=generator,
        iteration=int(require(entries, "state/iteration")[0]),
        echo=payload.get("echo", {}),
    )
    _load_optimizer(state.gen_opt, entries, "gen")
    _load_optimizer(state.dis_opt, entries, "dis")
    return state


# ==================== Training loop ====================


def fit_stats(stacks: Dict[Domain, Sequence[FeatureStack]]) -> Dict[Domain, ChannelStats]:
    """Per-domain channel statistics over the training clips."""
    return {domain: ChannelStats.fit(items) for domain, items in stacks.items()}


class Trainer:
    """Runs iterations, writes the metrics log and checkpoints."""

    def __init__(
        self,
        state: TrainState,
        stacks: Dict[Domain, Sequence[FeatureStack]],
        out_dir: Path,
        collector: Optional[MetricsCollector] = None,
    ):
        self.state = state
        self.out_dir = Path(out_dir)
        self.collector = collector or get_metrics_collector()
        patch_frames = state.train_config.patch_frames
        self.samplers = {
            domain: PatchSampler(
                stacks[domain],
                state.stats[domain],
                state.network_config,
                patch_frames,
                state.generator,
                domain,
            )
            for domain in Domain
        }

    def run(self, max_iters: Optional[int] = None, update_generator: bool = True) -> List[LossReport]:
        cfg = self.state.train_config
        max_iters = cfg.max_iters if max_iters is None else max_iters
        reports: List[LossReport] = []
        resume = self.state.iteration > 0
        structured_logger.info(
            "Training started",
            start_iteration=self.state.iteration,
            max_iters=max_iters,
            feature_set=self.state.network_config.feature_set.value,
        )

        log_path = self.out_dir / METRICS_LOG
        if resume:
            kept = MetricsLog.truncate(log_path, self.state.iteration)
            if kept != self.state.iteration:
                logger.warning(
                    f"Metrics log {log_path} holds {kept} records up to iteration "
                    f"{self.state.iteration}; continuing it anyway"
                )

        with MetricsLog(log_path, append=resume) as log:
            while self.state.iteration < max_iters:
                started = time.perf_counter()
                x = self.samplers[Domain.X].sample()
                y = self.samplers[Domain.Y].sample()
                _, report = train_iteration(x, y, self.state, update_generator=update_generator)
                step = self.state.iteration
                log.write(step, report)
                self.collector.record_iteration(report, time.perf_counter() - started)
                reports.append(report)

                if step % cfg.log_every == 0:
                    structured_logger.info(
                        "Training progress",
                        iteration=step,
                        total=report.total,
                        adv_d=report.adv_d,
                        recon=report.recon,
                    )
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(self.state, self.out_dir / f"iter_{step:06d}.ckpt")

        save_checkpoint(self.state, self.out_dir / FINAL_CHECKPOINT)
        return reports


def moving_average(values: Sequence[float], window: int = MOVING_AVERAGE_WINDOW) -> np.ndarray:
    """Trailing mean over full windows."""
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) < window:
        return np.array([arr.mean()]) if len(arr) else arr
    return np.convolve(arr, np.ones(window) / window, mode="valid")
