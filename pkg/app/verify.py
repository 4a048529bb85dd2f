"""
Timbre Invariant Suite.
Property checks behind `verify`: transform oracles, perfect reconstruction,
intrinsic consistency of extracted features, gradient checks, NNLS behaviour,
identity resynthesis and, optionally, the toy training run.
"""
import logging
import tempfile
import time
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel

from app.blocks import (
    MLP,
    AdaINResBlock,
    Conv2dBlock,
    ResBlock,
    UpsampleBlock,
    adaptive_instance_norm,
    conv2d,
)
from app.corpus import extract_corpus, read_manifest
from app.dsp import dct_freq, make_mel_filterbank, make_window, istft, stft
from app.features import extract_stack, filterbank_for, mel_spectrogram
from app.losses import (
    adversarial_losses,
    content_loss,
    intrinsic_consistency_loss,
    reconstruction_loss,
    style_loss,
)
from app.models import AudioClip, Domain, FeatureConfig, NetworkConfig, NnlsConfig, TrainConfig, WindowSpec
from app.reconstruction import resynthesize, solve_nnls
from app.structured_logging import structured_logger
from app.synthetic import render_clip, write_fixture_corpus
from app.trainer import (
    METRICS_LOG,
    Trainer,
    fit_stats,
    load_checkpoint,
    moving_average,
    new_state,
    sample_style,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

ORACLE_RTOL = 1e-6
INTRINSIC_TOL = 1e-6
NNLS_TARGET = 1e-3
TRAIN_ITERS = 500
RESUME_AT = 100


class CheckResult(BaseModel):
    """Outcome of one property check."""
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


Check = Callable[[np.random.Generator], Tuple[bool, str]]


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


# ==================== Fast checks ====================


def check_dsp_oracles(rng: np.random.Generator) -> Tuple[bool, str]:
    worst_stft = worst_dct = worst_mel = 0.0
    spec = WindowSpec(size=2048, hop=256)
    h = make_window(spec)
    n_fft = spec.size
    kernel = np.exp(-2j * np.pi * np.outer(np.arange(n_fft // 2 + 1), np.arange(n_fft)) / n_fft)
    for _ in range(100):
        x = rng.standard_normal(4096)
        got = stft(AudioClip(samples=x, sample_rate=22050), spec).complex
        frames = np.array([x[n * spec.hop:n * spec.hop + n_fft] * h for n in range(got.shape[1])]).T
        worst_stft = max(worst_stft, _relative(got, kernel @ frames))

        n_bands = int(rng.integers(8, 65))
        mel = rng.uniform(0, 1, size=(n_bands, 3))
        naive = np.zeros_like(mel)
        for q in range(n_bands):
            for f in range(n_bands):
                naive[q] += mel[f] * np.cos(np.pi / n_bands * (f + 0.5) * q)
        worst_dct = max(worst_dct, _relative(dct_freq(mel), naive))

    fb = make_mel_filterbank(256, 22050, n_mels=16)
    for _ in range(100):
        power = rng.uniform(0, 1, size=(fb.n_bins, 4))
        naive = np.zeros((fb.n_mels, 4))
        for i in range(fb.n_mels):
            for k in range(fb.n_bins):
                for t in range(4):
                    naive[i, t] += fb.weights[i, k] * power[k, t]
        worst_mel = max(worst_mel, _relative(mel_spectrogram(power, fb), naive))

    worst = max(worst_stft, worst_dct, worst_mel)
    return worst < ORACLE_RTOL, f"stft={worst_stft:.2e} dct={worst_dct:.2e} mel={worst_mel:.2e}"


def check_perfect_reconstruction(rng: np.random.Generator) -> Tuple[bool, str]:
    spec = WindowSpec(size=2048, hop=256)
    x = rng.uniform(-1, 1, size=22050)
    y = istft(stft(AudioClip(samples=x, sample_rate=22050), spec), spec).samples
    interior = slice(spec.size, len(y) - spec.size)
    err = float(np.max(np.abs(y[interior] - x[: len(y)][interior])))
    return err < ORACLE_RTOL, f"max interior error {err:.2e}"


def check_intrinsic_zero(rng: np.random.Generator) -> Tuple[bool, str]:
    config = FeatureConfig()
    worst = 0.0
    for i in range(20):
        clip = render_clip(Domain.X if i % 2 == 0 else Domain.Y, 1.0, rng)
        stack = extract_stack(clip, config)
        u = torch.from_numpy(stack.channels())
        worst = max(worst, float(intrinsic_consistency_loss(u, eta=config.eta).total))
    return worst < INTRINSIC_TOL, f"max intrinsic loss {worst:.2e}"


def check_gradients(rng: np.random.Generator) -> Tuple[bool, str]:
    torch.manual_seed(int(rng.integers(2**31)))
    opts = {"dtype": torch.float64}

    def rand(*shape):
        return torch.randn(*shape, **opts, requires_grad=True)

    cases = {
        "conv2d": (lambda x, w, b: conv2d(x, w, b, stride=2, pad=1), (rand(1, 2, 6, 6), rand(3, 2, 3, 3), rand(3))),
        "adain": (adaptive_instance_norm, (rand(1, 3, 4, 4), rand(1, 3), rand(1, 3))),
        "adversarial_gen": (lambda r, f: adversarial_losses(r, f)[0], (rand(1, 1, 2, 2), rand(1, 1, 2, 2))),
        "adversarial_disc": (lambda r, f: adversarial_losses(r, f)[1], (rand(1, 1, 2, 2), rand(1, 1, 2, 2))),
        "content": (content_loss, (rand(2, 3, 3), rand(2, 3, 3))),
        "style": (style_loss, (rand(8), rand(8))),
        "recon": (reconstruction_loss, (rand(4, 4, 4), rand(4, 4, 4))),
        "intrinsic": (lambda u: intrinsic_consistency_loss(u, eta=3).total, (rand(1, 4, 8, 5),)),
    }
    modules = {
        "conv_block": (Conv2dBlock(2, 3, 3, 1, 1, norm="in"), (2, 6, 6)),
        "res_block": (ResBlock(2), (2, 4, 4)),
        "upsample_block": (UpsampleBlock(2, 2), (2, 3, 3)),
        "mlp": (MLP(3, 4, 5), None),
    }
    failed = []
    for name, (fn, inputs) in cases.items():
        if not torch.autograd.gradcheck(fn, inputs, raise_exception=False):
            failed.append(name)
    for name, (module, shape) in modules.items():
        module = module.double()
        x = rand(1, 3) if shape is None else rand(1, *shape)
        params = tuple(module.parameters())

        def forward(inp, *weights, module=module, params=params):
            return torch.func.functional_call(
                module, {n: w for (n, _), w in zip(module.named_parameters(), weights)}, (inp,)
            )

        if not torch.autograd.gradcheck(forward, (x, *params), raise_exception=False):
            failed.append(name)

    block = AdaINResBlock(2).double()
    adain = [rand(1, 2) for _ in range(4)]
    if not torch.autograd.gradcheck(lambda x, *p: block(x, p), (rand(1, 2, 4, 4), *adain), raise_exception=False):
        failed.append("adain_res_block")

    total = len(cases) + len(modules) + 1
    return not failed, f"{total - len(failed)}/{total} passed" + (f"; failed: {failed}" if failed else "")


def check_nnls(rng: np.random.Generator) -> Tuple[bool, str]:
    basis = rng.uniform(0, 1, size=(60, 30))
    truth = rng.uniform(0, 1, size=(30, 5))
    result = solve_nnls(basis @ truth, basis, NnlsConfig(max_iters=200, tol=NNLS_TARGET))
    consistent = result.relative_residual < NNLS_TARGET

    config = FeatureConfig()
    clip = render_clip(Domain.Y, 1.0, rng)
    stack = extract_stack(clip, config)
    history = solve_nnls(stack.mel, filterbank_for(config).weights, NnlsConfig()).objective_history
    monotone = all(b <= a * (1 + 1e-12) for a, b in zip(history, history[1:]))
    return consistent and monotone, (
        f"consistent residual {result.relative_residual:.2e}, "
        f"filterbank solve monotone over {len(history)} values"
    )


def check_identity_resynthesis(rng: np.random.Generator) -> Tuple[bool, str]:
    config = FeatureConfig()
    fb = filterbank_for(config)
    bin_hz = config.sample_rate / config.n_fft
    t = np.arange(config.sample_rate) / config.sample_rate
    errors = []
    for freq in (220.0, 440.0, 880.0):
        clip = AudioClip(samples=0.5 * np.sin(2 * np.pi * freq * t), sample_rate=config.sample_rate)
        stack = extract_stack(clip, config)
        audio = resynthesize(stack.mel, stack.phase, fb, NnlsConfig(), config.window, config.gamma)
        interior = audio.samples[config.n_fft:-config.n_fft]
        spectrum = np.abs(np.fft.rfft(interior * np.hanning(len(interior))))
        peak = np.argmax(spectrum) * config.sample_rate / len(interior)
        errors.append(abs(peak - freq))
    worst = max(errors)
    return worst <= bin_hz, f"max peak offset {worst:.2f} Hz (one bin = {bin_hz:.2f} Hz)"


FAST_CHECKS: List[Tuple[str, Check]] = [
    ("dsp_oracles", check_dsp_oracles),
    ("perfect_reconstruction", check_perfect_reconstruction),
    ("intrinsic_zero", check_intrinsic_zero),
    ("gradients", check_gradients),
    ("nnls", check_nnls),
    ("identity_resynthesis", check_identity_resynthesis),
]


# ==================== Training checks ====================


class TrainingFixture:
    """Fixture corpus, extracted stacks and one trained model shared by the training checks."""

    def __init__(self, workdir: Path, seed: int):
        self.workdir = Path(workdir)
        self.seed = seed
        self.feature_config = FeatureConfig()
        self.network_config = NetworkConfig()
        self.train_config = TrainConfig(max_iters=TRAIN_ITERS, seed=seed)
        manifests = write_fixture_corpus(self.workdir / "fixture", seed=seed)
        self.stacks = {
            domain: extract_corpus(
                read_manifest(path, domain), self.feature_config, self.workdir / "cache"
            )
            for domain, path in manifests.items()
        }
        self.stats = fit_stats(self.stacks)
        self._trained = None
        self.reports = []

    def fresh_trainer(self, out: str, max_iters: Optional[int] = None) -> Trainer:
        cfg = self.train_config if max_iters is None else self.train_config.model_copy(update={"max_iters": max_iters})
        state = new_state(self.network_config, cfg, self.feature_config, self.stats)
        return Trainer(state, self.stacks, self.workdir / out)

    def trained(self) -> Trainer:
        if self._trained is None:
            self._trained = self.fresh_trainer("toy")
            self.reports = self._trained.run()
        return self._trained

    def reference_patch(self) -> torch.Tensor:
        return self.trained().samplers[Domain.X].sample()


def check_toy_training(fixture: TrainingFixture) -> Tuple[bool, str]:
    fixture.trained()
    totals = moving_average([r.total for r in fixture.reports])
    recon = moving_average([r.recon for r in fixture.reports])
    decreasing = totals[-1] < totals[0]
    recon_ok = recon[-1] < 0.5 * recon[0]
    return decreasing and recon_ok, (
        f"total MA {totals[0]:.4f} -> {totals[-1]:.4f}; recon MA {recon[0]:.4f} -> {recon[-1]:.4f}"
    )


@torch.no_grad()
def check_multimodality(fixture: TrainingFixture) -> Tuple[bool, str]:
    translator = fixture.trained().state.translator
    x = fixture.reference_patch()
    generator = torch.Generator().manual_seed(fixture.seed)
    outputs = [translator.translate(x, Domain.X, sample_style(generator)) for _ in range(10)]
    distances = [
        float((a - b).abs().mean()) for i, a in enumerate(outputs) for b in outputs[i + 1:]
    ]
    z = sample_style(generator)
    same = float((translator.translate(x, Domain.X, z) - translator.translate(x, Domain.X, z)).abs().max())
    return min(distances) > 0 and same == 0.0, f"min pairwise L1 {min(distances):.3e}; repeat diff {same}"


@torch.no_grad()
def check_interpolation(fixture: TrainingFixture) -> Tuple[bool, str]:
    translator = fixture.trained().state.translator
    x = fixture.reference_patch()
    z = sample_style(torch.Generator().manual_seed(fixture.seed))
    outputs = translator.interpolate_style(x, Domain.X, z, dim=5, values=np.linspace(-3, 3, 7))
    steps = [float((a - b).abs().mean()) for a, b in zip(outputs, outputs[1:])]
    return len(outputs) == 7 and min(steps) > 0, f"adjacent L1 {', '.join(f'{s:.3e}' for s in steps)}"


def check_resume(fixture: TrainingFixture) -> Tuple[bool, str]:
    end = RESUME_AT + 10
    straight = fixture.fresh_trainer("straight", max_iters=end)
    straight.run()

    first = fixture.fresh_trainer("resumed", max_iters=RESUME_AT)
    first.run()
    ckpt = fixture.workdir / "resumed" / f"resume_{RESUME_AT}.ckpt"
    save_checkpoint(first.state, ckpt)
    state = load_checkpoint(ckpt)
    state.train_config = state.train_config.model_copy(update={"max_iters": end})
    Trainer(state, fixture.stacks, fixture.workdir / "resumed").run()

    a = (fixture.workdir / "straight" / METRICS_LOG).read_text().splitlines()
    b = (fixture.workdir / "resumed" / METRICS_LOG).read_text().splitlines()
    same = a == b and len(a) == end
    return same, f"{len(a)} vs {len(b)} log lines, identical={a == b}"


TRAINING_CHECKS: List[Tuple[str, Callable[[TrainingFixture], Tuple[bool, str]]]] = [
    ("toy_training", check_toy_training),
    ("multimodality", check_multimodality),
    ("interpolation", check_interpolation),
    ("determinism_resume", check_resume),
]


# ==================== Runner ====================


def _run(name: str, fn: Callable[[], Tuple[bool, str]]) -> CheckResult:
    started = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as e:  # a crashing check is a failed check
        logger.exception(f"Check {name} raised")
        passed, detail = False, f"{type(e).__name__}: {e}"
    result = CheckResult(name=name, passed=bool(passed), detail=detail, seconds=time.perf_counter() - started)
    structured_logger.info("Check finished", check=name, passed=result.passed, detail=detail)
    return result


def run_checks(seed: int = 0, with_training: bool = False, workdir: Optional[Path] = None) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [_run(name, lambda fn=fn: fn(rng)) for name, fn in FAST_CHECKS]
    if not with_training:
        return results

    with tempfile.TemporaryDirectory(prefix="timbre-verify-") as tmp:
        fixture = TrainingFixture(Path(workdir) if workdir else Path(tmp), seed)
        results += [_run(name, lambda fn=fn: fn(fixture)) for name, fn in TRAINING_CHECKS]
    return results
