"""Epoch GAN: conv+LSTM generator and discriminator for single EEG epochs.

Both networks share the same skeleton of four 1-D conv blocks followed by
one LSTM layer that runs over the time axis of the conv feature map. The
generator stretches its noise vector to epoch length with linear
interpolation before the convs and ends in a tanh projection; the
discriminator ends in a sigmoid real/fake probability.
"""

from __future__ import annotations

import glob
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import seeding
from .autodiff import Adam, Checkpoint, Module, Tensor, no_grad
from .autodiff import checkpoint as ckpt_io
from .autodiff import functional as F
from .autodiff.nn import LSTM, Conv1d, Linear
from .autodiff.tensor import ShapeError, concat
from .data import GENERATED, LabeledEpoch, Stage

log = logging.getLogger(__name__)

LEAK = 0.2


class GanConfigError(ValueError):
    pass


@dataclass
class GanArch:
    epoch_length: int = 3000
    fs: int = 100
    noise_dim: int = 100
    filters: Tuple[int, int, int, int] = (64, 64, 128, 128)
    kernel: int = 8
    hidden: int = 128
    # pooling window after each discriminator block; 1 means none
    d_pools: Tuple[int, int, int, int] = (4, 1, 1, 2)
    # same for the generator; pooling shortens the sequence its LSTM runs over
    g_pools: Tuple[int, int, int, int] = (1, 1, 1, 1)
    # discriminator sizing; None mirrors the generator
    d_filters: Optional[Tuple[int, int, int, int]] = None
    d_hidden: Optional[int] = None
    # append the batch's mean conv-feature std to the discriminator head input
    minibatch_std: bool = False

    @property
    def first_kernel(self) -> int:
        return max(1, self.fs // 2)

    @property
    def first_stride(self) -> int:
        return max(1, self.fs // 16)


def replication_arch(dataset: str) -> GanArch:
    if dataset == "sleep-edf-20":
        return GanArch(epoch_length=3000, fs=100, noise_dim=100)
    if dataset == "shhs":
        return GanArch(epoch_length=3750, fs=125, noise_dim=125)
    raise GanConfigError(f"unknown dataset {dataset!r}")


def _conv_stack(m: Module, arch: GanArch, filters, rng) -> List[Conv1d]:
    convs = []
    in_ch = 1
    for i, out_ch in enumerate(filters):
        k = arch.first_kernel if i == 0 else arch.kernel
        s = arch.first_stride if i == 0 else 1
        convs.append(m.add_module(f"conv{i + 1}", Conv1d(in_ch, out_ch, k, s, "same", rng=rng, slope=LEAK)))
        in_ch = out_ch
    return convs


class Generator(Module):
    def __init__(self, arch: GanArch, rng: np.random.Generator):
        super().__init__()
        self.arch = arch
        self.convs = _conv_stack(self, arch, arch.filters, rng)
        self.lstm = self.add_module("lstm", LSTM(arch.filters[-1], arch.hidden, rng=rng))
        self.fc = self.add_module("fc", Linear(arch.hidden, arch.epoch_length, rng=rng))


class Discriminator(Module):
    def __init__(self, arch: GanArch, rng: np.random.Generator):
        super().__init__()
        self.arch = arch
        filters = arch.d_filters or arch.filters
        hidden = arch.d_hidden or arch.hidden
        self.convs = _conv_stack(self, arch, filters, rng)
        self.lstm = self.add_module("lstm", LSTM(filters[-1], hidden, rng=rng))
        self.head = self.add_module("head", Linear(hidden + int(arch.minibatch_std), 1, rng=rng))


def generator_forward(noise, gen: Generator) -> Tensor:
    """[B, noise_dim] -> [B, epoch_length] with values in (-1, 1)."""
    z = Tensor.lift(noise)
    if z.ndim != 2 or z.shape[1] != gen.arch.noise_dim:
        raise ShapeError(f"generator expects noise [B, {gen.arch.noise_dim}], got {z.shape}")
    x = F.upsample_linear(z, gen.arch.epoch_length)
    x = x.reshape(z.shape[0], 1, gen.arch.epoch_length)
    for conv, pool in zip(gen.convs, gen.arch.g_pools):
        x = F.leaky_relu(conv(x), LEAK)
        if pool > 1 and x.shape[2] >= pool:
            x = F.maxpool1d(x, pool)
    _, h_last, _ = gen.lstm(x.transpose(0, 2, 1))
    return F.tanh(gen.fc(h_last))


def discriminator_forward(epochs, disc: Discriminator) -> Tensor:
    """[B, epoch_length] -> [B] real-probabilities."""
    return F.sigmoid(discriminator_logits(epochs, disc))


def discriminator_logits(epochs, disc: Discriminator) -> Tensor:
    x = Tensor.lift(epochs)
    if x.ndim != 2 or x.shape[1] != disc.arch.epoch_length:
        raise ShapeError(f"discriminator expects [B, {disc.arch.epoch_length}], got {x.shape}")
    x = x.reshape(x.shape[0], 1, x.shape[1])
    for conv, pool in zip(disc.convs, disc.arch.d_pools):
        x = F.leaky_relu(conv(x), LEAK)
        if pool > 1 and x.shape[2] >= pool:
            x = F.maxpool1d(x, pool)
    _, h_last, _ = disc.lstm(x.transpose(0, 2, 1))
    if disc.arch.minibatch_std:
        h_last = concat([h_last, _batch_spread(x)], axis=1)
    return disc.head(h_last).reshape(-1)


def _batch_spread(feats: Tensor) -> Tensor:
    """[B, C, T] conv features -> [B, 1] holding the mean across-batch std.

    A generator stuck on one mode yields a spread near zero, which the
    discriminator can then see even though it scores epochs one at a time.
    """
    dev = feats - feats.mean(axis=0, keepdims=True)
    std = ((dev * dev).mean(axis=0) + 1e-8) ** 0.5
    return Tensor(np.ones((feats.shape[0], 1))) * std.mean()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class GanTrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 16
    train_epochs: int = 660
    noise_dim: int = 100
    seed: int = 0
    d_steps: int = 1
    checkpoint_every: int = 10
    target_stage: int = int(Stage.N1)
    # std of Gaussian noise added to every discriminator input while training; 0 disables
    instance_noise: float = 0.0
    # discriminator target for real epochs; below 1 gives one-sided label smoothing
    real_label: float = 1.0
    # discriminator learning rate; None uses learning_rate
    d_learning_rate: Optional[float] = None

    def validate(self) -> None:
        if self.batch_size < 1 or self.train_epochs < 0 or self.d_steps < 1:
            raise GanConfigError("batch_size, train_epochs and d_steps must be positive")
        if not 0.5 < self.real_label <= 1.0:
            raise GanConfigError("real_label must lie in (0.5, 1]")
        if not 0 < self.learning_rate:
            raise GanConfigError("learning rate must be positive")


def replication_config(dataset: str, seed: int = 0) -> GanTrainConfig:
    if dataset == "sleep-edf-20":
        return GanTrainConfig(batch_size=16, train_epochs=660, noise_dim=100, seed=seed)
    if dataset == "shhs":
        return GanTrainConfig(batch_size=64, train_epochs=843, noise_dim=125, seed=seed)
    raise GanConfigError(f"unknown dataset {dataset!r}")


@dataclass
class GanLogRow:
    epoch: int
    d_loss: float
    g_loss: float
    d_acc: float


@dataclass
class GanResult:
    generator: Generator
    discriminator: Discriminator
    log: List[GanLogRow] = field(default_factory=list)


def _noise(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return rng.standard_normal((n, dim))


def _blur(x, sigma: float, rng):
    if sigma <= 0:
        return x
    return x + Tensor(sigma * rng.standard_normal(x.shape))


def d_step(gen, disc, opt_d: Adam, real: np.ndarray, rng, sigma: float = 0.0,
           real_label: float = 1.0) -> Tuple[float, int]:
    """One discriminator update on (real -> 1, fake -> 0). Returns (loss, n_correct)."""
    with no_grad():
        fake = generator_forward(_noise(rng, len(real), gen.arch.noise_dim), gen)
    real, fake = _blur(Tensor(real), sigma, rng), _blur(fake, sigma, rng)
    opt_d.zero_grad()
    z_real = discriminator_logits(real, disc)
    z_fake = discriminator_logits(fake, disc)
    n = real.shape[0]
    loss = F.bce_with_logits(z_real, np.full(n, real_label)) + F.bce_with_logits(z_fake, np.zeros(n))
    loss.backward()
    opt_d.step()
    correct = int(np.sum(z_real.data > 0) + np.sum(z_fake.data <= 0))
    return float(loss.data), correct


def g_step(gen, disc, opt_g: Adam, batch: int, rng, sigma: float = 0.0) -> float:
    """One non-saturating generator update (fake -> 1)."""
    opt_g.zero_grad()
    fake = _blur(generator_forward(_noise(rng, batch, gen.arch.noise_dim), gen), sigma, rng)
    loss = F.bce_with_logits(discriminator_logits(fake, disc), np.ones(batch))
    loss.backward()
    opt_g.step()
    disc.zero_grad()
    return float(loss.data)


def _validate_real(real: np.ndarray, batch: int) -> np.ndarray:
    real = np.asarray(real, dtype=np.float64)
    if real.ndim != 2:
        raise GanConfigError("real epochs must be a 2-D array [N, epoch_length]")
    if len(real) < 2 * batch:
        raise GanConfigError(f"need at least {2 * batch} real epochs, got {len(real)}")
    if not np.all(np.isfinite(real)) or np.abs(real).max() > 1.0:
        raise GanConfigError("real epochs must be normalized into [-1, 1]")
    return real


def _ckpt_arrays(gen, disc, opt_g, opt_d) -> Dict[str, np.ndarray]:
    arrays = {}
    g_names = [n for n, _ in gen.named_parameters()]
    d_names = [n for n, _ in disc.named_parameters()]
    arrays.update({f"g.{k}": v for k, v in gen.state_dict().items()})
    arrays.update({f"d.{k}": v for k, v in disc.state_dict().items()})
    arrays.update({f"g.{k}": v for k, v in opt_g.state_arrays(g_names).items()})
    arrays.update({f"d.{k}": v for k, v in opt_d.state_arrays(d_names).items()})
    return arrays


def _strip(arrays, prefix):
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def latest_checkpoint(out_dir) -> Optional[str]:
    found = sorted(glob.glob(os.path.join(out_dir, "gan_epoch*.segk")))
    return found[-1] if found else None


def train_egan(real, config: GanTrainConfig, arch: Optional[GanArch] = None,
               out_dir: Optional[str] = None, resume: bool = False) -> GanResult:
    """Adversarial training on one stage's real epochs.

    Per mini-batch: ``d_steps`` discriminator updates, then one generator
    update. The rng of every training epoch derives from (seed, epoch), so a
    resumed run replays the same randomness as an uninterrupted one.
    """
    config.validate()
    real = _validate_real(real, config.batch_size)
    arch = arch or GanArch(epoch_length=real.shape[1], noise_dim=config.noise_dim)
    if arch.epoch_length != real.shape[1] or arch.noise_dim != config.noise_dim:
        raise GanConfigError("architecture does not match data length or noise_dim")
    init = seeding.rng(config.seed, "gan", "init")
    gen, disc = Generator(arch, init), Discriminator(arch, init)
    hyper = dict(lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2)
    opt_g = Adam(gen.parameters(), **hyper)
    opt_d = Adam(disc.parameters(), **dict(hyper, lr=config.d_learning_rate or config.learning_rate))
    result = GanResult(gen, disc)
    start = 0

    if resume and out_dir and latest_checkpoint(out_dir):
        ck = ckpt_io.load(latest_checkpoint(out_dir))
        gen.load_state_dict(_strip(ck.arrays, "g."))
        disc.load_state_dict(_strip(ck.arrays, "d."))
        steps = int(ck.extra["adam_steps"])
        opt_g.load_state_arrays([n for n, _ in gen.named_parameters()], _strip(ck.arrays, "g."), steps)
        opt_d.load_state_arrays([n for n, _ in disc.named_parameters()], _strip(ck.arrays, "d."), steps)
        result.log = [GanLogRow(**row) for row in ck.extra["log"]]
        start = ck.epoch + 1
        log.info("resuming GAN training at epoch %d", start)

    bs = config.batch_size
    n_batches = len(real) // bs
    for epoch in range(start, config.train_epochs):
        rng = seeding.rng(config.seed, "gan", "epoch", epoch)
        order = rng.permutation(len(real))
        d_losses, g_losses, correct, seen = [], [], 0, 0
        for b in range(n_batches):
            batch = real[order[b * bs : (b + 1) * bs]]
            for _ in range(config.d_steps):
                dl, c = d_step(gen, disc, opt_d, batch, rng, config.instance_noise, config.real_label)
                d_losses.append(dl)
                correct += c
                seen += 2 * len(batch)
            g_losses.append(g_step(gen, disc, opt_g, bs, rng, config.instance_noise))
        row = GanLogRow(epoch, float(np.mean(d_losses)), float(np.mean(g_losses)), correct / seen)
        result.log.append(row)
        log.debug("gan epoch %d d_loss %.4f g_loss %.4f d_acc %.3f", *asdict(row).values())
        last = epoch == config.train_epochs - 1
        if out_dir and (last or (epoch + 1) % config.checkpoint_every == 0):
            save_gan_checkpoint(out_dir, result, config, arch, epoch, opt_g, opt_d)
    return result


def save_gan_checkpoint(out_dir, result: GanResult, config: GanTrainConfig, arch: GanArch,
                        epoch: int, opt_g: Adam, opt_d: Adam) -> str:
    os.makedirs(out_dir, exist_ok=True)
    extra = {
        "kind": "egan",
        "config": asdict(config),
        "arch": asdict(arch),
        "adam_steps": opt_g.state.step_count,
        "log": [asdict(r) for r in result.log],
    }
    ck = Checkpoint(_ckpt_arrays(result.generator, result.discriminator, opt_g, opt_d),
                    epoch=epoch, seed=config.seed, extra=extra)
    path = os.path.join(out_dir, f"gan_epoch{epoch:04d}.segk")
    ckpt_io.save(path, ck)
    return path


def load_generator(path) -> Tuple[Generator, GanTrainConfig]:
    ck = ckpt_io.load(path)
    if ck.extra.get("kind") != "egan":
        raise GanConfigError(f"{path} is not a GAN checkpoint")
    a = dict(ck.extra["arch"])
    arch = GanArch(**{k: tuple(v) if isinstance(v, list) else v for k, v in a.items()})
    gen = Generator(arch, np.random.default_rng(0))
    gen.load_state_dict(_strip(ck.arrays, "g."))
    return gen, GanTrainConfig(**ck.extra["config"])


# ---------------------------------------------------------------------------
# sampling and evaluation
# ---------------------------------------------------------------------------


def sample(gen: Generator, n: int, rng: np.random.Generator, batch: int = 64) -> np.ndarray:
    """Draw ``n`` epochs. Noise is drawn up front, so the batch size only affects rounding."""
    if n <= 0:
        raise ValueError("n must be positive")
    z = _noise(rng, n, gen.arch.noise_dim)
    out = np.empty((n, gen.arch.epoch_length))
    with no_grad():
        for s in range(0, n, batch):
            out[s : s + batch] = generator_forward(z[s : s + batch], gen).data
    return out


def sample_minority(gen: Generator, n: int, rng: np.random.Generator,
                    stage: int = int(Stage.N1)) -> List[LabeledEpoch]:
    samples = sample(gen, n, rng)
    return [LabeledEpoch(samples[i], Stage(stage), "__generated__", GENERATED, i) for i in range(n)]


def generator_fn(gen: Generator):
    """Adapter for :func:`sleepegan.pipeline.rebalance`."""
    return lambda n, rng: sample(gen, n, rng)


def discriminator_accuracy(gen: Generator, disc: Discriminator, real: np.ndarray,
                           rng: np.random.Generator) -> float:
    """Accuracy on ``real`` plus an equal number of fresh fakes."""
    with no_grad():
        fake = sample(gen, len(real), rng)
        p_real = discriminator_forward(real, disc).data
        p_fake = discriminator_forward(fake, disc).data
    return float((np.sum(p_real > 0.5) + np.sum(p_fake <= 0.5)) / (2 * len(real)))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def dominant_frequency(epochs: np.ndarray, fs: float) -> np.ndarray:
    """Peak frequency of each epoch's magnitude spectrum, DC excluded."""
    x = np.atleast_2d(np.asarray(epochs, dtype=np.float64))
    spec = np.abs(np.fft.rfft(x - x.mean(axis=1, keepdims=True), axis=1))
    spec[:, 0] = 0.0
    freqs = np.fft.rfftfreq(x.shape[1], 1.0 / fs)
    return freqs[np.argmax(spec, axis=1)]


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in bits (0 for identical histograms)."""
    from scipy.spatial.distance import jensenshannon

    return float(jensenshannon(p, q, base=2) ** 2)


@dataclass
class DiagnosticsReport:
    fs: float
    bin_edges: List[float]
    stats: Dict[str, Dict[str, float]]  # set -> statistic -> value
    histograms: Dict[str, List[float]]  # set -> normalized dominant-frequency histogram
    js_divergence: float

    def to_tsv(self) -> str:
        lines = ["# egan diagnostics", f"fs\t{self.fs!r}", "bin_edges\t" + ",".join(repr(e) for e in self.bin_edges)]
        for name in sorted(self.stats):
            for key in sorted(self.stats[name]):
                lines.append(f"stat\t{name}\t{key}\t{self.stats[name][key]!r}")
        for name in sorted(self.histograms):
            lines.append(f"hist\t{name}\t" + ",".join(repr(v) for v in self.histograms[name]))
        lines.append(f"js_divergence\t{self.js_divergence!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "DiagnosticsReport":
        fs, edges, stats, hists, js = None, [], {}, {}, None
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if parts[0] == "fs":
                fs = float(parts[1])
            elif parts[0] == "bin_edges":
                edges = [float(v) for v in parts[1].split(",")]
            elif parts[0] == "stat":
                stats.setdefault(parts[1], {})[parts[2]] = float(parts[3])
            elif parts[0] == "hist":
                hists[parts[1]] = [float(v) for v in parts[2].split(",")]
            elif parts[0] == "js_divergence":
                js = float(parts[1])
            else:
                raise ValueError(f"unknown diagnostics row {parts[0]!r}")
        return cls(fs, edges, stats, hists, js)


def _set_stats(x: np.ndarray, fs: float) -> Dict[str, float]:
    from scipy.signal import hilbert

    env = np.abs(hilbert(x, axis=1))
    dom = dominant_frequency(x, fs)
    return {
        "n": float(len(x)),
        "mean": float(x.mean()),
        "variance": float(x.var()),
        "envelope_mean": float(env.mean()),
        "envelope_std": float(env.std()),
        "dominant_freq_mean": float(dom.mean()),
        "dominant_freq_std": float(dom.std()),
    }


def diagnostics(real: np.ndarray, generated: np.ndarray, fs: float,
                bin_width: float = 0.5) -> DiagnosticsReport:
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    if not len(real) or not len(generated):
        raise ValueError("diagnostics needs non-empty real and generated sets")
    n_bins = max(1, int(math.ceil((fs / 2) / bin_width)))
    edges = np.linspace(0.0, n_bins * bin_width, n_bins + 1)
    hists = {}
    for name, x in (("real", real), ("generated", generated)):
        h, _ = np.histogram(dominant_frequency(x, fs), bins=edges)
        hists[name] = (h / h.sum()).tolist()
    return DiagnosticsReport(
        fs=float(fs),
        bin_edges=edges.tolist(),
        stats={"real": _set_stats(real, fs), "generated": _set_stats(generated, fs)},
        histograms=hists,
        js_divergence=js_divergence(np.array(hists["real"]), np.array(hists["generated"])),
    )


def write_traces(out_dir, real: np.ndarray, generated: np.ndarray, fs: float, n: int = 4) -> List[str]:
    """Whitespace-delimited example traces (time column first) for plotting."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, x in (("real", real), ("generated", generated)):
        x = np.atleast_2d(x)[:n]
        t = np.arange(x.shape[1]) / fs
        path = os.path.join(out_dir, f"traces_{name}.dat")
        header = "# time_s " + " ".join(f"epoch{i}" for i in range(len(x)))
        rows = ["\t".join(repr(float(v)) for v in (t[j], *x[:, j])) for j in range(x.shape[1])]
        with open(path, "w") as fh:
            fh.write(header + "\n" + "\n".join(rows) + "\n")
        paths.append(path)
    return paths
