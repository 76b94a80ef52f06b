"""Sequence classifier: per-epoch CNN features, an LSTM across epochs, softmax head."""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import pipeline, seeding
from .autodiff import Adam, Checkpoint, Module, Tensor, clip_grad_norm, no_grad
from .autodiff import checkpoint as ckpt_io
from .autodiff import functional as F
from .autodiff.nn import LSTM, Conv1d, Linear
from .autodiff.tensor import ShapeError
from .bank import CheckpointBank
from .data import EpochSet
from .metrics import N_CLASSES, accuracy_mf1

log = logging.getLogger(__name__)

STATE_FILE = "train_state.segk"


class ClfConfigError(ValueError):
    pass


@dataclass
class ClassifierArch:
    epoch_length: int = 3000
    fs: int = 100
    filters: Tuple[int, ...] = (128, 128, 128, 256, 256)
    kernel: int = 8
    # (window, stride) after conv blocks 1, 3 and 5
    pools: Tuple[Tuple[int, int], ...] = ((8, 8), (4, 4), (2, 2))
    dropout: float = 0.5
    hidden: int = 128

    @property
    def first_kernel(self) -> int:
        return max(1, self.fs // 2)

    @property
    def first_stride(self) -> int:
        return max(1, self.fs // 4)

    def feature_length(self) -> int:
        n = F.conv_out_length(self.epoch_length, self.first_kernel, self.first_stride, "same")
        for w, s in self.pools:
            if n < w:
                raise ClfConfigError(f"feature map of length {n} is shorter than pool window {w}")
            n = (n - w) // s + 1
        return n * self.filters[-1]


class Classifier(Module):
    """Conv blocks grouped 1+2+2 with three pools and two dropouts, then one LSTM."""

    def __init__(self, arch: ClassifierArch, rng: np.random.Generator):
        super().__init__()
        if len(arch.filters) != 5 or len(arch.pools) != 3:
            raise ClfConfigError("classifier needs five conv filters and three pools")
        self.arch = arch
        self.n_features = arch.feature_length()
        self.convs = []
        in_ch = 1
        for i, out_ch in enumerate(arch.filters):
            k = arch.first_kernel if i == 0 else arch.kernel
            s = arch.first_stride if i == 0 else 1
            self.convs.append(self.add_module(f"conv{i + 1}", Conv1d(in_ch, out_ch, k, s, "same", rng=rng)))
            in_ch = out_ch
        self.lstm = self.add_module("lstm", LSTM(self.n_features, arch.hidden, rng=rng))
        self.out = self.add_module("out", Linear(arch.hidden, N_CLASSES, rng=rng))


def epoch_features(x: Tensor, clf: Classifier, train: bool, rng) -> Tensor:
    """[N, epoch_length] -> [N, n_features]."""
    a = clf.arch
    h = x.reshape(x.shape[0], 1, x.shape[1])
    c = clf.convs
    h = F.relu(c[0](h))
    h = F.maxpool1d(h, *a.pools[0])
    h = F.dropout(h, a.dropout, train, rng)
    h = F.relu(c[2](F.relu(c[1](h))))
    h = F.maxpool1d(h, *a.pools[1])
    h = F.dropout(h, a.dropout, train, rng)
    h = F.relu(c[4](F.relu(c[3](h))))
    h = F.maxpool1d(h, *a.pools[2])
    return h.reshape(x.shape[0], -1)


def sequence_logits(epochs, clf: Classifier, train: bool = False, rng=None,
                    state: Optional[Tuple[Tensor, Tensor]] = None):
    """[B, L, epoch_length] -> (logits [B, L, 5], (h, c) after the last step).

    ``state`` defaults to zeros; passing the returned state into the next
    call continues the recurrence across sequence halves.
    """
    x = Tensor.lift(epochs)
    if x.ndim != 3 or x.shape[2] != clf.arch.epoch_length:
        raise ShapeError(f"classifier expects [B, L, {clf.arch.epoch_length}], got {x.shape}")
    if train and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    bsz, steps, length = x.shape
    feats = epoch_features(x.reshape(bsz * steps, length), clf, train, rng)
    feats = feats.reshape(bsz, steps, clf.n_features)
    h0, c0 = state if state is not None else clf.lstm.zero_state(bsz)
    seq, h_last, c_last = clf.lstm(feats, h0, c0)
    seq = F.dropout(seq, clf.arch.dropout, train, rng)
    return clf.out(seq), (h_last, c_last)


def classify_sequence(epochs, clf: Classifier, mode: str = "infer", rng=None, state=None):
    """Per-step class distributions [B, L, 5] and the final LSTM state."""
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    logits, state = sequence_logits(epochs, clf, mode == "train", rng, state)
    return F.softmax(logits, axis=-1), state


def predict(probabilities) -> np.ndarray:
    """Argmax over the last axis; ``np.argmax`` already picks the lowest index on ties."""
    p = probabilities.data if isinstance(probabilities, Tensor) else np.asarray(probabilities)
    return np.argmax(p, axis=-1)


def predict_set(clf: Classifier, es: EpochSet, seq_len: int, batch: int = 32) -> np.ndarray:
    """Class probabilities [len(es), 5] for every real epoch of ``es``.

    Each contiguous stream is cut into length-``seq_len`` chunks (the last
    chunk may be shorter) and each chunk starts from a zero state.
    """
    probs = np.full((len(es), N_CLASSES), np.nan)
    chunks = pipeline.evaluation_sequences(es, seq_len)
    by_len: Dict[int, List[np.ndarray]] = {}
    for ch in chunks:
        by_len.setdefault(len(ch), []).append(ch)
    with no_grad():
        for n in sorted(by_len):
            group = by_len[n]
            for s in range(0, len(group), batch):
                rows = np.stack(group[s : s + batch])
                p, _ = classify_sequence(es.samples[rows], clf, "infer")
                probs[rows.ravel()] = p.data.reshape(-1, N_CLASSES)
    return probs


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class ClfTrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    train_epochs: int = 200
    batch_size: int = 8
    sequence_length: int = 20
    class_weights: Tuple[float, ...] = (1.0, 1.5, 1.0, 1.0, 1.0)
    clip_norm: float = 5.0
    max_shift: Optional[int] = None  # None: half an epoch
    augment: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.train_epochs < 0 or self.batch_size < 1 or self.sequence_length < 1:
            raise ClfConfigError("train_epochs, batch_size and sequence_length must be positive")
        if len(self.class_weights) != N_CLASSES or min(self.class_weights) <= 0:
            raise ClfConfigError("class_weights must be five positive numbers")


@dataclass
class ClfLogRow:
    epoch: int
    train_loss: float
    # inference-mode accuracy over the real training epochs after this epoch
    train_acc: float
    val_acc: float
    val_mf1: float
    # running accuracy of the augmented, dropout-on mini-batches
    batch_acc: float = float("nan")


@dataclass
class ClfResult:
    model: Classifier
    bank: CheckpointBank
    log: List[ClfLogRow] = field(default_factory=list)


def _batch(es: EpochSet, rows: np.ndarray, cfg: ClfTrainConfig, rng) -> Tuple[np.ndarray, np.ndarray]:
    x = es.samples[rows]
    if cfg.augment:
        shift = es.epoch_length // 2 if cfg.max_shift is None else cfg.max_shift
        shift = min(shift, es.epoch_length - 1)
        x = np.stack([pipeline.signal_augment(seq, shift, rng) for seq in x])
    return x, es.stages[rows]


def train_step(clf: Classifier, opt: Adam, x: np.ndarray, y: np.ndarray, cfg: ClfTrainConfig, rng) -> Tuple[float, int]:
    opt.zero_grad()
    logits, _ = sequence_logits(x, clf, train=True, rng=rng)
    loss = F.weighted_cross_entropy(logits, y, cfg.class_weights)
    loss.backward()
    clip_grad_norm(clf.parameters(), cfg.clip_norm)
    opt.step()
    return float(loss.data), int(np.sum(predict(logits) == y))


def evaluate(clf: Classifier, es: EpochSet, seq_len: int) -> Tuple[float, float]:
    probs = predict_set(clf, es, seq_len)
    real = ~np.isnan(probs[:, 0])
    return accuracy_mf1(es.stages[real], predict(probs[real]))


def _names(m: Module) -> List[str]:
    return [n for n, _ in m.named_parameters()]


def _save_state(out_dir, clf: Classifier, opt: Adam, epoch: int, cfg: ClfTrainConfig, log_rows) -> None:
    arrays = clf.state_dict()
    arrays.update(opt.state_arrays(_names(clf)))
    extra = {"adam_steps": opt.state.step_count, "log": [asdict(r) for r in log_rows], "config": asdict(cfg)}
    ckpt_io.save(os.path.join(out_dir, STATE_FILE), Checkpoint(arrays, epoch=epoch, seed=cfg.seed, extra=extra))


def train_classifier(train: EpochSet, val: EpochSet, config: ClfTrainConfig,
                     arch: Optional[ClassifierArch] = None, out_dir: Optional[str] = None,
                     resume: bool = False, stop_after: Optional[int] = None) -> ClfResult:
    """Train and keep one bank snapshot per training epoch.

    Randomness for training epoch ``e`` comes from (seed, e) only, so a run
    resumed from ``train_state.segk`` replays exactly what an uninterrupted
    run would. ``stop_after`` ends early after that many epochs in this call
    (used to simulate interruption).
    """
    config.validate()
    if len(val) == 0:
        raise ClfConfigError("validation set is empty; checkpoint ranking is undefined")
    if len(train) == 0:
        raise ClfConfigError("training set is empty")
    arch = arch or ClassifierArch(epoch_length=train.epoch_length)
    if arch.epoch_length != train.epoch_length:
        raise ClfConfigError("architecture epoch_length does not match the data")
    clf = Classifier(arch, seeding.rng(config.seed, "clf", "init"))
    opt = Adam(clf.parameters(), lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2)
    bank = CheckpointBank(out_dir)
    result = ClfResult(clf, bank)
    start = 0
    state_path = os.path.join(out_dir, STATE_FILE) if out_dir else None
    if resume and state_path and os.path.exists(state_path):
        ck = ckpt_io.load(state_path)
        clf.load_state_dict({k: v for k, v in ck.arrays.items() if not k.startswith("adam.")})
        opt.load_state_arrays(_names(clf), ck.arrays, int(ck.extra["adam_steps"]))
        result.log = [ClfLogRow(**r) for r in ck.extra["log"]]
        loaded = CheckpointBank.load(out_dir)
        bank.entries = loaded.entries
        bank.truncate(ck.epoch)
        start = ck.epoch + 1
        log.info("resuming classifier training at epoch %d", start)
    elif out_dir:
        os.makedirs(out_dir, exist_ok=True)

    done = 0
    for epoch in range(start, config.train_epochs):
        if stop_after is not None and done >= stop_after:
            break
        rng = seeding.rng(config.seed, "clf", "epoch", epoch)
        seqs = pipeline.training_sequences(train, config.sequence_length, rng, augment=config.augment)
        if not len(seqs):
            raise ClfConfigError("no training sequences; streams are shorter than the sequence length")
        seqs = seqs[rng.permutation(len(seqs))]
        losses, correct, seen = [], 0, 0
        for s in range(0, len(seqs), config.batch_size):
            x, y = _batch(train, seqs[s : s + config.batch_size], config, rng)
            loss, c = train_step(clf, opt, x, y, config, rng)
            losses.append(loss)
            correct += c
            seen += y.size
        train_acc, _ = evaluate(clf, train, config.sequence_length)
        val_acc, val_mf1 = evaluate(clf, val, config.sequence_length)
        row = ClfLogRow(epoch, float(np.mean(losses)), train_acc, val_acc, val_mf1, correct / seen)
        result.log.append(row)
        log.debug("clf epoch %d loss %.4f train_acc %.4f val_acc %.4f val_mf1 %.4f batch_acc %.4f",
                  *asdict(row).values())
        bank.add(epoch, val_acc, val_mf1, clf.state_dict(), extra={"arch": asdict(arch)}, seed=config.seed)
        if out_dir:
            _save_state(out_dir, clf, opt, epoch, config, result.log)
        done += 1
    return result


def arch_from_dict(d: dict) -> ClassifierArch:
    d = dict(d)
    d["filters"] = tuple(d["filters"])
    d["pools"] = tuple(tuple(p) for p in d["pools"])
    return ClassifierArch(**d)


def model_from_params(arch: ClassifierArch, params: Dict[str, np.ndarray]) -> Classifier:
    clf = Classifier(arch, np.random.default_rng(0))
    clf.load_state_dict(params)
    return clf
