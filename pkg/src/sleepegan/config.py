"""Layered ``key = value`` run configuration.

One setting per line, ``#`` starts a comment. ``include = other.cfg`` pulls
in another file (relative to the including file) at that point; later lines
override earlier ones. Every key must be declared in :data:`SCHEMA`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none") else int(text)


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _pairs(text: str) -> Tuple[Tuple[int, int], ...]:
    # "8x8, 4x4, 2x2"
    out = []
    for item in text.split(","):
        w, s = item.strip().lower().split("x")
        out.append((int(w), int(s)))
    return tuple(out)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        v = text.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v

    return parse


def _str(text: str) -> str:
    return text.strip()


# key -> (parser, default, description)
SCHEMA: Dict[str, Tuple[Callable[[str], Any], Any, str]] = {
    "seed": (int, 0, "run seed; every component seed derives from it"),
    # data
    "data.dir": (_str, "", "directory scanned by ingest for *PSG.edf / *Hypnogram.edf pairs"),
    "data.channel": (_str, "EEG Fpz-Cz", "signal label to extract"),
    "data.store": (_str, "epochs.segd", "epoch store read by training commands (relative to the config file)"),
    "data.trim_wake_minutes": (float, 30.0, "wake kept before sleep onset and after sleep end"),
    "epoch_seconds": (int, 30, "epoch duration in seconds"),
    # synthetic corpora
    "synthetic.kind": (_choice("spectral", "sinusoid"), "spectral", "desk corpus generated by `synth`"),
    "synthetic.subjects": (int, 200, "spectral corpus: number of subjects"),
    "synthetic.epochs_per_subject": (int, 40, "spectral corpus: epochs per subject"),
    "synthetic.fs": (int, 64, "sampling rate of the synthetic corpus"),
    "synthetic.noise": (float, 0.3, "spectral corpus: additive noise level"),
    "synthetic.n": (int, 256, "sinusoid corpus: number of epochs"),
    "synthetic.freq": (float, 4.0, "sinusoid corpus: frequency in Hz"),
    # pipeline
    "sequence_length": (int, 20, "epochs per LSTM sequence"),
    "k_folds": (int, 20, "cross-validation folds"),
    "val_fraction": (float, 0.1, "share of training subjects held out for validation"),
    "rebalance.policy": (_choice("second_smallest", "target_count", "none"), "second_smallest",
                         "how far the minority class is topped up"),
    "rebalance.target_count": (_opt_int, None, "explicit minority target; overrides the policy"),
    "augment.max_shift": (_opt_int, None, "signal augmentation shift bound in samples (default half an epoch)"),
    "augment.enabled": (_bool, True, "signal and sequence augmentation on/off"),
    # gan
    "gan.noise_dim": (int, 100, "generator noise size"),
    "gan.lr": (float, 2e-4, "Adam learning rate"),
    "gan.d_lr": (float, 0.0, "discriminator learning rate (0 uses gan.lr)"),
    "gan.beta1": (float, 0.5, "Adam beta1"),
    "gan.beta2": (float, 0.999, "Adam beta2"),
    "gan.batch_size": (int, 16, "mini-batch size"),
    "gan.epochs": (int, 660, "training epochs"),
    "gan.seed": (_opt_int, None, "GAN seed (default: derived from seed)"),
    "gan.target_stage": (_choice("W", "N1", "N2", "N3", "REM"), "N1", "stage the GAN synthesizes"),
    "gan.fs": (int, 100, "sampling rate the conv sizing derives from"),
    "gan.filters": (_ints, (64, 64, 128, 128), "generator conv filters"),
    "gan.d_filters": (_ints, (), "discriminator conv filters (empty mirrors the generator)"),
    "gan.hidden": (int, 128, "LSTM hidden size"),
    "gan.d_hidden": (_opt_int, None, "discriminator LSTM size (default mirrors)"),
    "gan.d_pools": (_ints, (4, 1, 1, 2), "discriminator pool window after each conv block"),
    "gan.g_pools": (_ints, (1, 1, 1, 1), "generator pool window after each conv block"),
    "gan.minibatch_std": (_bool, False, "feed the batch feature spread to the discriminator head"),
    "gan.instance_noise": (float, 0.0, "std of noise added to discriminator inputs while training"),
    "gan.real_label": (float, 1.0, "discriminator target for real epochs (below 1 smooths labels)"),
    "gan.checkpoint_every": (int, 10, "epochs between GAN checkpoints"),
    "gan.n_generate": (int, 64, "epochs sampled by `generate`"),
    # classifier
    "clf.lr": (float, 1e-4, "Adam learning rate"),
    "clf.beta1": (float, 0.9, "Adam beta1"),
    "clf.beta2": (float, 0.999, "Adam beta2"),
    "clf.epochs": (int, 200, "training epochs"),
    "clf.batch_size": (int, 8, "sequences per mini-batch"),
    "clf.sequence_length": (_opt_int, None, "overrides sequence_length for the classifier"),
    "clf.weights": (_floats, (1.0, 1.5, 1.0, 1.0, 1.0), "class weights W,N1,N2,N3,REM"),
    "clf.clip_norm": (float, 5.0, "global gradient-norm clip"),
    "clf.seed": (_opt_int, None, "classifier seed (default: derived from seed)"),
    "clf.fs": (int, 100, "sampling rate the conv sizing derives from"),
    "clf.filters": (_ints, (128, 128, 128, 256, 256), "conv filters, blocks 1..5"),
    "clf.pools": (_pairs, ((8, 8), (4, 4), (2, 2)), "pool window x stride after blocks 1, 3, 5"),
    "clf.hidden": (int, 128, "LSTM hidden size"),
    "clf.dropout": (float, 0.5, "dropout rate"),
    "clf.fold": (int, 0, "fold used by `train-clf`"),
    # ensemble
    "ensemble.M": (int, 10, "ensemble size"),
    "ensemble.cache_members": (int, 10, "members whose test predictions are cached"),
}


@dataclass
class RunConfig:
    values: Dict[str, Any]
    sources: List[str]
    base_dir: str

    def __getitem__(self, key: str):
        return self.values[key]

    def path(self, key: str) -> str:
        p = self.values[key]
        return p if not p or os.path.isabs(p) else os.path.normpath(os.path.join(self.base_dir, p))

    def as_text(self) -> str:
        """Fully resolved settings, one per line, in schema order."""
        lines = []
        for key, (_, default, _) in SCHEMA.items():
            lines.append(f"{key} = {format_value(self.values[key])}")
        return "\n".join(lines) + "\n"


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ", ".join(f"{a}x{b}" for a, b in v)
        return ", ".join(str(x) for x in v)
    return str(v)


def _read(path: str, seen: Tuple[str, ...], raw: Dict[str, Tuple[str, str]], sources: List[str]) -> None:
    real = os.path.realpath(path)
    if real in seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    sources.append(path)
    for no, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{no}: expected 'key = value'")
        key, value = (part.strip() for part in text.split("=", 1))
        if key == "include":
            _read(os.path.join(os.path.dirname(path), value), seen + (real,), raw, sources)
            continue
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{no}: unknown key {key!r}")
        raw[key] = (value, f"{path}:{no}")


def parse_items(raw: Dict[str, Tuple[str, str]]) -> Dict[str, Any]:
    values = {k: default for k, (_, default, _) in SCHEMA.items()}
    for key, (text, where) in raw.items():
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(text)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from None
    return values


def load(path: Optional[str], overrides: Iterable[Tuple[str, str]] = ()) -> RunConfig:
    raw: Dict[str, Tuple[str, str]] = {}
    sources: List[str] = []
    if path:
        _read(path, (), raw, sources)
    for key, value in overrides:
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        raw[key] = (value, "command line")
    values = parse_items(raw)
    validate(values)
    base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
    return RunConfig(values, sources, base)


def validate(v: Dict[str, Any]) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(v["epoch_seconds"] > 0, "epoch_seconds must be positive")
    need(v["sequence_length"] > 0, "sequence_length must be positive")
    need(v["k_folds"] >= 2, "k_folds must be at least 2")
    need(0 <= v["val_fraction"] < 1, "val_fraction must be in [0, 1)")
    need(v["rebalance.policy"] != "target_count" or v["rebalance.target_count"] is not None,
         "rebalance.policy = target_count needs rebalance.target_count")
    need(len(v["clf.weights"]) == 5 and min(v["clf.weights"]) > 0, "clf.weights needs five positive numbers")
    need(len(v["clf.filters"]) == 5, "clf.filters needs five values")
    need(len(v["clf.pools"]) == 3, "clf.pools needs three window x stride pairs")
    need(len(v["gan.filters"]) == 4, "gan.filters needs four values")
    need(len(v["gan.d_pools"]) == 4, "gan.d_pools needs four values")
    need(len(v["gan.g_pools"]) == 4, "gan.g_pools needs four values")
    need(len(v["gan.d_filters"]) in (0, 4), "gan.d_filters needs four values or none")
    need(1 <= v["ensemble.M"] <= v["ensemble.cache_members"] or v["ensemble.M"] == 1,
         "ensemble.M must lie in 1..ensemble.cache_members")
    need(0.5 < v["gan.real_label"] <= 1.0, "gan.real_label must lie in (0.5, 1]")
    for key in ("gan.lr", "clf.lr", "gan.batch_size", "clf.batch_size"):
        need(v[key] > 0, f"{key} must be positive")
    need(v["gan.epochs"] >= 0 and v["clf.epochs"] >= 0, "epoch counts must be non-negative")


def documented_keys() -> str:
    return "\n".join(f"{k}\t{format_value(d)}\t{doc}" for k, (_, d, doc) in SCHEMA.items())
