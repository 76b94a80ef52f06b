"""Command-line entry point: ``sleepegan <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import re
import sys
import time
from dataclasses import replace
from typing import List, Optional, Sequence

import numpy as np

from . import classifier as clf_mod
from . import config as cfg_mod
from . import edf, egan, ensemble, pipeline, seeding, synthetic
from .config import ConfigError
from .data import GENERATED, STAGE_NAMES, EpochSet, Stage, StoreError, load_store, save_store
from .metrics import confusion_matrix, metrics

log = logging.getLogger("sleepegan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

CONFIG_ERRORS = (ConfigError, pipeline.PipelineConfigError, egan.GanConfigError, clf_mod.ClfConfigError,
                 ensemble.EnsembleError)
DATA_ERRORS = (edf.EdfError, edf.HypnogramError, edf.EpochConfigError, StoreError, FileNotFoundError)


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def run_dir(args) -> str:
    out = args.out or os.path.join("runs", time.strftime("%Y%m%dT%H%M%SZ", time.gmtime()))
    os.makedirs(out, exist_ok=True)
    return out


def load_config(args) -> cfg_mod.RunConfig:
    overrides = [tuple(item.split("=", 1)) for item in (args.set or [])]
    for o in overrides:
        if len(o) != 2:
            raise ConfigError(f"--set expects key=value, got {'='.join(o)!r}")
    if args.seed is not None:
        overrides.append(("seed", str(args.seed)))
    return cfg_mod.load(args.config, [(k.strip(), v.strip()) for k, v in overrides])


def write_manifest(out: str, command: str, cfg: cfg_mod.RunConfig, extra: Optional[dict] = None,
                   outside: Sequence[str] = ()) -> None:
    files = {}
    for path in outside:
        with open(path, "rb") as fh:
            files[os.path.basename(path)] = hashlib.sha256(fh.read()).hexdigest()
    for root, _, names in os.walk(out):
        for name in names:
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out).replace(os.sep, "/")
            if rel.startswith("manifest") or name.endswith(".tmp"):
                continue
            with open(path, "rb") as fh:
                files[rel] = hashlib.sha256(fh.read()).hexdigest()
    manifest = {"command": command, "config": cfg.as_text().splitlines(), "files": dict(sorted(files.items()))}
    manifest.update(extra or {})
    ensemble.write_json(os.path.join(out, f"manifest_{command}.json"), manifest)


def load_dataset(cfg) -> EpochSet:
    path = cfg.path("data.store")
    if not os.path.exists(path):
        raise FileNotFoundError(f"epoch store {path} not found (run `ingest` or `synth` first)")
    return load_store(path)


def stage_index(name: str) -> int:
    return int(Stage[name])


def fold_plan(cfg, es: EpochSet) -> pipeline.FoldPlan:
    real = es.take(np.flatnonzero(es.sources != GENERATED))
    return pipeline.make_folds(real.subject_ids(), cfg["k_folds"], cfg["val_fraction"],
                               seeding.rng(cfg["seed"], "folds"))


def gan_arch(cfg, epoch_length: int) -> egan.GanArch:
    return egan.GanArch(
        epoch_length=epoch_length, fs=cfg["gan.fs"], noise_dim=cfg["gan.noise_dim"],
        filters=cfg["gan.filters"], hidden=cfg["gan.hidden"],
        d_pools=cfg["gan.d_pools"], g_pools=cfg["gan.g_pools"],
        d_filters=cfg["gan.d_filters"] or None, d_hidden=cfg["gan.d_hidden"],
        minibatch_std=cfg["gan.minibatch_std"],
    )


def gan_config(cfg) -> egan.GanTrainConfig:
    seed = cfg["gan.seed"] if cfg["gan.seed"] is not None else seeding.derive(cfg["seed"], "gan")
    return egan.GanTrainConfig(
        learning_rate=cfg["gan.lr"], d_learning_rate=cfg["gan.d_lr"] or None,
        beta1=cfg["gan.beta1"], beta2=cfg["gan.beta2"],
        batch_size=cfg["gan.batch_size"], train_epochs=cfg["gan.epochs"], noise_dim=cfg["gan.noise_dim"],
        seed=seed, checkpoint_every=cfg["gan.checkpoint_every"],
        target_stage=stage_index(cfg["gan.target_stage"]), instance_noise=cfg["gan.instance_noise"],
        real_label=cfg["gan.real_label"],
    )


def clf_arch(cfg, epoch_length: int) -> clf_mod.ClassifierArch:
    return clf_mod.ClassifierArch(
        epoch_length=epoch_length, fs=cfg["clf.fs"], filters=cfg["clf.filters"], pools=cfg["clf.pools"],
        dropout=cfg["clf.dropout"], hidden=cfg["clf.hidden"],
    )


def clf_config(cfg) -> clf_mod.ClfTrainConfig:
    seed = cfg["clf.seed"] if cfg["clf.seed"] is not None else seeding.derive(cfg["seed"], "clf")
    return clf_mod.ClfTrainConfig(
        learning_rate=cfg["clf.lr"], beta1=cfg["clf.beta1"], beta2=cfg["clf.beta2"],
        train_epochs=cfg["clf.epochs"], batch_size=cfg["clf.batch_size"],
        sequence_length=cfg["clf.sequence_length"] or cfg["sequence_length"],
        class_weights=cfg["clf.weights"], clip_norm=cfg["clf.clip_norm"],
        max_shift=cfg["augment.max_shift"], augment=cfg["augment.enabled"], seed=seed,
    )


def fold_split(cfg, es: EpochSet):
    plan = fold_plan(cfg, es)
    k = cfg["clf.fold"]
    if not 0 <= k < len(plan.folds):
        raise ConfigError(f"clf.fold {k} outside 0..{len(plan.folds) - 1}")
    f = plan.folds[k]
    return es.select_subjects(f.train), es.select_subjects(f.val), es.select_subjects(f.test)


def print_counts(counts: np.ndarray, out=None) -> None:
    out = out or sys.stdout
    total = int(counts.sum())
    print("stage\tcount\tpercent", file=out)
    for name, c in zip(STAGE_NAMES, counts):
        pct = 100.0 * c / total if total else 0.0
        print(f"{name}\t{int(c)}\t{pct:.1f}", file=out)
    print(f"total\t{total}\t100.0", file=out)


# ---------------------------------------------------------------------------
# ingest and inspection
# ---------------------------------------------------------------------------

_SLEEP_EDF = re.compile(r"^(SC4\d\d)(\d)")


def subject_of(filename: str) -> str:
    base = os.path.basename(filename)
    m = _SLEEP_EDF.match(base)
    return m.group(1) if m else base.split("-")[0].split(".")[0]


def find_pairs(directory: str):
    """(psg, hypnogram) pairs matched on the first six characters of the file name."""
    psgs = sorted(glob.glob(os.path.join(directory, "*PSG.edf")))
    hyps = sorted(glob.glob(os.path.join(directory, "*Hypnogram.edf")) +
                  glob.glob(os.path.join(directory, "*Hypnogram.txt")))
    pairs = []
    for p in psgs:
        key = os.path.basename(p)[:6]
        match = [h for h in hyps if os.path.basename(h)[:6] == key]
        if not match:
            log.warning("no hypnogram for %s; skipped", p)
            continue
        pairs.append((p, match[0]))
    return pairs


def recording_epochs(psg: str, hyp: str, channel: str, epoch_seconds: int, trim_minutes: float):
    rec = edf.read_edf_file(psg, channel, subject_of(psg))
    hypno = edf.parse_hypnogram(hyp)
    epochs = edf.segment_epochs(rec, hypno, epoch_seconds)
    return rec, edf.trim_wake(epochs, trim_minutes, epoch_seconds)


def cmd_ingest(args, cfg) -> int:
    directory = cfg.path("data.dir")
    if not directory or not os.path.isdir(directory):
        raise FileNotFoundError(f"data.dir {directory!r} is not a directory")
    pairs = find_pairs(directory)
    if not pairs:
        raise DataError(f"no PSG/hypnogram pairs under {directory}")
    parts: List[EpochSet] = []
    fs_seen = set()
    nights = {}
    for psg, hyp in pairs:
        rec, epochs = recording_epochs(psg, hyp, cfg["data.channel"], cfg["epoch_seconds"],
                                       cfg["data.trim_wake_minutes"])
        if not epochs:
            continue
        fs_seen.add(rec.meta.sampling_rate)
        es = EpochSet.from_epochs(epochs)
        norm, keep = pipeline.normalize_epochs(es.samples)
        es.samples = norm
        es = es.take(np.flatnonzero(keep))
        # later nights of a subject get a disjoint index range so streams never join
        night = nights.get(rec.meta.subject_id, 0)
        nights[rec.meta.subject_id] = night + 1
        es.index = es.index + night * 1_000_000
        parts.append(es)
    if len(fs_seen) != 1:
        raise DataError(f"recordings disagree on sampling rate: {sorted(fs_seen)}")
    store = EpochSet.concat(parts)
    store.meta = {"fs": fs_seen.pop(), "epoch_seconds": cfg["epoch_seconds"], "channel": cfg["data.channel"],
                  "normalized": True, "source": "edf"}
    path = cfg.path("data.store")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_store(path, store)
    write_manifest(run_dir(args), "ingest", cfg, outside=[path])
    print(f"wrote {len(store)} epochs from {len(pairs)} recordings to {path}")
    print_counts(store.class_counts())
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    seed = seeding.derive(cfg["seed"], "synth")
    if cfg["synthetic.kind"] == "spectral":
        es = synthetic.spectral_corpus(cfg["synthetic.subjects"], cfg["synthetic.epochs_per_subject"],
                                       cfg["synthetic.fs"], cfg["epoch_seconds"], cfg["synthetic.noise"], seed)
    else:
        x = synthetic.sinusoid_epochs(cfg["synthetic.n"], cfg["synthetic.fs"], cfg["epoch_seconds"],
                                      cfg["synthetic.freq"], seed=seed)
        n = len(x)
        st = stage_index(cfg["gan.target_stage"])
        # one pseudo-subject per 8 epochs so fold plans have subjects to split
        es = EpochSet(x, np.full(n, st), [f"sin{i // 8:03d}" for i in range(n)], np.zeros(n), np.arange(n) % 8,
                      {"fs": cfg["synthetic.fs"], "epoch_seconds": cfg["epoch_seconds"], "source": "synthetic"})
    path = cfg.path("data.store")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_store(path, es)
    write_manifest(run_dir(args), "synth", cfg, outside=[path])
    print(f"wrote {len(es)} synthetic epochs to {path}")
    print_counts(es.class_counts())
    return EXIT_OK


def cmd_inspect_edf(args, cfg) -> int:
    path = args.path
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} does not exist")
    if os.path.isdir(path):
        pairs = find_pairs(path)
        if not pairs:
            raise DataError(f"no PSG/hypnogram pairs under {path}")
        counts = np.zeros(len(Stage), dtype=np.int64)
        for psg, hyp in pairs:
            _, epochs = recording_epochs(psg, hyp, cfg["data.channel"], cfg["epoch_seconds"],
                                         cfg["data.trim_wake_minutes"])
            counts += np.bincount([int(e.stage) for e in epochs], minlength=len(Stage))
        print(f"recordings\t{len(pairs)}")
        print_counts(counts)
        return EXIT_OK
    with open(path, "rb") as fh:
        buf = fh.read()
    hdr = edf.read_header(buf)
    print(f"version\t{hdr.version}")
    print(f"patient\t{hdr.patient_id}")
    print(f"recording\t{hdr.recording_id}")
    print(f"start\t{hdr.start_date} {hdr.start_time}")
    print(f"edf_plus\t{'yes' if hdr.is_edf_plus else 'no'}")
    print(f"records\t{hdr.n_records} x {hdr.record_duration:g} s")
    print("signal\tlabel\tfs\tphysical\tdigital\tunit")
    for i, s in enumerate(hdr.signals):
        fs = s.samples_per_record / hdr.record_duration if hdr.record_duration else 0.0
        print(f"{i}\t{s.label}\t{fs:g}\t{s.physical_min:g}..{s.physical_max:g}\t"
              f"{s.digital_min}..{s.digital_max}\t{s.physical_dimension}")
    if args.hypnogram:
        _, epochs = recording_epochs(path, args.hypnogram, cfg["data.channel"], cfg["epoch_seconds"],
                                     cfg["data.trim_wake_minutes"])
        print_counts(np.bincount([int(e.stage) for e in epochs], minlength=len(Stage)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# GAN
# ---------------------------------------------------------------------------


def cmd_train_gan(args, cfg) -> int:
    out = run_dir(args)
    es = load_dataset(cfg)
    train, _, _ = fold_split(cfg, es)
    gcfg = gan_config(cfg)
    real = train.samples[(train.stages == gcfg.target_stage) & (train.sources != GENERATED)]
    res = egan.train_egan(real, gcfg, gan_arch(cfg, es.epoch_length), out_dir=os.path.join(out, "gan"),
                          resume=args.resume)
    lines = ["epoch\td_loss\tg_loss\td_acc"]
    lines += [f"{r.epoch}\t{r.d_loss:.6f}\t{r.g_loss:.6f}\t{r.d_acc:.6f}" for r in res.log]
    ensemble.write_text(os.path.join(out, "gan", "train_log.tsv"), "\n".join(lines) + "\n")
    write_manifest(out, "train-gan", cfg)
    print(f"trained GAN for {len(res.log)} epochs on {len(real)} {Stage(gcfg.target_stage).name} epochs")
    return EXIT_OK


def cmd_generate(args, cfg) -> int:
    out = run_dir(args)
    ck = egan.latest_checkpoint(os.path.join(out, "gan"))
    if ck is None:
        raise ConfigError(f"no GAN checkpoint under {out}/gan (run train-gan with the same --out)")
    gen, gcfg = egan.load_generator(ck)
    n = args.n or cfg["gan.n_generate"]
    samples = egan.sample(gen, n, seeding.rng(cfg["seed"], "generate"))
    es = load_dataset(cfg)
    train, _, _ = fold_split(cfg, es)
    real = train.samples[(train.stages == gcfg.target_stage) & (train.sources != GENERATED)]
    gdir = os.path.join(out, "generated")
    os.makedirs(gdir, exist_ok=True)
    st = Stage(gcfg.target_stage)
    gen_set = EpochSet(samples, np.full(n, int(st)), ["__generated__"] * n, np.full(n, GENERATED),
                       np.arange(n), dict(es.meta))
    save_store(os.path.join(gdir, "generated.segd"), gen_set)
    fs = es.meta.get("fs", cfg["gan.fs"])
    rep = egan.diagnostics(real, samples, fs)
    ensemble.write_text(os.path.join(gdir, "diagnostics.tsv"), rep.to_tsv())
    egan.write_traces(gdir, real, samples, fs)
    write_manifest(out, "generate", cfg)
    print(f"generated {n} {st.name} epochs; dominant-frequency JS divergence {rep.js_divergence:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# classifier, cross-validation, sweep
# ---------------------------------------------------------------------------


def cv_settings(cfg, ablation: str, es: EpochSet) -> ensemble.CvSettings:
    return ensemble.CvSettings(
        clf=clf_config(cfg),
        arch=clf_arch(cfg, es.epoch_length),
        ensemble=ensemble.EnsembleConfig(cfg["ensemble.M"], cfg["ensemble.cache_members"]),
        ablation=ablation,
        gan=gan_config(cfg),
        gan_arch=gan_arch(cfg, es.epoch_length),
        rebalance_policy=cfg["rebalance.policy"],
        target_count=cfg["rebalance.target_count"],
        target_stage=stage_index(cfg["gan.target_stage"]),
        seed=cfg["seed"],
    )


def cmd_train_clf(args, cfg) -> int:
    out = run_dir(args)
    es = load_dataset(cfg)
    settings = cv_settings(cfg, args.ablation, es)
    plan = fold_plan(cfg, es)
    k = cfg["clf.fold"]
    if not 0 <= k < len(plan.folds):
        raise ConfigError(f"clf.fold {k} outside 0..{len(plan.folds) - 1}")
    outcome = ensemble.run_fold(es, plan.folds[k], k, settings, os.path.join(out, "clf"), args.resume)
    rows = [("single_best", outcome.single), ("ensemble", outcome.ensemble)]
    ensemble.write_text(os.path.join(out, "clf", "test_report.tsv"), ensemble.format_rows("model", rows))
    write_manifest(out, "train-clf", cfg, {"ablation": args.ablation, "fold": k})
    print(ensemble.format_rows("model", rows), end="")
    return EXIT_OK


def cmd_cv(args, cfg) -> int:
    out = run_dir(args)
    es = load_dataset(cfg)
    settings = cv_settings(cfg, args.ablation, es)
    cv_dir = os.path.join(out, "cv")
    result = ensemble.run_cv(es, fold_plan(cfg, es), settings, cv_dir, jobs=args.jobs, resume=args.resume)
    write_manifest(out, "cv", cfg, {"ablation": args.ablation})
    with open(os.path.join(cv_dir, "cv_report.tsv")) as fh:
        print(fh.read(), end="")
    return EXIT_OK


def cmd_sweep_m(args, cfg) -> int:
    out = run_dir(args)
    cv_dir = os.path.join(out, "cv")
    if not os.path.isdir(cv_dir):
        raise ConfigError(f"no cross-validation results under {cv_dir} (run `cv` with the same --out)")
    caches = ensemble.load_caches(cv_dir)
    rows = ensemble.sensitivity_sweep(caches)
    path = ensemble.write_sweep(out, rows)
    write_manifest(out, "sweep-m", cfg)
    with open(path) as fh:
        print(fh.read(), end="")
    return EXIT_OK


def cmd_config_keys(args, cfg) -> int:
    print(cfg_mod.documented_keys())
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "inspect-edf": cmd_inspect_edf,
    "train-gan": cmd_train_gan,
    "generate": cmd_generate,
    "train-clf": cmd_train_clf,
    "cv": cmd_cv,
    "sweep-m": cmd_sweep_m,
    "config-keys": cmd_config_keys,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="layered key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    common.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    common.add_argument("--ablation", choices=sorted(ensemble.ABLATIONS), default="full",
                        help="naive, egan, ensemble or full")
    common.add_argument("--out", help="run directory (default runs/<UTC timestamp>)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sleepegan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "inspect-edf":
            p.add_argument("path", help="EDF file or directory of PSG/hypnogram pairs")
            p.add_argument("--hypnogram", help="hypnogram for a single PSG file")
        if name == "generate":
            p.add_argument("--n", type=int, help="number of epochs to sample")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except CONFIG_ERRORS as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS + (DataError,) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("runtime failure", exc_info=True)
        print(f"error: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
