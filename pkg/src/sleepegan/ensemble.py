"""Top-M checkpoint ensembles, cross-validation harness and the M sweep."""

from __future__ import annotations

import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import classifier as clf_mod
from . import egan, pipeline, seeding
from .bank import BankEntry, CheckpointBank
from .data import GENERATED, EpochSet, Stage
from .metrics import N_CLASSES, REPORT_COLUMNS, MetricsReport, confusion_matrix, metrics

log = logging.getLogger(__name__)

CACHE_MEMBERS = 10


class EnsembleError(ValueError):
    pass


@dataclass
class EnsembleConfig:
    M: int = 10
    cache_members: int = CACHE_MEMBERS


def select_top_m(bank: Sequence[BankEntry], M: int) -> List[BankEntry]:
    """Highest validation accuracy first; ties by higher MF1, then later epoch."""
    entries = list(bank)
    if M < 1 or M > len(entries):
        raise EnsembleError(f"cannot select {M} members from a bank of {len(entries)}")
    return sorted(entries, key=lambda e: (-e.val_acc, -e.val_mf1, -e.epoch))[:M]


def majority_vote(predictions, probabilities) -> np.ndarray:
    """Modal label per sample; count ties go to the highest mean probability, then lowest index."""
    preds = np.asarray(predictions, dtype=np.int64)
    probs = np.asarray(probabilities, dtype=np.float64)
    if preds.ndim != 2:
        raise EnsembleError("predictions must be [M, N]")
    if probs.shape != preds.shape + (N_CLASSES,):
        raise EnsembleError(f"probabilities must be [M, N, {N_CLASSES}] matching predictions")
    if preds.size and (preds.min() < 0 or preds.max() >= N_CLASSES):
        raise EnsembleError("predicted labels out of range")
    counts = np.zeros((preds.shape[1], N_CLASSES), dtype=np.int64)
    for row in preds:
        counts[np.arange(len(row)), row] += 1
    tied = counts == counts.max(axis=1, keepdims=True)
    score = np.where(tied, probs.mean(axis=0), -np.inf)
    return np.argmax(score, axis=1)


def vote_from_probs(member_probs: np.ndarray) -> np.ndarray:
    member_probs = np.asarray(member_probs)
    return majority_vote(np.argmax(member_probs, axis=-1), member_probs)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def format_rows(label: str, rows: Sequence[Tuple[str, MetricsReport]]) -> str:
    """Tab-separated table with one line per report; values to six decimals."""
    lines = ["\t".join([label] + REPORT_COLUMNS + ["n"])]
    for name, rep in rows:
        lines.append("\t".join([str(name)] + [f"{v:.6f}" for v in rep.row()] + [str(rep.total)]))
    return "\n".join(lines) + "\n"


def report_dict(rep: MetricsReport) -> dict:
    return {
        "acc": rep.acc,
        "mf1": rep.mf1,
        "kappa": rep.kappa,
        "per_class_f1": dict(zip([s.name for s in Stage], rep.per_class_f1)),
        "confusion": np.asarray(rep.confusion).tolist(),
    }


def write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path: str, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# prediction caches
# ---------------------------------------------------------------------------


@dataclass
class PredictionCache:
    """Test-set probabilities of the top-ranked bank members of one fold."""

    members: List[BankEntry]  # in rank order
    probs: np.ndarray  # [K, N, 5]
    truth: np.ndarray  # [N]

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        np.save(os.path.join(directory, "probs.npy"), self.probs)
        np.save(os.path.join(directory, "truth.npy"), self.truth)
        lines = ["rank\tepoch\tval_acc\tval_mf1"]
        for r, e in enumerate(self.members):
            lines.append(f"{r}\t{e.epoch}\t{e.val_acc!r}\t{e.val_mf1!r}")
        write_text(os.path.join(directory, "index.tsv"), "\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory: str) -> "PredictionCache":
        probs = np.load(os.path.join(directory, "probs.npy"))
        truth = np.load(os.path.join(directory, "truth.npy"))
        with open(os.path.join(directory, "index.tsv")) as fh:
            rows = [line.split("\t") for line in fh.read().splitlines()[1:] if line]
        members = [BankEntry(int(ep), float(a), float(f)) for _, ep, a, f in rows]
        if len(members) != len(probs):
            raise EnsembleError(f"{directory}: index lists {len(members)} members, arrays hold {len(probs)}")
        return cls(members, probs, truth)

    def vote(self, M: int) -> np.ndarray:
        if M < 1 or M > len(self.members):
            raise EnsembleError(f"cache holds {len(self.members)} members, {M} requested")
        return vote_from_probs(self.probs[:M])


def build_cache(bank: CheckpointBank, arch: clf_mod.ClassifierArch, test: EpochSet, seq_len: int,
                n_members: int) -> PredictionCache:
    members = select_top_m(bank.entries, min(n_members, len(bank)))
    real = np.flatnonzero(test.sources != GENERATED)
    test = test.take(real)
    probs = []
    for e in members:
        model = clf_mod.model_from_params(arch, bank.params(e))
        probs.append(clf_mod.predict_set(model, test, seq_len))
    return PredictionCache(members, np.stack(probs), test.stages.copy())


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

ABLATIONS = {
    "naive": (False, False),
    "egan": (True, False),
    "ensemble": (False, True),
    "full": (True, True),
}


@dataclass
class CvSettings:
    clf: clf_mod.ClfTrainConfig
    arch: clf_mod.ClassifierArch
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    ablation: str = "full"
    gan: Optional[egan.GanTrainConfig] = None
    gan_arch: Optional[egan.GanArch] = None
    rebalance_policy: str = "second_smallest"
    target_count: Optional[int] = None
    target_stage: Optional[int] = int(Stage.N1)
    seed: int = 0

    @property
    def use_gan(self) -> bool:
        return ABLATIONS[self.ablation][0]

    @property
    def use_ensemble(self) -> bool:
        return ABLATIONS[self.ablation][1]


@dataclass
class FoldOutcome:
    fold: int
    truth: np.ndarray
    ensemble_pred: np.ndarray
    single_pred: np.ndarray
    ensemble: MetricsReport
    single: MetricsReport
    cache: PredictionCache
    n_generated: int = 0


@dataclass
class CvResult:
    folds: List[FoldOutcome]
    pooled: MetricsReport
    pooled_single: MetricsReport
    settings: CvSettings


def _fold_rebalance(train: EpochSet, s: CvSettings, fold_seed: int, gan_dir: Optional[str],
                    resume: bool = False) -> EpochSet:
    if not s.use_gan:
        return train
    plan = pipeline.rebalance_plan(train.class_counts(), s.rebalance_policy, s.target_count, s.target_stage)
    if not any(plan.values()):
        return train
    stage, _ = next(iter(plan.items()))
    real = train.samples[(train.stages == stage) & (train.sources != GENERATED)]
    if s.gan is None:
        raise EnsembleError("ablation needs a GAN but no GAN config was given")
    gcfg = replace(s.gan, seed=seeding.derive(fold_seed, "gan"))
    gres = egan.train_egan(real, gcfg, s.gan_arch, out_dir=gan_dir, resume=resume)
    return pipeline.rebalance(train, egan.generator_fn(gres.generator), s.rebalance_policy, s.target_count,
                              stage, rng=seeding.rng(fold_seed, "generate"))


def run_fold(dataset: EpochSet, fold: pipeline.Fold, index: int, s: CvSettings,
             out_dir: Optional[str] = None, resume: bool = False) -> FoldOutcome:
    if not fold.test:
        raise EnsembleError(f"fold {index} has an empty test set")
    fold_seed = seeding.derive(s.seed, "fold", index)
    fdir = os.path.join(out_dir, f"fold_{index:02d}") if out_dir else None
    train = dataset.select_subjects(fold.train)
    val = dataset.select_subjects(fold.val)
    test = dataset.select_subjects(fold.test)
    train = _fold_rebalance(train, s, fold_seed, os.path.join(fdir, "gan") if fdir else None, resume)
    n_gen = int(np.sum(train.sources == GENERATED))
    cfg = replace(s.clf, seed=seeding.derive(fold_seed, "clf"))
    res = clf_mod.train_classifier(train, val, cfg, s.arch, os.path.join(fdir, "bank") if fdir else None, resume)
    M = s.ensemble.M if s.use_ensemble else 1
    cache = build_cache(res.bank, s.arch, test, cfg.sequence_length, max(M, s.ensemble.cache_members))
    if fdir:
        cache.save(os.path.join(fdir, "cache"))
    ens = cache.vote(M)
    single = cache.vote(1)
    return FoldOutcome(index, cache.truth, ens, single, metrics(confusion_matrix(cache.truth, ens)),
                       metrics(confusion_matrix(cache.truth, single)), cache, n_gen)


def _run_fold_job(args):
    return run_fold(*args)


def run_cv(dataset: EpochSet, plan: pipeline.FoldPlan, settings: CvSettings, out_dir: Optional[str] = None,
           jobs: int = 1, resume: bool = False) -> CvResult:
    """Train and evaluate every fold, then pool all test predictions."""
    plan.check_leakage()
    if settings.ablation not in ABLATIONS:
        raise EnsembleError(f"unknown ablation {settings.ablation!r}")
    args = [(dataset, f, i, settings, out_dir, resume) for i, f in enumerate(plan.folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outcomes = list(ex.map(_run_fold_job, args))
    else:
        outcomes = [run_fold(*a) for a in args]
    truth = np.concatenate([o.truth for o in outcomes])
    pooled = metrics(confusion_matrix(truth, np.concatenate([o.ensemble_pred for o in outcomes])))
    pooled_single = metrics(confusion_matrix(truth, np.concatenate([o.single_pred for o in outcomes])))
    result = CvResult(outcomes, pooled, pooled_single, settings)
    if out_dir:
        write_cv_reports(out_dir, result)
    return result


def write_cv_reports(out_dir: str, result: CvResult) -> None:
    os.makedirs(out_dir, exist_ok=True)
    rows = [(f"fold_{o.fold:02d}", o.ensemble) for o in result.folds] + [("pooled", result.pooled)]
    write_text(os.path.join(out_dir, "cv_report.tsv"), format_rows("fold", rows))
    s = result.settings
    write_json(os.path.join(out_dir, "cv_report.json"), {
        "ablation": s.ablation,
        "M": s.ensemble.M if s.use_ensemble else 1,
        "seed": s.seed,
        "pooled": report_dict(result.pooled),
        "pooled_single_best": report_dict(result.pooled_single),
        "folds": [
            {"fold": o.fold, "n_test": int(len(o.truth)), "n_generated": o.n_generated,
             "ensemble": report_dict(o.ensemble), "single_best": report_dict(o.single)}
            for o in result.folds
        ],
    })


# ---------------------------------------------------------------------------
# M sensitivity
# ---------------------------------------------------------------------------

SWEEP_MS = tuple(range(5, 11))


def sensitivity_sweep(caches: Sequence[PredictionCache], Ms: Sequence[int] = SWEEP_MS) -> List[Tuple[int, MetricsReport]]:
    """One pooled report per ensemble size, reusing cached member predictions."""
    if not caches:
        raise EnsembleError("no prediction caches")
    need = max(Ms)
    for c in caches:
        if len(c.members) < need:
            raise EnsembleError(f"cache holds {len(c.members)} members, sweep needs {need}")
    truth = np.concatenate([c.truth for c in caches])
    rows = []
    for M in Ms:
        pred = np.concatenate([c.vote(M) for c in caches])
        rows.append((M, metrics(confusion_matrix(truth, pred))))
    return rows


def vote_simulation_spread(caches: Sequence[PredictionCache], Ms: Sequence[int] = SWEEP_MS) -> float:
    """Accuracy range over every member subset of each size in ``Ms``.

    Subsets are drawn from the cached members by index and applied to every
    fold's cache alike, so each simulated ensemble is pooled like a sweep row.
    """
    k = min(len(c.members) for c in caches)
    truth = np.concatenate([c.truth for c in caches])
    accs = []
    for M in Ms:
        for subset in itertools.combinations(range(k), M):
            idx = list(subset)
            pred = np.concatenate([vote_from_probs(c.probs[idx]) for c in caches])
            accs.append(float(np.mean(pred == truth)))
    return max(accs) - min(accs)


def write_sweep(out_dir: str, rows: Sequence[Tuple[int, MetricsReport]]) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "sweep_m.tsv")
    write_text(path, format_rows("M", [(f"M={m}", r) for m, r in rows]))
    write_json(os.path.join(out_dir, "sweep_m.json"), {str(m): report_dict(r) for m, r in rows})
    return path


def load_caches(cv_dir: str) -> List[PredictionCache]:
    dirs = sorted(d for d in os.listdir(cv_dir) if d.startswith("fold_"))
    caches = [PredictionCache.load(os.path.join(cv_dir, d, "cache")) for d in dirs]
    if not caches:
        raise EnsembleError(f"no fold caches under {cv_dir}")
    return caches
