"""Per-epoch classifier snapshots with their validation scores."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .autodiff import Checkpoint
from .autodiff import checkpoint as ckpt_io

INDEX_NAME = "index.tsv"
INDEX_HEADER = "epoch\tval_acc\tval_mf1\tfile"


@dataclass(frozen=True)
class BankEntry:
    epoch: int
    val_acc: float
    val_mf1: float
    file: str = ""


class CheckpointBank:
    """Snapshots kept either in memory or as SEGK files plus ``index.tsv``.

    Entries are unique by epoch and kept ordered by epoch.
    """

    def __init__(self, directory: Optional[str] = None):
        self.directory = directory
        self.entries: List[BankEntry] = []
        self._memory: Dict[int, Dict[str, np.ndarray]] = {}
        self._extra: Dict[int, dict] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def add(self, epoch: int, val_acc: float, val_mf1: float, params: Dict[str, np.ndarray],
            extra: Optional[dict] = None, seed: int = 0) -> BankEntry:
        if any(e.epoch == epoch for e in self.entries):
            raise ValueError(f"epoch {epoch} already in bank")
        if self.entries and epoch < self.entries[-1].epoch:
            raise ValueError("bank entries must be added in epoch order")
        fname = ""
        if self.directory:
            os.makedirs(self.directory, exist_ok=True)
            fname = f"clf_epoch{epoch:04d}.segk"
            ck = Checkpoint(params, epoch=epoch, val_acc=val_acc, val_mf1=val_mf1, seed=seed,
                            extra=dict(extra or {}))
            ckpt_io.save(os.path.join(self.directory, fname), ck)
        else:
            self._memory[epoch] = {k: v.copy() for k, v in params.items()}
            self._extra[epoch] = dict(extra or {})
        entry = BankEntry(int(epoch), float(val_acc), float(val_mf1), fname)
        self.entries.append(entry)
        if self.directory:
            self.write_index()
        return entry

    def params(self, entry: BankEntry) -> Dict[str, np.ndarray]:
        if entry.file:
            return load_entry(self.directory, entry).arrays
        return self._memory[entry.epoch]

    def write_index(self) -> None:
        lines = [INDEX_HEADER]
        for e in self.entries:
            lines.append(f"{e.epoch}\t{e.val_acc!r}\t{e.val_mf1!r}\t{e.file}")
        path = os.path.join(self.directory, INDEX_NAME)
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)

    def truncate(self, last_epoch: int) -> None:
        """Forget entries after ``last_epoch`` (used when resuming)."""
        self.entries = [e for e in self.entries if e.epoch <= last_epoch]
        if self.directory:
            self.write_index()

    @classmethod
    def load(cls, directory: str) -> "CheckpointBank":
        bank = cls(directory)
        path = os.path.join(directory, INDEX_NAME)
        if not os.path.exists(path):
            return bank
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != INDEX_HEADER:
            raise ValueError(f"{path}: bad bank index header")
        for line in lines[1:]:
            if not line:
                continue
            ep, acc, mf1, fname = line.split("\t")
            bank.entries.append(BankEntry(int(ep), float(acc), float(mf1), fname))
        return bank


def load_entry(directory: str, entry: BankEntry) -> Checkpoint:
    ck = ckpt_io.load(os.path.join(directory, entry.file))
    if ck.epoch != entry.epoch:
        raise ValueError(f"{entry.file}: stored epoch {ck.epoch} does not match index {entry.epoch}")
    return ck
