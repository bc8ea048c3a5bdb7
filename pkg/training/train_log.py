"""Append-only JSONL training log, one record per epoch."""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import torch
from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)


class EpochRecord(BaseModel):
    stage: str
    epoch: int = Field(ge=1)
    losses: dict[str, float]
    val_metric: str | None = None
    val_score: float | None = None
    val_mae: float | None = None
    extra: dict[str, float] = Field(default_factory=dict)
    wall_clock: float = 0.0
    seed_digest: str
    config_hash: str


def rng_digest(generator: torch.Generator) -> str:
    """Short digest of the data-order generator state at the end of an epoch."""
    return hashlib.sha256(generator.get_state().numpy().tobytes()).hexdigest()[:16]


class TrainLog:
    """
    Per-stage epoch log backed by a JSONL file.

    Epoch indices must increase strictly; every record carries the config hash.
    """

    def __init__(self, path: Path, stage: str, config_hash: str) -> None:
        self.path = Path(path)
        self.stage = stage
        self.config_hash = config_hash
        self.records: list[EpochRecord] = self._read() if self.path.exists() else []

    def _read(self) -> list[EpochRecord]:
        lines = self.path.read_text(encoding="utf-8").splitlines()
        return [EpochRecord.model_validate_json(line) for line in lines if line.strip()]

    @property
    def last_epoch(self) -> int:
        return self.records[-1].epoch if self.records else 0

    def append(self, record: EpochRecord) -> None:
        if record.epoch <= self.last_epoch:
            raise ValueError(f"Epoch {record.epoch} does not follow epoch {self.last_epoch} in {self.path}")
        if record.config_hash != self.config_hash:
            raise ValueError(f"Record config hash {record.config_hash[:12]} does not match log {self.config_hash[:12]}")
        self.records.append(record)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(record.model_dump(mode="json"), sort_keys=True) + "\n")

    def truncate(self, after_epoch: int) -> None:
        """Drop records past ``after_epoch`` (used when resuming from an earlier state)."""
        kept = [r for r in self.records if r.epoch <= after_epoch]
        if len(kept) == len(self.records):
            return
        logger.warning(f"Dropping {len(self.records) - len(kept)} log record(s) past epoch {after_epoch} in {self.path}")
        self.records = kept
        self.path.write_text(
            "".join(json.dumps(r.model_dump(mode="json"), sort_keys=True) + "\n" for r in kept), encoding="utf-8"
        )

    def loss_series(self, key: str) -> list[float]:
        return [r.losses[key] for r in self.records]

    def best(self) -> EpochRecord | None:
        """Record with the lowest validation score; ties resolve to the earliest epoch."""
        scored = [r for r in self.records if r.val_score is not None]
        if not scored:
            return None
        return min(scored, key=lambda r: (r.val_score, r.epoch))
