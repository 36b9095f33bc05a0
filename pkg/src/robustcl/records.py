"""Run records: the full result of one sequential-task experiment."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .errors import ContractError

RECORD_SCHEMA = 1


@dataclass
class RunRecord:
    """Everything one run produced, reproducible from (config, seed).

    ``accuracy_matrix`` is lower-triangular (row t holds accuracies on
    tasks 0..t after finishing task t, in percent). ``wall_clock`` is
    the only field excluded from reproducibility comparisons.
    """

    schema_version: int
    method: str
    seed: int
    config: dict
    effective: dict
    accuracy_matrix: list
    acc: float
    bwt: float | None
    epoch_logs: list
    gpm_ranks: list
    wall_clock: list
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        if doc.get("schema_version") != RECORD_SCHEMA:
            raise ContractError(f"unsupported record schema {doc.get('schema_version')!r}")
        return cls(**doc)

    def comparable(self) -> dict:
        """The record minus timing, for reproducibility checks."""
        doc = self.to_dict()
        doc.pop("wall_clock")
        return doc
