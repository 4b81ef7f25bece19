"""Efficacy metrics and the detectability analyses run on finished federations:
prediction gap, consecutive-round parameter drift, client timing,
communication size and structural update indistinguishability."""

from __future__ import annotations

import csv
import json
import math
import zlib
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .data import Dataset
from .nn import ModelParams, evaluate_accuracy, forward
from .unlearn import CLASS, TASK, ForgetSpec


class ArchitectureMismatch(ValueError):
    pass


class TooFewModels(ValueError):
    pass


class UndefinedRatio(ZeroDivisionError):
    pass


# ---------------------------------------------------------------------------
# accuracy


def evaluate_snapshot(
    model: ModelParams, test: Dataset, spec: Optional[ForgetSpec], num_classes: Sequence[int]
) -> tuple[float, Optional[float]]:
    """(Acc on retained data, Acc_f on forgotten data). Acc_f is None for sample-wise forgetting."""
    if spec is None or spec.mode not in (CLASS, TASK):
        return evaluate_accuracy(model, test.x, test.labels(0), 0), None
    if spec.mode == CLASS:
        forgotten = spec.forgotten_classes(num_classes[0])
        kept = [c for c in range(num_classes[0]) if c not in forgotten]
        y = test.labels(0)
        return (
            evaluate_accuracy(model, test.x, y, 0, kept),
            evaluate_accuracy(model, test.x, y, 0, forgotten),
        )
    kept_tasks = [t for t in range(len(num_classes)) if t != spec.task]
    acc = float(np.mean([evaluate_accuracy(model, test.x, test.labels(t), t) for t in kept_tasks]))
    return acc, evaluate_accuracy(model, test.x, test.labels(spec.task), spec.task)


@dataclass
class MetricsReport:
    acc: float
    acc_f: Optional[float]
    acc_series: list[float] = field(default_factory=list)
    acc_f_series: list[Optional[float]] = field(default_factory=list)
    epsilon: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for v in [self.acc, self.acc_f, *self.acc_series, *self.acc_f_series]:
            if v is not None and not math.isnan(v) and not (0.0 <= v <= 1.0):
                raise ValueError(f"accuracy {v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(**dict(d))


# ---------------------------------------------------------------------------
# prediction gap


def prediction_gap(a: ModelParams, b: ModelParams, x: np.ndarray, task: int = 0, batch_size: int = 1024) -> float:
    """Mean over samples of ||p_a(x) - p_b(x)||_2 on softmax outputs."""
    if a.arch != b.arch:
        raise ArchitectureMismatch("models have different architectures")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("validation set is empty")
    total = 0.0
    for s in range(0, x.shape[0], batch_size):
        _, pa = forward(a, x[s : s + batch_size], task)
        _, pb = forward(b, x[s : s + batch_size], task)
        total += float(np.sum(np.linalg.norm(pa - pb, axis=1)))
    return total / x.shape[0]


# ---------------------------------------------------------------------------
# drift


@dataclass
class DriftSeries:
    mse: np.ndarray
    normalizer: float
    normalized: np.ndarray

    def __len__(self) -> int:
        return int(self.mse.shape[0])


def normalize_series(values: Sequence[float]) -> tuple[np.ndarray, float]:
    v = np.asarray(values, dtype=np.float64)
    peak = float(v.max()) if v.size else 0.0
    if peak <= 0:
        return np.zeros_like(v), 0.0
    return v / peak, peak


def param_mse_drift(models: Sequence[np.ndarray | ModelParams]) -> DriftSeries:
    """MSE_r = mean((theta^{r+1} - theta^r)^2), then divided by its maximum."""
    if len(models) < 2:
        raise TooFewModels("drift needs at least two models")
    thetas = [m.theta if isinstance(m, ModelParams) else np.asarray(m, dtype=np.float64) for m in models]
    d = thetas[0].shape[0]
    if any(t.shape[0] != d for t in thetas):
        raise ArchitectureMismatch("models differ in dimension")
    mse = np.array([float(np.mean((thetas[i + 1] - thetas[i]) ** 2)) for i in range(len(thetas) - 1)])
    normalized, peak = normalize_series(mse)
    return DriftSeries(mse, peak, normalized)


# ---------------------------------------------------------------------------
# communication


def deflate_size(data: bytes, level: int = 9) -> int:
    """Length of the raw DEFLATE stream (no zlib/gzip framing)."""
    comp = zlib.compressobj(level, zlib.DEFLATED, -15)
    return len(comp.compress(data) + comp.flush())


def fedavg_baseline_bytes(d: int) -> int:
    """One uncompressed float32 vector per client per round."""
    return 4 * int(d)


def normalized_size(nbytes: int, d: int) -> float:
    base = fedavg_baseline_bytes(d)
    if base == 0:
        raise UndefinedRatio("baseline is zero for an empty model")
    return nbytes / base


def comm_size(rounds: Iterable[Mapping], d: int) -> list[dict]:
    """Per-round mean raw and compressed update bytes, normalised by 4*d.

    Reads the ``payload`` records of a round log.
    """
    base = fedavg_baseline_bytes(d)
    if base == 0:
        raise UndefinedRatio("baseline is zero for an empty model")
    rows = []
    for rec in rounds:
        payloads = rec["payload"]
        raw = [p["total"] for p in payloads.values()]
        comp = [p["compressed"] for p in payloads.values()]
        rows.append(
            {
                "round": rec["round"],
                "raw_bytes": float(np.mean(raw)),
                "compressed_bytes": float(np.mean(comp)),
                "baseline_bytes": base,
                "normalized_raw": float(np.mean(raw)) / base,
                "normalized_compressed": float(np.mean(comp)) / base,
                "max_normalized_compressed": float(np.max(comp)) / base,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# timing


def timing_report(rounds: Iterable[Mapping]) -> dict:
    """Per-round mean/std client time, plus learn-vs-unlearn means over all updates."""
    per_round = []
    by_phase: dict[str, list[float]] = defaultdict(list)
    for rec in rounds:
        times = rec["client_time"]
        vals = list(times.values())
        per_round.append(
            {"round": rec["round"], "mean": float(np.mean(vals)), "std": float(np.std(vals)), "clients": len(vals)}
        )
        for cid, t in times.items():
            by_phase[rec["phase"][cid]].append(float(t))
    learn = float(np.mean(by_phase["learn"])) if by_phase["learn"] else None
    unlearn = float(np.mean(by_phase["unlearn"])) if by_phase["unlearn"] else None
    diff = None if learn is None or unlearn is None else unlearn - learn
    return {
        "per_round": per_round,
        "learn_mean": learn,
        "unlearn_mean": unlearn,
        "learn_std": float(np.std(by_phase["learn"])) if by_phase["learn"] else None,
        "unlearn_std": float(np.std(by_phase["unlearn"])) if by_phase["unlearn"] else None,
        "unlearn_minus_learn": diff,
    }


# ---------------------------------------------------------------------------
# indistinguishability


@dataclass(frozen=True)
class UpdateRecord:
    """Server-visible shape of one update plus the harness-only ground-truth phase."""

    round: int
    sender: str
    phase: str
    fields: Mapping[str, int]  # field name -> byte length
    mapping_compressed: int


def update_records(rounds: Iterable[Mapping]) -> list[UpdateRecord]:
    out = []
    for rec in rounds:
        for cid, p in rec["payload"].items():
            out.append(UpdateRecord(rec["round"], cid, rec["phase"][cid], dict(p["fields"]), p["mapping_compressed"]))
    return out


@dataclass
class IndistinguishabilityReport:
    schema_identical: bool
    ciphertext_lengths_equal: bool
    key_share_lengths_equal: bool
    mapping_lengths_within_tolerance: bool
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return (
            self.schema_identical
            and self.ciphertext_lengths_equal
            and self.key_share_lengths_equal
            and self.mapping_lengths_within_tolerance
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def indistinguishability_report(records: Iterable[UpdateRecord], mapping_tolerance: float = 0.1) -> IndistinguishabilityReport:
    """Structural comparison of learning and unlearning updates.

    Checks (a) the field schema, (b) exact ciphertext and key-share lengths,
    (c) that mean compressed mapping sizes differ by at most ``mapping_tolerance``
    relative to the learning mean. Streams with only one phase pass trivially.
    """
    by_phase: dict[str, list[UpdateRecord]] = defaultdict(list)
    for r in records:
        by_phase[r.phase].append(r)
    schemas = {tuple(sorted(r.fields)) for rs in by_phase.values() for r in rs}
    ct = {r.fields.get("ciphertexts") for rs in by_phase.values() for r in rs}
    ks = {r.fields.get("key_share") for rs in by_phase.values() for r in rs}
    raw_map = {r.fields.get("mapping") for rs in by_phase.values() for r in rs}
    means = {p: float(np.mean([r.mapping_compressed for r in rs])) for p, rs in by_phase.items()}
    within = True
    rel = 0.0
    if "learn" in means and "unlearn" in means and means["learn"] > 0:
        rel = abs(means["unlearn"] - means["learn"]) / means["learn"]
        within = rel <= mapping_tolerance and len(raw_map) == 1
    details = {
        "counts": {p: len(rs) for p, rs in by_phase.items()},
        "schemas": [list(s) for s in sorted(schemas)],
        "ciphertext_lengths": sorted(x for x in ct if x is not None),
        "key_share_lengths": sorted(x for x in ks if x is not None),
        "mapping_lengths": sorted(x for x in raw_map if x is not None),
        "mapping_compressed_mean": means,
        "mapping_compressed_relative_gap": rel,
        "mapping_tolerance": mapping_tolerance,
    }
    return IndistinguishabilityReport(len(schemas) <= 1, len(ct) <= 1, len(ks) <= 1, within, details)


# ---------------------------------------------------------------------------
# export


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    return path


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def drift_rows(series: DriftSeries) -> list[tuple]:
    # row r is the change made by round r: the models broadcast at the start of rounds r and r+1
    return [(r, repr(float(m)), repr(float(n))) for r, (m, n) in enumerate(zip(series.mse, series.normalized))]
