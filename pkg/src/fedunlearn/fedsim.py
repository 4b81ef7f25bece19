"""Federation engine: Dirichlet partitioning, the per-round client protocol
(train, cluster, encrypt, key share), server-side secure aggregation and the
plaintext full-retrain counterfactual."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Any, Optional, Sequence

import numpy as np

from . import wclust
from .analysis import deflate_size, evaluate_snapshot
from .crypto.bsgs import BSGSTable
from .crypto.dmcfe import (
    CIPHERTEXT_BYTES,
    PARTIAL_KEY_BYTES,
    SUM,
    Ciphertext,
    ClientSecretKey,
    DecryptionFailure,
    Decryptor,
    EncryptionKey,
    FunctionalDecKey,
    PartialDecKey,
    PublicParams,
    TrustedBootstrap,
    bsgs_table,
    dequantize,
    dkey_comb,
    dkey_share,
    encrypt_vector,
    keygen,
    quantize,
    setup,
)
from .data import Dataset, DatasetBundle
from .nn import Arch, ModelParams, init_model, model_digest
from .unlearn import (
    CLASS,
    SAMPLE,
    TASK,
    ClientSplit,
    ForgetSpec,
    LocalTrainConfig,
    LossWeights,
    PGDConfig,
    UnlearnContext,
    build_context,
    build_forget_sets,
    client_update,
    get_strategy,
    local_train,
)

log = logging.getLogger(__name__)

LEARN, UNLEARN = "learn", "unlearn"
LABEL_BYTES = 8
SENDER_BYTES = 32
HEADER_BYTES = LABEL_BYTES + SENDER_BYTES
TIMING_FIELDS = ("client_time", "server_time")


class DatasetTooSmall(ValueError):
    pass


class ConfigInvalid(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 10
    rounds: int = 100
    participation: float = 0.2
    kappa: int = 64
    num_unlearn_clients: int = 1
    unlearn_start: int = 50
    unlearn_window: int = 10
    forget: Optional[ForgetSpec] = ForgetSpec()
    dirichlet_alpha: float = 0.1
    partition_seed: int = 0
    train_seed: int = 0
    crypto_seed: int = 0
    strategy: str = "efu"
    f_bits: int = 16
    bound: int = 2 ** 19
    security_level: int = 256
    backend: str = "mock"
    hidden: tuple[int, ...] = (256, 128)
    train: LocalTrainConfig = LocalTrainConfig()
    pgd: PGDConfig = PGDConfig()
    loss_weights: LossWeights = LossWeights()
    bsgs_size: int = 2 ** 16

    def validate(self) -> "FederationConfig":
        if self.num_clients < 1:
            raise ConfigInvalid("num_clients must be >= 1")
        if self.rounds < 1:
            raise ConfigInvalid("rounds must be >= 1")
        if not (0.0 < self.participation <= 1.0):
            raise ConfigInvalid("participation must lie in (0, 1]")
        if self.kappa < 1:
            raise ConfigInvalid("kappa must be >= 1")
        if self.forget is not None:
            if not (1 <= self.num_unlearn_clients <= self.num_clients):
                raise ConfigInvalid("num_unlearn_clients must lie in [1, num_clients]")
            if not (0 <= self.unlearn_start < self.rounds):
                raise ConfigInvalid("unlearn_start must lie in [0, rounds)")
            if self.unlearn_window < 1:
                raise ConfigInvalid("unlearn_window must be >= 1")
        if self.dirichlet_alpha <= 0:
            raise ConfigInvalid("dirichlet_alpha must be > 0")
        if self.bsgs_size < 1:
            raise ConfigInvalid("bsgs_size must be >= 1")
        try:
            get_strategy(self.strategy)
        except KeyError as exc:
            raise ConfigInvalid(str(exc)) from None
        return self

    @property
    def participants_per_round(self) -> int:
        return max(1, int(round(self.participation * self.num_clients)))

    def is_unlearning_round(self, r: int) -> bool:
        return self.forget is not None and self.unlearn_start <= r < self.unlearn_start + self.unlearn_window


def client_id(i: int) -> str:
    return f"client-{i:03d}"


def sender_digest(cid: str) -> bytes:
    return hashlib.sha256(cid.encode()).digest()


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# partitioning


def partition_dirichlet(ds: Dataset, num_clients: int, alpha: float, seed: int = 0, max_tries: int = 1000) -> list[Dataset]:
    """Per-class Dirichlet(alpha) allocation; redraws until every client holds a sample."""
    if num_clients < 1:
        raise ValueError("need at least one client")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    n = len(ds)
    if n < num_clients:
        raise DatasetTooSmall(f"{n} samples cannot cover {num_clients} clients")
    labels = ds.labels(0)
    classes = np.unique(labels)
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for i, chunk in enumerate(np.split(idx, cuts)):
                parts[i].append(chunk)
        merged = [np.sort(np.concatenate(p)) for p in parts]
        if all(len(m) > 0 for m in merged):
            return [ds.subset(m) for m in merged]
    raise DatasetTooSmall(f"no allocation with every client non-empty after {max_tries} draws")


# ---------------------------------------------------------------------------
# wire format


@dataclass(frozen=True)
class WireUpdate:
    round: int
    sender: bytes
    ciphertexts: tuple[Ciphertext, ...]
    key_share: PartialDecKey
    mapping: bytes

    def to_bytes(self, pp: PublicParams) -> bytes:
        return (
            self.round.to_bytes(LABEL_BYTES, "big")
            + self.sender
            + b"".join(c.to_bytes(pp) for c in self.ciphertexts)
            + self.key_share.to_bytes(pp)
            + self.mapping
        )

    @classmethod
    def from_bytes(cls, pp: PublicParams, data: bytes, kappa: int) -> "WireUpdate":
        need = HEADER_BYTES + kappa * CIPHERTEXT_BYTES + PARTIAL_KEY_BYTES
        if len(data) < need:
            raise ValueError(f"update shorter than its fixed part ({len(data)} < {need})")
        label = int.from_bytes(data[:LABEL_BYTES], "big")
        sender = bytes(data[LABEL_BYTES:HEADER_BYTES])
        off = HEADER_BYTES
        cts = []
        for _ in range(kappa):
            cts.append(Ciphertext.from_bytes(pp, data[off : off + CIPHERTEXT_BYTES]))
            off += CIPHERTEXT_BYTES
        share = PartialDecKey.from_bytes(pp, data[off : off + PARTIAL_KEY_BYTES])
        off += PARTIAL_KEY_BYTES
        return cls(label, sender, tuple(cts), share, bytes(data[off:]))

    def field_sizes(self) -> dict[str, int]:
        return {
            "header": HEADER_BYTES,
            "ciphertexts": len(self.ciphertexts) * CIPHERTEXT_BYTES,
            "key_share": PARTIAL_KEY_BYTES,
            "mapping": len(self.mapping),
        }


def payload_record(pp: PublicParams, update: WireUpdate) -> dict:
    raw = update.to_bytes(pp)
    return {
        "fields": update.field_sizes(),
        "total": len(raw),
        "compressed": deflate_size(raw),
        "mapping_compressed": deflate_size(update.mapping),
    }


# ---------------------------------------------------------------------------
# clients


@dataclass
class ClientState:
    index: int
    cid: str
    data: Dataset
    split: ClientSplit
    designated: bool
    sk: Optional[ClientSecretKey] = None
    ek: Optional[EncryptionKey] = None
    ctx: Optional[UnlearnContext] = None


@dataclass
class ClientPlan:
    """What one participant does in one round."""

    phase: str
    data: Dataset
    tasks: tuple[int, ...]
    split: Optional[ClientSplit] = None

    @property
    def weight_count(self) -> int:
        return len(self.data)


def _all_tasks(bundle: DatasetBundle) -> tuple[int, ...]:
    return tuple(range(len(bundle.num_classes)))


def plan_for(cfg: FederationConfig, client: ClientState, r: int, bundle: DatasetBundle) -> ClientPlan:
    spec = cfg.forget
    tasks = _all_tasks(bundle)
    if spec is None or r < cfg.unlearn_start:
        return ClientPlan(LEARN, client.data, tasks)
    kept = client.split.retain_tasks if spec.mode == TASK else tasks
    if client.designated and cfg.is_unlearning_round(r) and len(client.split.forget):
        return ClientPlan(UNLEARN, client.data, kept, client.split)
    if spec.mode == SAMPLE and not client.designated:
        return ClientPlan(LEARN, client.data, tasks)
    # forgotten data is gone from here on
    return ClientPlan(LEARN, client.split.retain, kept)


def client_round(
    cfg: FederationConfig,
    pp: PublicParams,
    client: ClientState,
    plan: ClientPlan,
    global_model: ModelParams,
    r: int,
    participants: Sequence[str],
    weight: float,
) -> tuple[WireUpdate, wclust.ClusteredUpdate]:
    """Local update, weighting, clustering, encryption and key share for one client."""
    seed = _seed(cfg.train_seed, r, client.index, 1)
    if plan.phase == UNLEARN:
        theta = client_update(
            global_model, plan.split, client.ctx, cfg.train.epochs_unlearn, cfg.train, seed, cfg.strategy, plan.tasks
        )
    else:
        theta = local_train(global_model, plan.data, cfg.train.epochs_learn, cfg.train, seed, plan.tasks)
    clustered = wclust.cluster(weight * theta, cfg.kappa, seed=_seed(cfg.train_seed, r, client.index, 2))
    cts = encrypt_vector(pp, client.ek, quantize(clustered.centroids, pp).tolist(), r)
    share = dkey_share(pp, client.sk, SUM, r, participants)
    mapping = wclust.encode_mapping(clustered.mapping, cfg.kappa)
    return WireUpdate(r, sender_digest(client.cid), tuple(cts), share, mapping), clustered


# ---------------------------------------------------------------------------
# server


def decrypt_aggregate(
    pp: PublicParams,
    dk: FunctionalDecKey,
    label: int,
    ciphertext_sets: Sequence[Sequence[Ciphertext]],
    mappings: Sequence[np.ndarray],
    table: Optional[BSGSTable] = None,
) -> np.ndarray:
    """For every index j decrypt the tuple (ct_i[P_i[j]])_i and dequantise the sum.

    Indices sharing the same centroid tuple share one decryption.
    """
    if len(ciphertext_sets) != len(mappings) or not mappings:
        raise DecryptionFailure("need one mapping per ciphertext set")
    d = len(mappings[0])
    if any(len(m) != d for m in mappings):
        raise DecryptionFailure("mappings disagree on the model dimension")
    if any(ct.round != label for cts in ciphertext_sets for ct in cts):
        raise DecryptionFailure("ciphertext label does not match the round")
    dec = Decryptor(pp, dk, label, table)
    g = pp.group
    # mixed-radix key per index; tuples are decoded back digit by digit
    radices = [len(cts) for cts in ciphertext_sets]
    key = np.zeros(d, dtype=np.int64)
    mult = 1
    for m, k in zip(mappings, radices):
        key += np.asarray(m, dtype=np.int64) * mult
        mult *= k
    uniq, inverse = np.unique(key, return_inverse=True)
    sums = np.empty(len(uniq), dtype=np.int64)
    for u, kv in enumerate(uniq.tolist()):
        elems = []
        for cts, k in zip(ciphertext_sets, radices):
            elems.append(cts[kv % k].element)
            kv //= k
        sums[u] = dec.decrypt_element(g.g1_sum(elems))
    return dequantize(sums[inverse.ravel()], pp)


def secure_aggregate(
    pp: PublicParams,
    updates: Sequence[WireUpdate],
    participants: Sequence[str],
    label: int,
    table: Optional[BSGSTable] = None,
) -> np.ndarray:
    """Combine the key shares, then decrypt the per-index sums of every update."""
    expected = {sender_digest(c) for c in participants}
    got = [u.sender for u in updates]
    if len(set(got)) != len(got) or not set(got) <= expected:
        raise DecryptionFailure("updates do not come from distinct round participants")
    if any(u.round != label for u in updates):
        raise DecryptionFailure("update label does not match the round")
    dk = dkey_comb(pp, [u.key_share for u in updates], participants)
    maps = []
    for u in updates:
        m, _ = wclust.decode_mapping(u.mapping)
        maps.append(m)
    return decrypt_aggregate(pp, dk, label, [u.ciphertexts for u in updates], maps, table)


def plaintext_fedavg_oracle(
    local_models: Sequence[np.ndarray],
    weights: Sequence[float],
    kappa: int,
    seeds: Sequence[int],
) -> np.ndarray:
    """sum_i expand(cluster(w_i * theta_i)) in the clear, with the clients' clustering seeds."""
    out = np.zeros_like(np.asarray(local_models[0], dtype=np.float64))
    for theta, w, s in zip(local_models, weights, seeds):
        out += wclust.cluster(w * np.asarray(theta, dtype=np.float64), kappa, seed=s).expand()
    return out


# ---------------------------------------------------------------------------
# round loop


@dataclass
class FederationResult:
    final: ModelParams
    rounds: list[dict]
    models: list[np.ndarray] = field(default_factory=list)  # global theta broadcast at the start of each round
    oracle_deviation: list[float] = field(default_factory=list)
    wire: list[tuple[int, str, str, bytes]] = field(default_factory=list)
    designated: tuple[str, ...] = ()
    split_sizes: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return model_digest(self.final)


class RoundLogWriter:
    """Append-only JSON-lines log, one object per round."""

    def __init__(self, path: Optional[str | Path]) -> None:
        self._fh: Optional[IO[str]] = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w")

    def write(self, rec: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_round_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def strip_timing(rec: dict) -> dict:
    return {k: v for k, v in rec.items() if k not in TIMING_FIELDS}


def _nan_to_none(v: Optional[float]) -> Optional[float]:
    return None if v is None or v != v else float(v)


def _prepare_clients(cfg: FederationConfig, bundle: DatasetBundle) -> tuple[list[ClientState], tuple[str, ...]]:
    parts = partition_dirichlet(bundle.train, cfg.num_clients, cfg.dirichlet_alpha, cfg.partition_seed)
    spec = cfg.forget
    if spec is None:
        splits = [ClientSplit(p, Dataset.empty_like(p)) for p in parts]
        designated: list[int] = []
    else:
        splits = build_forget_sets(parts, spec, bundle.num_classes[spec.task if spec.mode == TASK else 0], strict=False)
        sizes = np.array([len(s.forget) for s in splits])
        if spec.mode == SAMPLE:
            rng = np.random.default_rng(_seed(cfg.partition_seed, 7))
            designated = sorted(int(i) for i in rng.choice(cfg.num_clients, cfg.num_unlearn_clients, replace=False))
        else:
            # clients holding the most forgettable data issue the requests
            order = np.lexsort((np.arange(cfg.num_clients), -sizes))
            designated = sorted(int(i) for i in order[: cfg.num_unlearn_clients] if sizes[i] > 0)
            if not designated:
                raise DatasetTooSmall("no client holds data matching the forget specification")
    clients = [
        ClientState(i, client_id(i), parts[i], splits[i], i in designated) for i in range(cfg.num_clients)
    ]
    return clients, tuple(client_id(i) for i in designated)


def _sample_participants(
    cfg: FederationConfig, r: int, eligible: Sequence[int], forced: Sequence[int]
) -> list[int]:
    rng = np.random.default_rng(_seed(cfg.train_seed, r, 0))
    m = max(cfg.participants_per_round, len(forced))
    pool = [i for i in eligible if i not in forced]
    take = min(m - len(forced), len(pool))
    chosen = list(forced) + [int(i) for i in rng.choice(pool, take, replace=False)] if take > 0 else list(forced)
    return sorted(chosen)


def _arch(cfg: FederationConfig, bundle: DatasetBundle) -> Arch:
    return Arch(bundle.input_dim, tuple(cfg.hidden), tuple(bundle.num_classes))


def run_federation(
    cfg: FederationConfig,
    bundle: DatasetBundle,
    log_path: Optional[str | Path] = None,
    check_oracle: bool = False,
    keep_wire: bool = False,
    keep_models: bool = True,
) -> FederationResult:
    """Run every round of the encrypted protocol and return the final global model."""
    cfg.validate()
    pp = setup(cfg.security_level, cfg.num_clients, cfg.f_bits, cfg.bound, cfg.backend)
    table = bsgs_table(pp, cfg.bsgs_size)
    clients, designated = _prepare_clients(cfg, bundle)
    boot = TrustedBootstrap([c.cid for c in clients], seed=cfg.crypto_seed)
    for c in clients:
        c.sk, c.ek = keygen(pp, c.cid, boot)
    spec = cfg.forget

    model = init_model(_arch(cfg, bundle), cfg.train_seed)
    writer = RoundLogWriter(log_path)
    result = FederationResult(model, [], designated=designated)
    result.split_sizes = {
        c.cid: {"data": len(c.data), "retain": len(c.split.retain), "forget": len(c.split.forget)} for c in clients
    }
    try:
        for r in range(cfg.rounds):
            if keep_models:
                result.models.append(model.theta.copy())
            if spec is not None and r == cfg.unlearn_start:
                for c in clients:
                    if c.designated:
                        c.ctx = build_context(
                            model,
                            c.split,
                            bundle.num_classes[c.split.forget_task],
                            cfg.pgd,
                            cfg.loss_weights,
                            _seed(cfg.train_seed, r, c.index, 3),
                        )
            plans = {c.index: plan_for(cfg, c, r, bundle) for c in clients}
            eligible = [i for i, p in plans.items() if p.weight_count > 0]
            forced = [c.index for c in clients if plans[c.index].phase == UNLEARN]
            chosen = _sample_participants(cfg, r, eligible, forced)
            pids = [clients[i].cid for i in chosen]
            total = sum(plans[i].weight_count for i in chosen)
            weights = {i: plans[i].weight_count / total for i in chosen}

            updates, clustered, times, payload = [], {}, {}, {}
            for i in chosen:
                t0 = time.perf_counter()
                upd, cu = client_round(cfg, pp, clients[i], plans[i], model, r, pids, weights[i])
                wire = upd.to_bytes(pp)
                times[clients[i].cid] = time.perf_counter() - t0
                # the server only ever sees the serialized form
                updates.append(WireUpdate.from_bytes(pp, wire, cfg.kappa))
                clustered[i] = cu
                payload[clients[i].cid] = payload_record(pp, upd)
                if keep_wire:
                    result.wire.append((r, clients[i].cid, plans[i].phase, wire))

            t0 = time.perf_counter()
            theta = secure_aggregate(pp, updates, pids, r, table)
            server_time = time.perf_counter() - t0
            if check_oracle:
                oracle = sum(clustered[i].expand() for i in chosen)
                result.oracle_deviation.append(float(np.max(np.abs(theta - oracle))))
            model = model.with_theta(theta)
            acc, acc_f = evaluate_snapshot(model, bundle.test, spec, bundle.num_classes)
            rec = {
                "round": r,
                "participants": pids,
                "phase": {clients[i].cid: plans[i].phase for i in chosen},
                "weights": {clients[i].cid: weights[i] for i in chosen},
                "payload": payload,
                "model_digest": model_digest(model),
                "acc": _nan_to_none(acc),
                "acc_f": _nan_to_none(acc_f),
                "client_time": times,
                "server_time": server_time,
            }
            writer.write(rec)
            result.rounds.append(rec)
            log.info("round %d participants=%s acc=%.4f acc_f=%s", r, pids, acc, acc_f)
    finally:
        writer.close()
    result.final = model
    return result


def full_retrain_baseline(
    cfg: FederationConfig,
    bundle: DatasetBundle,
    log_path: Optional[str | Path] = None,
    train_seed: Optional[int] = None,
    keep_models: bool = False,
) -> FederationResult:
    """Plaintext FedAvg from scratch with the forgotten data removed everywhere it is removed in the main run."""
    if train_seed is not None:
        cfg = replace(cfg, train_seed=train_seed)
    cfg.validate()
    clients, designated = _prepare_clients(cfg, bundle)
    spec = cfg.forget
    all_tasks = _all_tasks(bundle)
    datasets, tasks = [], all_tasks
    for c in clients:
        if spec is None or (spec.mode == SAMPLE and not c.designated):
            datasets.append(c.data)
        else:
            datasets.append(c.split.retain)
    if spec is not None and spec.mode == TASK:
        tasks = tuple(t for t in all_tasks if t != spec.task)

    model = init_model(_arch(cfg, bundle), cfg.train_seed)
    writer = RoundLogWriter(log_path)
    result = FederationResult(model, [], designated=designated)
    eligible = [i for i, ds in enumerate(datasets) if len(ds) > 0]
    try:
        for r in range(cfg.rounds):
            if keep_models:
                result.models.append(model.theta.copy())
            chosen = _sample_participants(cfg, r, eligible, [])
            total = sum(len(datasets[i]) for i in chosen)
            theta = np.zeros(model.dim)
            times = {}
            for i in chosen:
                t0 = time.perf_counter()
                local = local_train(
                    model, datasets[i], cfg.train.epochs_learn, cfg.train, _seed(cfg.train_seed, r, i, 1), tasks
                )
                theta += (len(datasets[i]) / total) * local
                times[clients[i].cid] = time.perf_counter() - t0
            model = model.with_theta(theta)
            acc, acc_f = evaluate_snapshot(model, bundle.test, spec, bundle.num_classes)
            rec = {
                "round": r,
                "participants": [clients[i].cid for i in chosen],
                "phase": {clients[i].cid: LEARN for i in chosen},
                "model_digest": model_digest(model),
                "acc": _nan_to_none(acc),
                "acc_f": _nan_to_none(acc_f),
                "client_time": times,
            }
            writer.write(rec)
            result.rounds.append(rec)
    finally:
        writer.close()
    result.final = model
    return result
