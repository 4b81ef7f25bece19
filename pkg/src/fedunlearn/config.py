"""Experiment configuration: TOML sections mapped onto frozen dataclasses.

Every section and key is checked; unknown names are rejected so typos fail
loudly. Any value can be overridden from the environment with
``FEDUNLEARN_<SECTION>_<KEY>`` (the value is parsed as a TOML literal, and
falls back to a plain string).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, get_args, get_origin, get_type_hints

import tomli
import tomli_w

from .fedsim import ConfigInvalid, FederationConfig
from .unlearn import MODES, ForgetSpec, LocalTrainConfig, LossWeights, PGDConfig

ENV_PREFIX = "FEDUNLEARN_"
DATA_SOURCES = ("mnist", "idx", "blobs", "bundle")


@dataclass(frozen=True)
class DataSection:
    source: str = "mnist"  # bundled MNIST subset | idx files | synthetic blobs | saved bundle
    path: str = ""
    classes: tuple[int, ...] = (0, 1, 2, 3)
    per_class: int = 0  # 0 keeps every sample
    num_classes: int = 4
    n: int = 6000
    dim: int = 784
    spread: float = 0.15
    test_fraction: float = 0.2
    seed: int = 0
    parity_task: bool = False


@dataclass(frozen=True)
class FederationSection:
    num_clients: int = 10
    rounds: int = 60
    participation: float = 1.0
    kappa: int = 64
    num_unlearn_clients: int = 1
    unlearn_start: int = 40
    unlearn_window: int = 10
    dirichlet_alpha: float = 0.1
    partition_seed: int = 0
    train_seed: int = 0
    strategy: str = "efu"
    hidden: tuple[int, ...] = (128,)


@dataclass(frozen=True)
class ForgetSection:
    enabled: bool = True
    mode: str = "class"
    fraction: float = 0.25
    classes: tuple[int, ...] = ()
    task: int = 0
    seed: int = 0


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 64
    epochs_learn: int = 1
    epochs_unlearn: int = 5


@dataclass(frozen=True)
class PGDSection:
    epsilon: float = 1.0
    alpha: float = 0.25
    steps: int = 10


@dataclass(frozen=True)
class LossSection:
    forget: float = 1.0
    adv: float = 1.0
    drift: float = 1.0


@dataclass(frozen=True)
class CryptoSection:
    backend: str = "mock"
    security_level: int = 256
    f_bits: int = 16
    bound: int = 2 ** 19
    crypto_seed: int = 0
    bsgs_size: int = 2 ** 16


@dataclass(frozen=True)
class RunSection:
    retrain: bool = True
    retrain_seed_b: int = -1  # >= 0 adds a second retrain with this training seed
    check_oracle: bool = False
    save_round_models: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = DataSection()
    federation: FederationSection = FederationSection()
    forget: ForgetSection = ForgetSection()
    train: TrainSection = TrainSection()
    pgd: PGDSection = PGDSection()
    loss: LossSection = LossSection()
    crypto: CryptoSection = CryptoSection()
    run: RunSection = RunSection()

    def validate(self) -> "ExperimentConfig":
        if self.data.source not in DATA_SOURCES:
            raise ConfigInvalid(f"data.source must be one of {DATA_SOURCES}")
        if self.data.source in ("idx", "bundle") and not self.data.path:
            raise ConfigInvalid(f"data.path is required for source {self.data.source!r}")
        if not (0.0 < self.data.test_fraction < 1.0):
            raise ConfigInvalid("data.test_fraction must lie in (0, 1)")
        if self.forget.mode not in MODES:
            raise ConfigInvalid(f"forget.mode must be one of {MODES}")
        try:
            self.federation_config().validate()
        except ConfigInvalid:
            raise
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from None
        return self

    def forget_spec(self) -> Optional[ForgetSpec]:
        f = self.forget
        if not f.enabled:
            return None
        return ForgetSpec(f.mode, f.fraction, f.classes, f.task, f.seed)

    def federation_config(self) -> FederationConfig:
        fed, c = self.federation, self.crypto
        return FederationConfig(
            num_clients=fed.num_clients,
            rounds=fed.rounds,
            participation=fed.participation,
            kappa=fed.kappa,
            num_unlearn_clients=fed.num_unlearn_clients,
            unlearn_start=fed.unlearn_start,
            unlearn_window=fed.unlearn_window,
            forget=self.forget_spec(),
            dirichlet_alpha=fed.dirichlet_alpha,
            partition_seed=fed.partition_seed,
            train_seed=fed.train_seed,
            crypto_seed=c.crypto_seed,
            strategy=fed.strategy,
            f_bits=c.f_bits,
            bound=c.bound,
            security_level=c.security_level,
            backend=c.backend,
            hidden=tuple(fed.hidden),
            train=LocalTrainConfig(**dataclasses.asdict(self.train)),
            pgd=PGDConfig(**dataclasses.asdict(self.pgd)),
            loss_weights=LossWeights(**dataclasses.asdict(self.loss)),
            bsgs_size=c.bsgs_size,
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, federation=replace(self.federation, train_seed=int(seed)))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out


# ---------------------------------------------------------------------------
# parsing


def _coerce(section: str, key: str, value: Any, hint: Any) -> Any:
    where = f"{section}.{key}"
    origin = get_origin(hint)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigInvalid(f"{where} must be a list")
        (inner, _) = get_args(hint)
        return tuple(_coerce(section, key, v, inner) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigInvalid(f"{where} must be true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(f"{where} must be an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(f"{where} must be a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigInvalid(f"{where} must be a string")
        return value
    raise ConfigInvalid(f"{where}: unsupported type")


def from_dict(raw: Mapping[str, Any]) -> ExperimentConfig:
    hints = get_type_hints(ExperimentConfig)
    unknown = set(raw) - set(hints)
    if unknown:
        raise ConfigInvalid(f"unknown section(s): {sorted(unknown)}")
    sections = {}
    for name, cls in hints.items():
        values = raw.get(name, {})
        if not isinstance(values, Mapping):
            raise ConfigInvalid(f"[{name}] must be a table")
        sec_hints = get_type_hints(cls)
        bad = set(values) - set(sec_hints)
        if bad:
            raise ConfigInvalid(f"unknown key(s) in [{name}]: {sorted(bad)}")
        kwargs = {k: _coerce(name, k, v, sec_hints[k]) for k, v in values.items()}
        sections[name] = cls(**kwargs)
    return ExperimentConfig(**sections).validate()


def _parse_env_value(text: str) -> Any:
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_env(raw: dict, environ: Mapping[str, str] | None = None) -> dict:
    """Overlay FEDUNLEARN_<SECTION>_<KEY> variables onto a raw config mapping."""
    environ = os.environ if environ is None else environ
    hints = get_type_hints(ExperimentConfig)
    out = {k: dict(v) for k, v in raw.items()}
    for var, text in environ.items():
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX) :].lower()
        for section in hints:
            if rest.startswith(section + "_"):
                out.setdefault(section, {})[rest[len(section) + 1 :]] = _parse_env_value(text)
                break
        else:
            raise ConfigInvalid(f"{var} does not name a config section")
    return out


def loads(text: str, environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigInvalid(f"not valid TOML: {exc}") from None
    return from_dict(apply_env(raw, environ))


def load(path: str | Path, environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    return loads(text, environ)


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg))
    return path
