import json
from configparser import ConfigParser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

from core.errors import ConfigError
from model import Hyperparams


@dataclass
class SpectralConfig:
    num_eigs: int = 100
    dense_threshold: int = 2000
    shift: float = -0.01
    max_iter: int = 5000
    cot_clamp: float = 1e4
    allow_disconnected: bool = False
    target_area: float = 1e6  # 0 keeps native scale


@dataclass
class SignatureConfig:
    wks_energies: int = 100
    wks_variance: float = 6.0
    sihks_base: float = 2.0
    sihks_tau_min: float = 1.0
    sihks_tau_max: float = 25.0
    sihks_tau_step: float = 1.0 / 16.0
    sihks_dim: int = 50
    sihks_reference_area: float = 1e6  # 0 samples raw times
    shapedna_dim: int = 40
    shapedna_normalization: str = "area"  # area or firstEigenvalue


@dataclass
class CodingConfig:
    vocab_size: int = 64
    vocab_max_rows: int = 100_000
    assignment: str = "hard"  # hard or soft
    soft_sigma: float = 1.0
    pca_dim: int = 30


@dataclass
class MetricConfig:
    tau: float = 2.0
    rho: float = 4.0
    beta: float = 0.1
    lam: Tuple[float, ...] = (0.01,)
    eps: float = 1e-3
    learning_rate: float = 1e-2
    max_iters: int = 300
    tol: float = 1e-6
    max_halvings: int = 20
    per_class_cap: int = 0  # 0 means uncapped
    neg_ratio: float = 1.0
    standardize: bool = True

    def hyperparams(self, num_channels: int) -> Hyperparams:
        lam = tuple(self.lam)
        if len(lam) == 1:
            lam = lam * num_channels
        if len(lam) != num_channels:
            raise ConfigError(
                f"metric.lam has {len(lam)} values for {num_channels} channels"
            )
        return Hyperparams(
            tau=self.tau,
            rho=self.rho,
            beta=self.beta,
            lam=lam,
            eps=self.eps,
            learning_rate=self.learning_rate,
            max_iters=self.max_iters,
            tol=self.tol,
            max_halvings=self.max_halvings,
            standardize=self.standardize,
        )


@dataclass
class EvalConfig:
    mode: str = "test"  # test or full
    aggregation: str = "sum"  # sum or channel
    e_depth: int = 32
    baselines: bool = True


@dataclass
class RunSettings:
    seed: int = 0
    train_fraction: float = 0.6
    repeats: int = 1
    workers: int = 1
    cache_dir: str = ".cache"
    runs_dir: str = "runs"
    max_failure_rate: float = 0.05


@dataclass
class RunConfig:
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    signatures: SignatureConfig = field(default_factory=SignatureConfig)
    coding: CodingConfig = field(default_factory=CodingConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def to_dict(self) -> Dict[str, dict]:
        return asdict(self)

    def validate(self) -> "RunConfig":
        """Check every module's preconditions before any work starts."""
        sp, sg, cd, mt, ev, rn = (
            self.spectral,
            self.signatures,
            self.coding,
            self.metric,
            self.eval,
            self.run,
        )
        checks = [
            (sp.num_eigs >= 2, "spectral.num_eigs must be >= 2"),
            (sp.cot_clamp > 0, "spectral.cot_clamp must be positive"),
            (sp.target_area >= 0, "spectral.target_area must be >= 0"),
            (sp.max_iter > 0, "spectral.max_iter must be positive"),
            (sg.wks_energies >= 2, "signatures.wks_energies must be >= 2"),
            (sg.wks_variance > 0, "signatures.wks_variance must be positive"),
            (sg.sihks_base > 1, "signatures.sihks_base must be > 1"),
            (sg.sihks_tau_step > 0, "signatures.sihks_tau_step must be positive"),
            (
                sg.sihks_tau_max > sg.sihks_tau_min,
                "signatures.sihks_tau_max must exceed sihks_tau_min",
            ),
            (sg.sihks_dim >= 1, "signatures.sihks_dim must be >= 1"),
            (sg.sihks_reference_area >= 0, "signatures.sihks_reference_area must be >= 0"),
            (
                sg.shapedna_dim <= sp.num_eigs,
                "signatures.shapedna_dim cannot exceed spectral.num_eigs",
            ),
            (
                sg.shapedna_normalization in ("area", "firstEigenvalue"),
                "signatures.shapedna_normalization must be area or firstEigenvalue",
            ),
            (cd.vocab_size >= 2, "coding.vocab_size must be >= 2"),
            (cd.assignment in ("hard", "soft"), "coding.assignment must be hard or soft"),
            (cd.soft_sigma > 0, "coding.soft_sigma must be positive"),
            (cd.pca_dim >= 1, "coding.pca_dim must be >= 1"),
            (mt.tau > 1, "metric.tau must be > 1"),
            (mt.rho > 0, "metric.rho must be positive"),
            (mt.beta >= 0, "metric.beta must be >= 0"),
            (all(v >= 0 for v in mt.lam), "metric.lam must be >= 0"),
            (mt.eps > 0, "metric.eps must be positive"),
            (mt.learning_rate > 0, "metric.learning_rate must be positive"),
            (mt.max_iters >= 1, "metric.max_iters must be >= 1"),
            (mt.tol > 0, "metric.tol must be positive"),
            (mt.per_class_cap >= 0, "metric.per_class_cap must be >= 0"),
            (mt.neg_ratio >= 0, "metric.neg_ratio must be >= 0"),
            (ev.mode in ("test", "full"), "eval.mode must be test or full"),
            (ev.aggregation in ("sum", "channel"), "eval.aggregation must be sum or channel"),
            (ev.e_depth >= 1, "eval.e_depth must be >= 1"),
            (0 < rn.train_fraction < 1, "run.train_fraction must be in (0, 1)"),
            (rn.repeats >= 1, "run.repeats must be >= 1"),
            (rn.workers >= 1, "run.workers must be >= 1"),
            (0 <= rn.max_failure_rate <= 1, "run.max_failure_rate must be in [0, 1]"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message, stage="config")
        return self


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}


def _coerce(raw: str, default, key: str):
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            text = text.strip("[]()")
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}", stage="config")
    return text


class ConfigManager:
    def __init__(self, repo_path: Path) -> None:
        self.repo_path = Path(repo_path)
        self.config_path = self.repo_path / "config" / "config.ini"

    def read(self, path: Optional[Path] = None) -> ConfigParser:
        path = Path(path) if path is not None else self.config_path
        parser = ConfigParser()
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", stage="config")
        if path.suffix.lower() == ".json":
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: {e}", stage="config")
            parser.read_dict(
                {
                    section: {k: _format(v) for k, v in values.items()}
                    for section, values in data.items()
                }
            )
        else:
            parser.read(path)
        return parser

    def load(
        self, path: Optional[Path] = None, overrides: Iterable[str] = ()
    ) -> RunConfig:
        parser = self.read(path)
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, option = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(
                    f"override must look like section.key=value: {item!r}",
                    stage="config",
                )
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, option, value.strip())
        return self.from_parser(parser).validate()

    @staticmethod
    def from_parser(parser: ConfigParser) -> RunConfig:
        config = RunConfig()
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]", stage="config")
            target = getattr(config, section)
            known = {f.name for f in fields(target)}
            for option, raw in parser.items(section):
                if option not in known:
                    raise ConfigError(
                        f"unknown config key {section}.{option}", stage="config"
                    )
                default = getattr(target, option)
                setattr(target, option, _coerce(raw, default, f"{section}.{option}"))
        return config

    @staticmethod
    def save(config: RunConfig, path: Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(config.to_dict(), indent=2), encoding="utf-8")
        return path


def _format(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
