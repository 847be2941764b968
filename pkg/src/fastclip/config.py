"""Run configuration: sectioned ``key = value`` files, env and flag overrides.

Every key has a default and a one-line doc (see ``describe()``).  Unknown
sections or keys raise :class:`ConfigError`.  Environment variables named
``FASTCLIP_<SECTION>_<KEY>`` (upper case) override file values; explicit
overrides passed to :func:`load_config` win over both.
"""
from __future__ import annotations

import configparser
import io
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any

from .errors import ConfigError

ENV_PREFIX = "FASTCLIP_"


def _f(default, doc):
    return field(default=default, metadata={"doc": doc})


@dataclass(frozen=True)
class DataSection:
    n: int = _f(1024, "number of training pairs")
    latent_dim: int = _f(8, "shared latent dimension of the synthetic pairs")
    d_img: int = _f(16, "image input width")
    d_txt: int = _f(16, "text input width")
    noise: float = _f(0.3, "std of per-modality input noise")
    seed: int = _f(0, "dataset seed")
    n_probe: int = _f(256, "held-out probe pairs used for metrics")
    path: str = _f("", "load training pairs from this file instead of generating")


@dataclass(frozen=True)
class ModelSection:
    arch: str = _f("linear", "tower architecture: linear | mlp")
    dim: int = _f(16, "embedding width")
    hidden: int = _f(32, "hidden width for mlp towers")


@dataclass(frozen=True)
class AlgoSection:
    variant: str = _f("fastclip_v3", "openclip_mbcl | sogclr | isogclr | fastclip_v0..v3")
    strategy: str = _f("fastclip", "contrast-half reduction: fastclip | openclip_rs")
    gamma_kind: str = _f("auto", "inner LR schedule: auto | constant | cosine")
    gamma: float = _f(0.6, "constant inner LR")
    gamma_min: float = _f(0.2, "cosine inner LR floor")
    gamma_decay_epochs: int = _f(25, "epochs for the cosine inner LR to reach its floor")
    tau_init: float = _f(0.0, "initial temperature (0 = variant default: 0.07 for v3, else 0.03)")
    tau0: float = _f(0.005, "temperature floor")
    rho: float = _f(6.5, "robust margin for v2/v3/isogclr")
    tau_lr: float = _f(2e-4, "temperature learning rate")
    tau_lr_decay: str = _f("auto", "latch tau LR down once tau < threshold: auto | on | off")
    tau_lr_threshold: float = _f(0.03, "tau value that trips the LR latch")
    tau_lr_factor: float = _f(1.0 / 3.0, "LR multiplier after the latch trips")
    eps: float = _f(1e-14, "constant inside the log")
    eps_late: float = _f(1e-14, "epsilon after the switch epoch")
    eps_switch_epoch: int = _f(-1, "epoch at which epsilon switches (-1 = never)")


@dataclass(frozen=True)
class OptimSection:
    optimizer: str = _f("adamw", "adamw | lamb")
    lr: float = _f(1e-3, "peak model learning rate")
    min_lr: float = _f(0.0, "final model learning rate")
    warmup_iters: int = _f(0, "linear warmup iterations")
    weight_decay: float = _f(0.1, "decoupled weight decay")
    beta1: float = _f(0.9, "first-moment decay")
    beta2: float = _f(0.999, "second-moment decay")
    eps: float = _f(1e-8, "optimizer denominator epsilon")


@dataclass(frozen=True)
class FabricSection:
    workers: int = _f(4, "simulated worker count K")
    virtual_shards: int = _f(0, "sampling shards (0 = one per worker); fixed value makes batches K-invariant")


@dataclass(frozen=True)
class RunSection:
    epochs: int = _f(50, "training epochs")
    batch_size: int = _f(8, "per-worker batch size")
    seed: int = _f(0, "model init and sampling seed")
    out_dir: str = _f("runs/default", "output directory for metrics, checkpoints and ledger")
    checkpoint_every: int = _f(1, "write a checkpoint every this many epochs (0 = final only)")


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "algo": AlgoSection,
    "optim": OptimSection,
    "fabric": FabricSection,
    "run": RunSection,
}

VARIANTS = ("openclip_mbcl", "sogclr", "isogclr", "fastclip_v0", "fastclip_v1", "fastclip_v2", "fastclip_v3")


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    algo: AlgoSection = field(default_factory=AlgoSection)
    optim: OptimSection = field(default_factory=OptimSection)
    fabric: FabricSection = field(default_factory=FabricSection)
    run: RunSection = field(default_factory=RunSection)

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides (strings are parsed)."""
        cfg = self
        for dotted, value in overrides.items():
            section, key = _split(dotted)
            sec = getattr(cfg, section)
            typ = _field_types(type(sec))[key]
            cfg = replace(cfg, **{section: replace(sec, **{key: _coerce(dotted, typ, value)})})
        validate(cfg)
        return cfg

    def flat(self) -> dict[str, Any]:
        return {f"{s}.{f.name}": getattr(getattr(self, s), f.name) for s in SECTIONS for f in fields(SECTIONS[s])}


def _split(dotted: str) -> tuple[str, str]:
    if "." not in dotted:
        raise ConfigError(dotted, "expected section.key")
    section, key = dotted.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(dotted, f"unknown section {section!r}")
    if key not in _field_types(SECTIONS[section]):
        raise ConfigError(dotted, "unknown key")
    return section, key


def _field_types(cls) -> dict[str, type]:
    return {f.name: {"int": int, "float": float, "str": str}[f.type] if isinstance(f.type, str) else f.type
            for f in fields(cls)}


def _coerce(key: str, typ: type, value: Any):
    if isinstance(value, typ) and not isinstance(value, bool):
        return value
    try:
        if typ is int:
            return int(str(value).strip())
        if typ is float:
            return float(str(value).strip())
        return str(value).strip()
    except ValueError:
        raise ConfigError(key, f"cannot parse {value!r} as {typ.__name__}") from None


def validate(cfg: RunConfig) -> None:
    a, o, f, r, d, m = cfg.algo, cfg.optim, cfg.fabric, cfg.run, cfg.data, cfg.model
    if a.variant not in VARIANTS:
        raise ConfigError("algo.variant", f"unknown variant {a.variant!r}")
    if a.strategy not in ("fastclip", "openclip_rs"):
        raise ConfigError("algo.strategy", f"unknown strategy {a.strategy!r}")
    if a.gamma_kind not in ("auto", "constant", "cosine"):
        raise ConfigError("algo.gamma_kind", f"unknown kind {a.gamma_kind!r}")
    if a.variant in ("sogclr", "isogclr") and a.gamma_kind == "cosine":
        raise ConfigError("algo.gamma_kind", f"{a.variant} uses a constant inner LR")
    if not 0 < a.gamma <= 1:
        raise ConfigError("algo.gamma", "must lie in (0, 1]")
    if not 0 < a.gamma_min <= 1:
        raise ConfigError("algo.gamma_min", "must lie in (0, 1]")
    if a.gamma_decay_epochs < 1:
        raise ConfigError("algo.gamma_decay_epochs", "must be positive")
    if a.tau0 <= 0:
        raise ConfigError("algo.tau0", "must be positive")
    if a.tau_init < 0 or (a.tau_init and a.tau_init < a.tau0):
        raise ConfigError("algo.tau_init", "must be >= tau0 (or 0 for the variant default)")
    if a.rho < 0:
        raise ConfigError("algo.rho", "must be nonnegative")
    if a.tau_lr < 0:
        raise ConfigError("algo.tau_lr", "must be nonnegative")
    if a.tau_lr_decay not in ("auto", "on", "off"):
        raise ConfigError("algo.tau_lr_decay", "expected auto | on | off")
    if a.eps < 0 or a.eps_late < 0:
        raise ConfigError("algo.eps", "must be nonnegative")
    if o.optimizer not in ("adamw", "lamb"):
        raise ConfigError("optim.optimizer", f"unknown optimizer {o.optimizer!r}")
    if o.lr < 0 or o.min_lr < 0:
        raise ConfigError("optim.lr", "must be nonnegative")
    if o.warmup_iters < 0:
        raise ConfigError("optim.warmup_iters", "must be nonnegative")
    if m.arch not in ("linear", "mlp"):
        raise ConfigError("model.arch", f"unknown architecture {m.arch!r}")
    if m.dim < 1:
        raise ConfigError("model.dim", "must be positive")
    if f.workers < 1:
        raise ConfigError("fabric.workers", "must be positive")
    shards = f.virtual_shards or f.workers
    if shards % f.workers:
        raise ConfigError("fabric.virtual_shards", "must be a multiple of fabric.workers")
    if d.n % shards:
        raise ConfigError("data.n", f"{d.n} pairs cannot be split evenly over {shards} shards")
    if r.batch_size < 1 or (r.batch_size * f.workers) % shards:
        raise ConfigError("run.batch_size", f"global batch must split evenly over {shards} shards")
    if r.batch_size * f.workers > d.n:
        raise ConfigError("run.batch_size", "global batch larger than the dataset")
    if r.batch_size * f.workers < 2:
        raise ConfigError("run.batch_size", "global batch must hold at least two pairs")
    if r.epochs < 0:
        raise ConfigError("run.epochs", "must be nonnegative")


def _fmt(value) -> str:
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for name in SECTIONS:
        sec = getattr(cfg, name)
        parser[name] = {f.name: _fmt(getattr(sec, f.name)) for f in fields(sec)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def loads(text: str, env: dict[str, str] | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc)) from None
    values: dict[str, Any] = {}
    for section in parser.sections():
        for key, value in parser[section].items():
            values[f"{section}.{key}"] = value
    for dotted in values:
        _split(dotted)
    env = os.environ if env is None else env
    for name, cls in SECTIONS.items():
        for f in fields(cls):
            var = f"{ENV_PREFIX}{name.upper()}_{f.name.upper()}"
            if var in env:
                values[f"{name}.{f.name}"] = env[var]
    values.update(overrides or {})
    return RunConfig().with_overrides(values)


def load_config(path: str | None = None, env=None, overrides=None) -> RunConfig:
    text = open(path).read() if path else ""
    return loads(text, env=env, overrides=overrides)


def describe() -> str:
    lines = []
    for name, cls in SECTIONS.items():
        lines.append(f"[{name}]")
        for f in fields(cls):
            lines.append(f"  {f.name} = {_fmt(f.default)}    # {f.metadata['doc']}")
    return "\n".join(lines)
