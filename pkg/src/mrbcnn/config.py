"""Flat ``key = value`` configuration files and the training configuration.

Example::

    # desk-scale run
    net.variant = mr-bcnn
    net.input_h = 80
    train.lr0 = 1e-4
    data.train_manifest = data/train.csv
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError
from .losses import DevianceParams
from .network import NetworkConfig


@dataclass(frozen=True)
class TrainConfig:
    net: NetworkConfig = field(default_factory=NetworkConfig)
    batch: int = 128
    weight_decay: float = 0.0005
    lr0: float = 1e-4
    momentum: float = 0.9
    lr_policy: str = "plateau"
    patience: int = 3
    factor: float = 0.1
    step_every: int = 100_000
    max_iters: int = 1000
    eval_every: int = 100
    seed: int = 0
    loss: str = "histogram"
    bins: int = 100
    alpha: float = 2.0
    beta: float = 0.5
    neg_cost: float = 10.0
    train_manifest: str = ""
    val_manifest: str = ""
    val_protocol: str = "cuhk03-single-shot"
    out_dir: str = "run"
    storage: str = "float64"

    def __post_init__(self):
        if self.batch < 2:
            raise ContractError("batch must be at least 2")
        if self.lr0 <= 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ContractError("learning rate must be positive, weight decay non-negative, momentum in [0, 1)")
        if not 0 < self.factor < 1:
            raise ContractError("lr factor must lie in (0, 1)")
        if self.lr_policy not in ("plateau", "fixed_step"):
            raise ContractError(f"unknown lr policy {self.lr_policy!r}")
        if self.patience < 1 or self.step_every < 1 or self.max_iters < 0 or self.eval_every < 1:
            raise ContractError("patience, step_every, eval_every must be positive and max_iters non-negative")
        if self.loss not in ("histogram", "binomial"):
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.storage not in ("float64", "float32"):
            raise ContractError(f"storage must be float64 or float32, got {self.storage!r}")

    @property
    def deviance(self) -> DevianceParams:
        return DevianceParams(self.alpha, self.beta, self.neg_cost)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        net = NetworkConfig(**d.pop("net", {}))
        return cls(net=net, **d)

    def fingerprint(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


_SECTION_FIELDS = {
    "train": {f.name for f in dataclasses.fields(TrainConfig)} - {"net"},
    "net": {f.name for f in dataclasses.fields(NetworkConfig)},
}
_ALIASES = {
    "loss.name": "train.loss",
    "loss.bins": "train.bins",
    "loss.alpha": "train.alpha",
    "loss.beta": "train.beta",
    "loss.neg_cost": "train.neg_cost",
    "data.train_manifest": "train.train_manifest",
    "data.val_manifest": "train.val_manifest",
    "data.val_protocol": "train.val_protocol",
    "out.dir": "train.out_dir",
    "checkpoint.dir": "train.out_dir",
    "checkpoint.storage": "train.storage",
}
_PATH_KEYS = {"train_manifest", "val_manifest", "out_dir"}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ContractError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(float(value)) if "e" in value.lower() else int(value)
    if isinstance(like, float):
        return float(value)
    return value


def config_from_kv(kv: dict[str, str], base_dir: Path | None = None, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    train_vals: dict = {}
    net_vals: dict = {}
    for key, value in kv.items():
        key = _ALIASES.get(key, key)
        section, _, name = key.partition(".")
        if section not in _SECTION_FIELDS or name not in _SECTION_FIELDS[section]:
            raise ContractError(f"unknown configuration key {key!r}")
        if section == "net":
            net_vals[name] = _coerce(value, getattr(base.net, name))
        else:
            v = _coerce(value, getattr(base, name))
            if name in _PATH_KEYS and v and base_dir is not None and not Path(v).is_absolute():
                v = str(base_dir / v)
            train_vals[name] = v
    net = dataclasses.replace(base.net, **net_vals) if net_vals else base.net
    return dataclasses.replace(base, net=net, **train_vals)


def load_config(path) -> TrainConfig:
    path = Path(path)
    return config_from_kv(parse_kv(path.read_text(encoding="utf-8"), str(path)), path.parent)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for name, value in cfg.net.to_dict().items():
        lines.append(f"net.{name} = {value}")
    for name, value in cfg.to_dict().items():
        if name != "net":
            lines.append(f"train.{name} = {value}")
    return "\n".join(lines) + "\n"
