"""Run configuration: a flat ``key = value`` file.

Precedence, highest first: explicit overrides (``--set key=value``),
``UPGAN_<KEY>`` environment variables, the config file, built-in defaults.
Unknown keys are rejected.
"""
import dataclasses
import os
from dataclasses import dataclass, fields

ENV_PREFIX = "UPGAN_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dim: int = 100
    lr: float = 0.001
    pretrain_lr: float = 0.001
    batch_size: int = 4096
    n_c: int = 1024
    n_g: int = 200
    lambda_d: float = 1e-5
    lambda_g: float = 1e-5
    label_smoothing: float = 0.1
    noise_sigma: float = 1.0
    leaky_slope: float = 0.2
    max_hops: int = 4
    k_core_user: int = 5
    k_core_item: int = 5
    entity_min_triples: int = 3
    exclude_relations: str = ""
    split_seed: int = 0
    train_seed: int = 0
    eval_ties: str = "optimistic"
    ablation: str = "none"
    unreachable_head: str = "zero"
    pretrain_model: str = "distmult"
    margin: float = 1.0
    pretrain_epochs: int = 1000
    d_pretrain_epochs: int = 1000
    adv_epochs: int = 1000
    eval_every: int = 20
    patience: int = 3
    min_norm: float = 1.0
    hits: str = "1,3,10"

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for name in ("dim", "batch_size", "n_c", "n_g", "eval_every"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        for name in ("k_core_user", "k_core_item", "entity_min_triples", "max_hops"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        for name in ("pretrain_epochs", "d_pretrain_epochs", "adv_epochs", "patience"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        need(self.lr > 0 and self.pretrain_lr > 0, "learning rates must be positive")
        need(self.lambda_d >= 0 and self.lambda_g >= 0, "regularisation weights must be >= 0")
        need(0 <= self.label_smoothing < 0.5, "label_smoothing must be in [0, 0.5)")
        need(self.noise_sigma > 0, "noise_sigma must be positive")
        need(0 <= self.leaky_slope < 1, "leaky_slope must be in [0, 1)")
        need(self.margin > 0 and self.min_norm > 0, "margin and min_norm must be positive")
        need(self.eval_ties in ("optimistic", "pessimistic"), "eval_ties: optimistic|pessimistic")
        need(self.ablation in ("none", "no_g", "no_ui", "rgcn_style"), "ablation: none|no_g|no_ui|rgcn_style")
        need(self.unreachable_head in ("zero", "self"), "unreachable_head: zero|self")
        need(self.pretrain_model in ("distmult", "transe"), "pretrain_model: distmult|transe")
        try:
            ks = self.hit_ks
        except ValueError:
            raise ConfigError("hits must be a comma list of positive integers") from None
        need(ks and all(k >= 1 for k in ks), "hits must be a comma list of positive integers")

    @property
    def hit_ks(self):
        return [int(k) for k in self.hits.split(",") if k.strip()]

    @property
    def excluded(self):
        return [r.strip() for r in self.exclude_relations.split(",") if r.strip()]

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key, raw):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_lines(lines, source="<config>"):
    out = {}
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key = value")
        key, raw = line.split("=", 1)
        key = key.strip()
        out[key] = _coerce(key, raw)
    return out


def load_config(path=None, overrides=(), environ=None):
    environ = os.environ if environ is None else environ
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_lines(fh, str(path)))
    for name in _FIELDS:
        env = environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            values[name] = _coerce(name, env)
    values.update(parse_lines(overrides, "--set"))
    return RunConfig(**values)
