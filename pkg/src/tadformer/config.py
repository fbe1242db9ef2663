"""Configuration types and their canonical JSON form."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError


class TaskKind(str, enum.Enum):
    CLASS_SEG = "class_seg"
    REGRESSION = "regression"
    BINARY_SALIENCY = "binary_saliency"


class TuningMode(str, enum.Enum):
    FULL_FINETUNE = "full_finetune"
    DECODERS_ONLY = "decoders_only"
    SHARED_LORA_ONLY = "shared_lora_only"
    TPC_ONLY = "tpc_only"
    DTF_ONLY = "dtf_only"
    TP_DTF_NO_TAM = "tp_dtf_no_tam"
    TADFORMER = "tadformer"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown tuning mode {value!r} (expected one of: {names})", key="mode") from None


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: TaskKind
    weight: float = 1.0
    classes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if not self.weight > 0:
            raise ConfigError(f"task {self.name!r}: weight must be positive", key="tasks.weight")
        if self.kind is TaskKind.CLASS_SEG and self.classes < 2:
            raise ConfigError(f"task {self.name!r}: class_seg needs classes >= 2", key="tasks.classes")
        if self.kind is not TaskKind.CLASS_SEG and self.classes not in (0, 2):
            raise ConfigError(f"task {self.name!r}: classes only applies to class_seg", key="tasks.classes")

    @property
    def lower_is_better(self) -> int:
        return int(self.kind is TaskKind.REGRESSION)

    @property
    def out_channels(self) -> int:
        return self.classes if self.kind is TaskKind.CLASS_SEG else 1


def default_tasks():
    return (
        TaskSpec("semseg", TaskKind.CLASS_SEG, 1.0, 4),
        TaskSpec("edges", TaskKind.REGRESSION, 1.0),
        TaskSpec("saliency", TaskKind.BINARY_SALIENCY, 1.0),
    )


@dataclass(frozen=True)
class BackboneConfig:
    grid: tuple = (16, 16)
    embed_dim: int = 48
    depths: tuple = (2, 2)
    heads: tuple = (2, 4)
    mlp_ratio: float = 2.0
    patch_size: int = 2
    in_chans: int = 3
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ConfigError("backbone.grid must be two positive extents", key="backbone.grid")
        if not self.depths or min(self.depths) < 1:
            raise ConfigError("backbone.depths must list at least one block per stage", key="backbone.depths")
        if len(self.heads) != len(self.depths):
            raise ConfigError("backbone.heads needs one entry per stage", key="backbone.heads")
        if self.embed_dim < 1 or self.patch_size < 1 or self.in_chans < 1:
            raise ConfigError("backbone dims must be positive", key="backbone.embed_dim")
        if self.mlp_ratio <= 0 or int(self.embed_dim * self.mlp_ratio) < 1:
            raise ConfigError("backbone.mlp_ratio must be positive", key="backbone.mlp_ratio")
        for s, (c, h) in enumerate(zip(self.stage_dims, self.heads)):
            if h < 1 or c % h:
                raise ConfigError(f"stage {s}: width {c} not divisible by {h} heads", key="backbone.heads")
        f = 2 ** (self.num_stages - 1)
        if self.grid[0] % f or self.grid[1] % f:
            raise ConfigError(f"grid {self.grid} must be divisible by {f} for {self.num_stages} stages", key="backbone.grid")

    @property
    def num_stages(self):
        return len(self.depths)

    @property
    def stage_dims(self):
        return tuple(self.embed_dim * 2**s for s in range(self.num_stages))

    def stage_grid(self, s):
        f = 2**s
        return self.grid[0] // f, self.grid[1] // f

    def hidden_dim(self, s):
        return int(self.stage_dims[s] * self.mlp_ratio)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rank: int = 32
    kernel: int = 3
    tasks: tuple = field(default_factory=default_tasks)
    filter_norm_eps: float = 1e-5
    backbone_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.rank < 1 or self.rank >= self.backbone.embed_dim:
            raise ConfigError(f"rank must satisfy 1 <= r < C={self.backbone.embed_dim}", key="rank")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel must be a positive odd integer", key="kernel")
        if self.filter_norm_eps <= 0:
            raise ConfigError("filter_norm_eps must be positive", key="filter_norm_eps")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError("task names must be unique", key="tasks.name")

    @property
    def num_tasks(self):
        return len(self.tasks)


@dataclass(frozen=True)
class RunConfig:
    mode: TuningMode = TuningMode.TADFORMER
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    steps: int = 300
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    train_size: int = 1200
    eval_size: int = 64
    log_every: int = 1
    out: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "mode", TuningMode.parse(self.mode))
        for key in ("steps", "weight_decay"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative", key=key)
        for key in ("batch_size", "train_size", "eval_size", "log_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive", key=key)
        if self.lr < 0:
            raise ConfigError("lr must be non-negative", key="lr")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1/beta2 must lie in [0, 1)", key="beta1")
        if self.eps <= 0:
            raise ConfigError("eps must be positive", key="eps")

    def replace(self, **changes):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return RunConfig(**d)


# ---------------------------------------------------------------------------
# JSON form: model fields are flattened into the top level

_MODEL_KEYS = ("backbone", "rank", "kernel", "tasks", "filter_norm_eps", "backbone_seed")
_RUN_KEYS = tuple(f.name for f in fields(RunConfig) if f.name != "model")
_BACKBONE_KEYS = tuple(f.name for f in fields(BackboneConfig))
_TASK_KEYS = ("name", "kind", "weight", "classes")

_INT_KEYS = {"rank", "kernel", "backbone_seed", "seed", "steps", "batch_size", "train_size", "eval_size", "log_every"}
_FLOAT_KEYS = {"filter_norm_eps", "lr", "beta1", "beta2", "eps", "weight_decay"}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object", key=where or None)
    for k in d:
        if k not in allowed:
            prefix = f"{where}." if where else ""
            raise ConfigError(f"unknown config key {prefix}{k!r}", key=f"{prefix}{k}")


def _typed(key, value, kind):
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}", key=key)
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number, got {value!r}", key=key)
    return float(value)


def config_from_dict(d) -> RunConfig:
    _check_keys(d, _MODEL_KEYS + _RUN_KEYS, "")
    model_kw, run_kw = {}, {}
    for k, v in d.items():
        if k in _INT_KEYS:
            v = _typed(k, v, int)
        elif k in _FLOAT_KEYS:
            v = _typed(k, v, float)
        if k == "backbone":
            _check_keys(v, _BACKBONE_KEYS, "backbone")
            bb = dict(v)
            for bk in ("embed_dim", "patch_size", "in_chans"):
                if bk in bb:
                    bb[bk] = _typed(f"backbone.{bk}", bb[bk], int)
            for bk in ("mlp_ratio", "ln_eps"):
                if bk in bb:
                    bb[bk] = _typed(f"backbone.{bk}", bb[bk], float)
            for bk in ("grid", "depths", "heads"):
                if bk in bb:
                    if not isinstance(bb[bk], (list, tuple)):
                        raise ConfigError(f"backbone.{bk} must be a list", key=f"backbone.{bk}")
                    bb[bk] = tuple(_typed(f"backbone.{bk}", x, int) for x in bb[bk])
            v = BackboneConfig(**bb)
        elif k == "tasks":
            if not isinstance(v, list):
                raise ConfigError("tasks must be a list", key="tasks")
            specs = []
            for t in v:
                _check_keys(t, _TASK_KEYS, "tasks")
                if "name" not in t or "kind" not in t:
                    raise ConfigError("every task needs a name and a kind", key="tasks")
                try:
                    kind = TaskKind(t["kind"])
                except ValueError:
                    raise ConfigError(f"unknown task kind {t['kind']!r}", key="tasks.kind") from None
                specs.append(
                    TaskSpec(
                        str(t["name"]),
                        kind,
                        _typed("tasks.weight", t.get("weight", 1.0), float),
                        _typed("tasks.classes", t.get("classes", 0), int),
                    )
                )
            v = tuple(specs)
        elif k == "out" and not isinstance(v, str):
            raise ConfigError("out must be a string", key="out")
        (model_kw if k in _MODEL_KEYS else run_kw)[k] = v
    return RunConfig(model=ModelConfig(**model_kw), **run_kw)


def config_to_dict(cfg: RunConfig) -> dict:
    m = cfg.model
    bb = asdict(m.backbone)
    for k in ("grid", "depths", "heads"):
        bb[k] = list(bb[k])
    d = {
        "backbone": bb,
        "rank": m.rank,
        "kernel": m.kernel,
        "tasks": [{"name": t.name, "kind": t.kind.value, "weight": t.weight, "classes": t.classes} for t in m.tasks],
        "filter_norm_eps": m.filter_norm_eps,
        "backbone_seed": m.backbone_seed,
    }
    for k in _RUN_KEYS:
        v = getattr(cfg, k)
        d[k] = v.value if isinstance(v, enum.Enum) else v
    return d


def dumps(cfg: RunConfig) -> str:
    """Canonical JSON text (sorted keys, every default spelled out)."""
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def loads(text: str) -> RunConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(d)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def toy_config(**overrides) -> RunConfig:
    """The small configuration used by the gradient audit."""
    model = ModelConfig(
        backbone=BackboneConfig(grid=(4, 4), embed_dim=8, depths=(2, 2), heads=(2, 2), mlp_ratio=2.0, patch_size=1, in_chans=3),
        rank=4,
        kernel=3,
        tasks=default_tasks()[:2],
    )
    base = dict(mode=TuningMode.TADFORMER, model=model, batch_size=2, steps=20, train_size=8, eval_size=4)
    base.update(overrides)
    return RunConfig(**base)
