"""Map configuration: INI sections mirroring the library's modules.

Every tunable has a default. Values given as ``auto`` are derived from
other settings when the map is built (see the ``effective_*`` helpers).
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class OctreeConfig:
    resolution: float = 0.08          # voxel edge (m), Replica setting
    max_depth: int = 16
    partition_levels: int = 1         # partitions sit this many levels above the leaves
    threads: int = 1
    batch_size: int = 64


@dataclass
class BhmConfig:
    hinges_per_axis: int = 7
    scale: float = 0.016              # RBF length scale (m)
    eps: float = 1e-3                 # feature sparsity threshold
    prior_var: float = 10.0
    em_iterations: int = 1
    alpha_lr: float = 0.1             # sign-threshold learning rate
    free_spacing: float | None = None  # auto: voxel edge
    sampling_margin: float | None = None  # auto: feature support radius
    sync_period: int = 5


@dataclass
class SurfaceConfig:
    beta: float = 1.0
    march_subdiv: int = 1             # marching cells per voxel edge
    weld_tol: float = 1e-6


@dataclass
class GpConfig:
    kernel: str = "rbf"
    rate: float = 500.0               # RBF: 1/(2 l^2); Matern 3/2: sqrt(3)/l
    alpha_softmin: float | None = None  # auto: 1 / kernel scale
    collection_margin: float | None = None  # auto: 2 kernel scales
    max_points: int = 512
    softmin_points: int = 64
    jitter: float = 1e-8
    k_nearest: int = 3


@dataclass
class SchedulerConfig:
    eta1: float = 0.01
    eta2: float = 0.01
    c1_max: float = 8.0
    gamma_decay: float = 0.5
    budget_march: int = 8
    budget_buffer: int = 8
    budget_train: int = 4


@dataclass
class MapConfig:
    dim: int = 3
    query_horizon: float | None = None  # auto: 3 partition edges


@dataclass
class SensorConfig:
    noise_k: float = 0.0
    seed: int = 0


_SECTIONS = {
    "octree": OctreeConfig,
    "bhm": BhmConfig,
    "surface": SurfaceConfig,
    "gp": GpConfig,
    "scheduler": SchedulerConfig,
    "map": MapConfig,
    "sensor": SensorConfig,
}


@dataclass
class Config:
    octree: OctreeConfig = field(default_factory=OctreeConfig)
    bhm: BhmConfig = field(default_factory=BhmConfig)
    surface: SurfaceConfig = field(default_factory=SurfaceConfig)
    gp: GpConfig = field(default_factory=GpConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    map: MapConfig = field(default_factory=MapConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)

    # --- derived values
    @property
    def partition_edge(self) -> float:
        return self.octree.resolution * (1 << self.octree.partition_levels)

    @property
    def kernel_scale(self) -> float:
        if self.gp.kernel == "rbf":
            return math.sqrt(1.0 / (2.0 * self.gp.rate))
        return math.sqrt(3.0) / self.gp.rate

    def effective_free_spacing(self) -> float:
        return self.bhm.free_spacing or self.octree.resolution

    def effective_sampling_margin(self) -> float:
        if self.bhm.sampling_margin is not None:
            return self.bhm.sampling_margin
        return self.bhm.scale * math.sqrt(-2.0 * math.log(self.bhm.eps))

    def effective_collection_margin(self) -> float:
        if self.gp.collection_margin is not None:
            return self.gp.collection_margin
        return 2.0 * self.kernel_scale

    def effective_alpha_softmin(self) -> float:
        return self.gp.alpha_softmin or 1.0 / self.kernel_scale

    def effective_query_horizon(self) -> float:
        if self.map.query_horizon is not None:
            return self.map.query_horizon
        return 3.0 * self.partition_edge

    # --- validation
    def validate(self) -> "Config":
        o, b, s, g, q, m, n = self.octree, self.bhm, self.surface, self.gp, self.scheduler, self.map, self.sensor
        checks = [
            (o.resolution > 0, "octree.resolution must be positive"),
            (1 <= o.max_depth <= 30, "octree.max_depth must lie in [1, 30]"),
            (0 <= o.partition_levels < o.max_depth, "octree.partition_levels must lie in [0, max_depth)"),
            (o.threads >= 1, "octree.threads must be >= 1"),
            (o.batch_size >= 1, "octree.batch_size must be >= 1"),
            (b.hinges_per_axis >= 2, "bhm.hinges_per_axis must be >= 2"),
            (b.scale > 0, "bhm.scale must be positive"),
            (0 < b.eps < 1, "bhm.eps must lie in (0, 1)"),
            (b.prior_var > 0, "bhm.prior_var must be positive"),
            (b.em_iterations >= 1, "bhm.em_iterations must be >= 1"),
            (0 < b.alpha_lr <= 1, "bhm.alpha_lr must lie in (0, 1]"),
            (b.free_spacing is None or b.free_spacing > 0, "bhm.free_spacing must be positive"),
            (b.sampling_margin is None or b.sampling_margin >= 0, "bhm.sampling_margin must be >= 0"),
            (b.sync_period >= 1, "bhm.sync_period must be >= 1"),
            (s.beta > 0, "surface.beta must be positive"),
            (s.march_subdiv >= 1, "surface.march_subdiv must be >= 1"),
            (s.weld_tol >= 0, "surface.weld_tol must be >= 0"),
            (g.kernel in ("rbf", "matern32"), "gp.kernel must be rbf or matern32"),
            (g.rate > 0, "gp.rate must be positive"),
            (g.alpha_softmin is None or g.alpha_softmin > 0, "gp.alpha_softmin must be positive"),
            (g.collection_margin is None or g.collection_margin >= 0, "gp.collection_margin must be >= 0"),
            (g.max_points >= 1, "gp.max_points must be >= 1"),
            (g.softmin_points >= 1, "gp.softmin_points must be >= 1"),
            (0 < g.jitter <= 1e-4, "gp.jitter must lie in (0, 1e-4]"),
            (g.k_nearest >= 1, "gp.k_nearest must be >= 1"),
            (q.eta1 >= 0 and q.eta2 >= 0, "scheduler.eta1/eta2 must be >= 0"),
            (q.c1_max > 0, "scheduler.c1_max must be positive"),
            (q.gamma_decay > 0, "scheduler.gamma_decay must be positive"),
            (min(q.budget_march, q.budget_buffer, q.budget_train) >= 0, "scheduler budgets must be >= 0"),
            (m.dim in (2, 3), "map.dim must be 2 or 3"),
            (m.query_horizon is None or m.query_horizon >= 0, "map.query_horizon must be >= 0"),
            (n.noise_k >= 0, "sensor.noise_k must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    # --- text form
    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "Config":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        cfg = cls()
        for name in parser.sections():
            if name not in _SECTIONS:
                raise ConfigError(f"{source}: unknown section [{name}]")
            section = getattr(cfg, name)
            known = {f.name: f for f in fields(section)}
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"{source}: unknown key {name}.{key}")
                setattr(section, key, _convert(raw, known[key], f"{source}: {name}.{key}"))
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "Config":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text, str(path))

    def to_text(self) -> str:
        lines = []
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            for f in fields(getattr(self, name)):
                v = getattr(getattr(self, name), f.name)
                lines.append(f"{f.name} = {'auto' if v is None else v!r}".replace("'", ""))
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        cfg = cls()
        for name, values in data.items():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section {name}")
            setattr(cfg, name, _SECTIONS[name](**values))
        return cfg.validate()


def _convert(raw: str, f: dataclasses.Field, where: str):
    raw = raw.strip()
    typ = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    optional = "None" in typ
    if optional and raw.lower() == "auto":
        return None
    try:
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
        if typ.startswith("str"):
            return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.split()[0]}") from None
    raise ConfigError(f"{where}: unsupported field type {typ}")
