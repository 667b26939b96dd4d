"""Run configuration loaded from TOML."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .abcpmc import NpmcConfig
from .design import ParameterSpace
from .forming_sim import SYNTH_NAMES, SimConfig, material_space
from .imaging import DEFAULT_GREEN, HsvBounds
from .vae import VaeConfig


@dataclass
class LssvrConfig:
    bandwidth_factors: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.5, 1.0, 2.0])
    gamma_grid: list[float] = field(default_factory=lambda: [1e0, 1e2, 1e4])
    folds: int = 5


@dataclass
class RunConfig:
    space: ParameterSpace
    sim: SimConfig = field(default_factory=SimConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    lssvr: LssvrConfig = field(default_factory=LssvrConfig)
    abc: NpmcConfig = field(default_factory=NpmcConfig)
    epsilon_stop: str | float = "auto"
    seed: int = 0
    n_train: int = 200
    n_test: int = 50
    augment_count: int = 200
    max_augment: int = 3
    ssim_threshold: float = 0.85
    objective_mode: str = "reconstruct"
    theta_star: list[float] | None = None
    green: HsvBounds = DEFAULT_GREEN
    report_draws: int = 20
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.ssim_threshold < 1.0:
            raise ValueError("ssim_threshold must lie in [0, 1)")
        if self.objective_mode not in ("reconstruct", "planted"):
            raise ValueError(f"unknown objective mode {self.objective_mode!r}")
        if self.objective_mode == "planted":
            if self.theta_star is None or len(self.theta_star) != self.space.dim:
                raise ValueError("planted objective needs theta_star with one value per parameter")
            if not self.space.contains(self.theta_star):
                raise ValueError("theta_star lies outside the parameter bounds")
        if self.vae.image_size != self.sim.image_size:
            raise ValueError("vae.image_size must equal simulator.image_size")

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def _space_from(section: dict, mode: str) -> tuple[ParameterSpace, list[int] | None]:
    if mode == "material":
        space, sim = material_space()
        roles = sim.roles
    elif mode == "synthetic":
        space = ParameterSpace(list(SYNTH_NAMES), [0.0] * 6, [1.0] * 6)
        roles = None
    else:
        raise ValueError(f"unknown simulator mode {mode!r}")
    if section:
        names = section.get("names", space.names)
        lower = section.get("lower", list(space.lower))
        upper = section.get("upper", list(space.upper))
        prior = section.get("prior", [])
        space = ParameterSpace(list(names), lower, upper, list(prior))
    return space, roles


def config_from_dict(data: dict, seed: int | None = None) -> RunConfig:
    data = copy.deepcopy(data)
    run = data.setdefault("run", {})
    if seed is not None:
        run["seed"] = int(seed)
    seed_ = int(run.get("seed", 0))
    data.pop("paths", None)

    sim_section = dict(data.get("simulator", {}))
    mode = sim_section.pop("mode", "synthetic")
    space, roles = _space_from(data.get("parameters", {}), mode)
    if roles is not None and "roles" not in sim_section:
        sim_section["roles"] = roles
    sim = SimConfig.from_dict(sim_section)

    vae_section = dict(data.get("vae", {}))
    vae_section.setdefault("image_size", sim.image_size)
    vae_section.setdefault("seed", seed_)
    vae = VaeConfig(**vae_section)

    abc_section = dict(data.get("abc", {}))
    eps_stop = abc_section.pop("epsilon_stop", "auto")
    abc_section.setdefault("seed", seed_)
    abc = NpmcConfig(**abc_section)

    obj = data.get("objective", {})
    green = HsvBounds(
        tuple(obj.get("green_low", DEFAULT_GREEN.low)), tuple(obj.get("green_high", DEFAULT_GREEN.high))
    )
    return RunConfig(
        space=space,
        sim=sim,
        vae=vae,
        lssvr=LssvrConfig(**data.get("lssvr", {})),
        abc=abc,
        epsilon_stop=eps_stop if eps_stop == "auto" else float(eps_stop),
        seed=seed_,
        n_train=int(run.get("n_train", 200)),
        n_test=int(run.get("n_test", 50)),
        augment_count=int(run.get("augment_count", 200)),
        max_augment=int(run.get("max_augment", 3)),
        ssim_threshold=float(run.get("ssim_threshold", 0.85)),
        objective_mode=obj.get("mode", "reconstruct"),
        theta_star=obj.get("theta_star"),
        green=green,
        report_draws=int(data.get("report", {}).get("n_draws", 20)),
        raw=data,
    )


def load_config(path, seed: int | None = None) -> RunConfig:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return config_from_dict(data, seed)


def resolved_dict(cfg: RunConfig) -> dict:
    """Fully expanded configuration, written next to the run outputs."""
    return {
        "seed": cfg.seed,
        "parameters": {"names": cfg.space.names, "lower": cfg.space.lower.tolist(), "upper": cfg.space.upper.tolist()},
        "simulator": cfg.sim.to_dict(),
        "vae": asdict(cfg.vae),
        "lssvr": asdict(cfg.lssvr),
        "abc": asdict(cfg.abc),
        "epsilon_stop": cfg.epsilon_stop,
        "objective": {"mode": cfg.objective_mode, "theta_star": cfg.theta_star},
    }


def write_default_config(path) -> None:
    Path(path).write_text(DEFAULT_TOML)


DEFAULT_TOML = """\
# desk-scale defaults
[run]
seed = 0
n_train = 200
n_test = 50
augment_count = 200
max_augment = 3
ssim_threshold = 0.85

[simulator]
mode = "synthetic"
grid = 32
image_size = 64

[objective]
mode = "reconstruct"
green_low = [90.0, 0.3, 0.3]
green_high = [150.0, 1.0, 1.0]

[vae]
latent_dim = 8
base_channels = 16
epochs = 150
batch_size = 16
lr = 1e-3

[lssvr]
bandwidth_factors = [0.1, 0.2, 0.5, 1.0, 2.0]
gamma_grid = [1.0, 100.0, 10000.0]
folds = 5

[abc]
n = 500
t_max = 20
q = 0.5
epsilon_stop = "auto"

[report]
n_draws = 20
"""
