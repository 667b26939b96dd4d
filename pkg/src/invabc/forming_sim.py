"""Synthetic stand-in for a sheet-forming simulation.

A smooth closed-form strain field replaces the finite-element run. Elements are
classified into the six forming-limit-diagram zones, rendered as a colour
image, and scored with the thinning and FLD formability criteria.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import IntEnum

import numpy as np

from .csvio import write_table
from .design import ParameterSpace

SIM_CONFIG_VERSION = "forming-sim/1"


class Zone(IntEnum):
    CRACK = 0
    RISK_OF_CRACK = 1
    SAFE = 2
    INSUFFICIENT_STRETCH = 3
    WRINKLE_TENDENCY = 4
    WRINKLES = 5


DEFAULT_COLORS = {
    "CRACK": (255, 0, 0),
    "RISK_OF_CRACK": (255, 165, 0),
    "SAFE": (0, 255, 0),
    "INSUFFICIENT_STRETCH": (160, 160, 160),
    "WRINKLE_TENDENCY": (0, 200, 255),
    "WRINKLES": (0, 0, 255),
}

# material and process parameters; the first six roles of the strain model are carried by
# R00, BHF, f1, f2, F and N, the rest enter as small linear perturbations.
MATERIAL_NAMES = ["E", "u", "K", "N", "R00", "R45", "R90", "f1", "f2", "v", "BHF", "F"]
MATERIAL_LOWER = [190.0, 0.28, 500.0, 0.28, 1.6, 1.6, 1.6, 0.10, 0.10, 4000.0, 100.0, 120.0]
MATERIAL_UPPER = [220.0, 0.32, 560.0, 0.34, 2.2, 2.2, 2.2, 0.20, 0.20, 5000.0, 120.0, 160.0]
MATERIAL_ROLES = [4, 10, 7, 8, 11, 3]

SYNTH_NAMES = ["minor_scale", "base_stretch", "bump_amplitude", "bump_x", "bump_y", "bump_width"]


@dataclass
class Flc:
    """Crack curve ``crack_intercept + crack_slope*|e2|``, wrinkle curve ``wrinkle_slope*e2``.

    ``stretch_floor`` is measured upward from the wrinkle-side safe line; ``None``
    disables the insufficient-stretch zone.
    """

    crack_intercept: float = 0.30
    crack_slope: float = 0.8
    wrinkle_slope: float = -1.0
    margin: float = 0.05
    stretch_floor: float | None = 0.02

    def phi_s(self, e2):
        return self.crack_intercept + self.crack_slope * np.abs(e2)

    def phi_w(self, e2):
        return self.wrinkle_slope * np.asarray(e2)

    def safe_crack(self, e2):
        return self.phi_s(e2) - self.margin

    def safe_wrinkle(self, e2):
        return self.phi_w(e2) + self.margin

    def is_ordered(self, e2) -> bool:
        return bool(np.all(self.phi_s(e2) > self.phi_w(e2)))


@dataclass
class SimConfig:
    version: str = SIM_CONFIG_VERSION
    h0: float = 0.8
    minor_amp: float = 0.12
    minor_base: float = 0.5
    minor_gain: float = 0.8
    major_base: float = 0.05
    major_gain: float = 0.25
    bump_gain: float = 0.45
    bump_center_lo: float = 0.3
    bump_center_span: float = 0.4
    bump_width_lo: float = 0.02
    bump_width_span: float = 0.08
    perturbation: float = 0.01
    roles: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    flc: Flc = field(default_factory=Flc)
    colors: dict = field(default_factory=lambda: dict(DEFAULT_COLORS))
    region_center: tuple[float, float] = (0.5, 0.5)
    region_radius: float = 0.45
    region_polygon: list[tuple[float, float]] | None = None
    punch_color: tuple[int, int, int] = (180, 90, 30)
    punch_color_low: tuple[float, float, float] = (10.0, 0.5, 0.5)
    grid: int = 32
    image_size: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "flc" in d and isinstance(d["flc"], dict):
            d["flc"] = Flc(**d["flc"])
        for key in ("region_center", "punch_color", "punch_color_low"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def synthetic_space() -> ParameterSpace:
    return ParameterSpace(list(SYNTH_NAMES), np.zeros(6), np.ones(6))


def material_space() -> tuple[ParameterSpace, SimConfig]:
    return ParameterSpace(list(MATERIAL_NAMES), MATERIAL_LOWER, MATERIAL_UPPER), SimConfig(roles=list(MATERIAL_ROLES))


@dataclass
class StrainField:
    x: np.ndarray  # element centres, (G, G), row index is y
    y: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    h: np.ndarray
    h0: float

    def write_csv(self, path) -> None:
        rows = zip(self.x.ravel(), self.y.ravel(), self.e1.ravel(), self.e2.ravel(), self.h.ravel())
        write_table(path, ["x", "y", "e1", "e2", "h_e"], rows)


def element_centres(grid: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(grid) + 0.5) / grid
    x, y = np.meshgrid(c, c)
    return x, y


def simulate(theta, space: ParameterSpace, cfg: SimConfig = SimConfig(), grid: int | None = None) -> StrainField:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (space.dim,):
        raise ValueError(f"theta must have shape ({space.dim},), got {theta.shape}")
    if not space.contains(theta):
        raise ValueError(f"theta {theta.tolist()} lies outside the parameter bounds")
    if space.dim < 6:
        raise ValueError("the strain model needs at least 6 parameters")
    grid = grid or cfg.grid
    t = space.normalize(theta)
    r = [t[i] for i in cfg.roles]
    x, y = element_centres(grid)
    e2 = cfg.minor_amp * (2 * x - 1) * (cfg.minor_base + cfg.minor_gain * r[0])
    cx = cfg.bump_center_lo + cfg.bump_center_span * r[3]
    cy = cfg.bump_center_lo + cfg.bump_center_span * r[4]
    width = cfg.bump_width_lo + cfg.bump_width_span * r[5]
    e1 = cfg.major_base + cfg.major_gain * r[1] + cfg.bump_gain * r[2] * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / width)
    extra = [i for i in range(space.dim) if i not in cfg.roles]
    if extra:
        e1 = e1 + cfg.perturbation * sum(t[i] - 0.5 for i in extra)
    h = cfg.h0 * np.exp(-(e1 + e2))
    return StrainField(x, y, e1, e2, h, cfg.h0)


def classify_elements(field: StrainField, flc: Flc = Flc()) -> np.ndarray:
    e1, e2 = field.e1, field.e2
    phi_s, phi_w = flc.phi_s(e2), flc.phi_w(e2)
    safe_s, safe_w = flc.safe_crack(e2), flc.safe_wrinkle(e2)
    floor = -np.inf if flc.stretch_floor is None else safe_w + flc.stretch_floor
    conds = [
        e1 > phi_s,
        e1 > safe_s,
        (e1 >= safe_w) & (e1 >= floor),
        e1 >= safe_w,
        e1 >= phi_w,
    ]
    zones = [Zone.CRACK, Zone.RISK_OF_CRACK, Zone.SAFE, Zone.INSUFFICIENT_STRETCH, Zone.WRINKLE_TENDENCY]
    return np.select(conds, [int(z) for z in zones], default=int(Zone.WRINKLES)).astype(np.int8)


def _point_in_polygon(px: np.ndarray, py: np.ndarray, poly) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def region_mask(x: np.ndarray, y: np.ndarray, cfg: SimConfig) -> np.ndarray:
    if cfg.region_polygon:
        return _point_in_polygon(x, y, cfg.region_polygon)
    cx, cy = cfg.region_center
    return (x - cx) ** 2 + (y - cy) ** 2 <= cfg.region_radius**2


def pixel_centres(size: int) -> tuple[np.ndarray, np.ndarray]:
    return element_centres(size)


def element_region(grid: int, cfg: SimConfig) -> np.ndarray:
    return region_mask(*element_centres(grid), cfg)


def render_fld_image(labels: np.ndarray, cfg: SimConfig = SimConfig(), size: int | None = None, masked: bool = True) -> np.ndarray:
    """Nearest-neighbour upscale of the zone grid to a colour image.

    With ``masked`` the pixels outside the working region are white.
    """
    size = size or cfg.image_size
    g_rows, g_cols = labels.shape
    palette = np.array([cfg.colors[z.name] for z in Zone], dtype=np.uint8)
    rows = (np.arange(size) * g_rows) // size
    cols = (np.arange(size) * g_cols) // size
    img = palette[labels[np.ix_(rows, cols)]]
    if masked:
        img[~region_mask(*pixel_centres(size), cfg)] = 255
    return img


def punch_image(cfg: SimConfig = SimConfig(), size: int | None = None) -> np.ndarray:
    """The punch footprint drawn in ``cfg.punch_color`` on a white blank."""
    size = size or cfg.image_size
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    img[region_mask(*pixel_centres(size), cfg)] = cfg.punch_color
    return img


def _check_p(p: int) -> None:
    if int(p) != p or p < 2 or p % 2:
        raise ValueError(f"p must be an even integer >= 2, got {p}")


def thinning_objective(field: StrainField, p: int = 2) -> float:
    _check_p(p)
    if field.h0 == 0:
        raise ValueError("initial thickness h0 must be nonzero")
    rate = (np.asarray(field.h) - field.h0) / field.h0
    return float(np.sum(rate**p) ** (1.0 / p))


def fld_objective(field: StrainField, flc: Flc = Flc(), p: int = 2) -> float:
    _check_p(p)
    e1, e2 = np.asarray(field.e1), np.asarray(field.e2)
    above = e1 - flc.safe_crack(e2)
    below = flc.safe_wrinkle(e2) - e1
    per = np.where(above > 0, above**p, np.where(below > 0, below**p, 0.0))
    return float(np.sum(per) ** (1.0 / p))


def count_defects(labels: np.ndarray, region: np.ndarray | None = None) -> tuple[int, int]:
    lab = labels if region is None else labels[region]
    return int(np.sum(lab == Zone.CRACK)), int(np.sum(lab == Zone.WRINKLES))


def run_forward(theta, space: ParameterSpace, cfg: SimConfig = SimConfig(), masked: bool = True):
    """simulate -> classify -> render in one call."""
    field = simulate(theta, space, cfg)
    labels = classify_elements(field, cfg.flc)
    return field, labels, render_fld_image(labels, cfg, masked=masked)
