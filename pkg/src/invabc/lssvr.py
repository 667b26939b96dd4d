"""Least-squares support vector regression and its per-latent stack.

Inputs are min-max scaled to the unit box (when bounds are given) before the
RBF kernel is evaluated, so parameters of very different magnitude weigh alike.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .csvio import read_table, write_table


class SingularSystemError(np.linalg.LinAlgError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "RBF"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.kind != "RBF":
            raise ValueError(f"unsupported kernel {self.kind!r}")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d2 = (
            np.sum(a * a, axis=1)[:, None]
            + np.sum(b * b, axis=1)[None, :]
            - 2.0 * a @ b.T
        )
        np.maximum(d2, 0.0, out=d2)
        return np.exp(-d2 / (2.0 * self.bandwidth**2))


def _scale(theta, lower, upper) -> np.ndarray:
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    if lower is None:
        return theta
    return (theta - lower) / (upper - lower)


def kernel_matrix(anchors, kernel: KernelSpec) -> np.ndarray:
    a = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    k = kernel(a, a)
    np.fill_diagonal(k, 1.0)
    return 0.5 * (k + k.T)


def lssvr_system(gram: np.ndarray, targets: np.ndarray, gamma_reg: float):
    """Bordered system ``[[0, 1^T], [1, K + I/gamma]] [b; alpha] = [0; z]``."""
    n = gram.shape[0]
    a = np.zeros((n + 1, n + 1))
    a[0, 1:] = 1.0
    a[1:, 0] = 1.0
    a[1:, 1:] = gram + np.eye(n) / gamma_reg
    rhs = np.concatenate([[0.0], targets])
    return a, rhs


@dataclass
class LssvrModel:
    alphas: np.ndarray
    bias: float
    anchors: np.ndarray  # unscaled training inputs
    kernel: KernelSpec
    gamma_reg: float
    residuals: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def predict(self, theta) -> np.ndarray | float:
        theta = np.asarray(theta, dtype=np.float64)
        single = theta.ndim == 1
        t = _scale(theta, self.lower, self.upper)
        if t.shape[1] != self.anchors.shape[1]:
            raise ValueError(f"theta has dimension {t.shape[1]}, model expects {self.anchors.shape[1]}")
        k = self.kernel(t, _scale(self.anchors, self.lower, self.upper))
        out = k @ self.alphas + self.bias
        return float(out[0]) if single else out


def fit(anchors, targets, gamma_reg: float, kernel: KernelSpec, bounds=None, max_condition: float = 1e14) -> LssvrModel:
    """Solve the LSSVR dual for one output.

    ``bounds`` is an optional ``(lower, upper)`` pair used to scale inputs to the unit box.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    z = np.asarray(targets, dtype=np.float64).ravel()
    n = anchors.shape[0]
    if n < 1 or z.shape[0] != n:
        raise ValueError(f"need n >= 1 anchors with matching targets, got {n} and {z.shape[0]}")
    if not gamma_reg > 0:
        raise ValueError("gamma_reg must be positive")
    lower = upper = None
    if bounds is not None:
        lower = np.asarray(bounds[0], dtype=np.float64)
        upper = np.asarray(bounds[1], dtype=np.float64)
    gram = kernel_matrix(_scale(anchors, lower, upper), kernel)
    a, rhs = lssvr_system(gram, z, gamma_reg)
    with warnings.catch_warnings():
        # an exactly singular factor is reported below through the condition estimate
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
    cond = 1.0 / max(scipy.linalg.lapack.dgecon(lu, np.linalg.norm(a, 1), norm="1")[0], 1e-300)
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularSystemError("LSSVR system is numerically singular", cond)
    sol = scipy.linalg.lu_solve((lu, piv), rhs)
    alphas = sol[1:]
    return LssvrModel(alphas, float(sol[0]), anchors.copy(), kernel, float(gamma_reg), alphas / gamma_reg, lower, upper)


@dataclass
class LvLssvrModel:
    per_latent: list[LssvrModel] = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return len(self.per_latent)

    def predict(self, theta) -> np.ndarray:
        """``(d,) -> (m,)`` or ``(n, d) -> (n, m)``."""
        theta = np.asarray(theta, dtype=np.float64)
        first = self.per_latent[0]
        if all(m.kernel == first.kernel for m in self.per_latent):
            t = _scale(theta, first.lower, first.upper)
            if t.shape[1] != first.anchors.shape[1]:
                raise ValueError(f"theta has dimension {t.shape[1]}, model expects {first.anchors.shape[1]}")
            k = first.kernel(t, _scale(first.anchors, first.lower, first.upper))
            alphas = np.stack([m.alphas for m in self.per_latent], axis=1)
            out = k @ alphas + np.array([m.bias for m in self.per_latent])
        else:
            out = np.stack([np.atleast_1d(m.predict(theta)) for m in self.per_latent], axis=-1)
        return out[0] if theta.ndim == 1 else out

    __call__ = predict

    def save(self, directory) -> None:
        save_bundle(self, directory)


def fit_multi(anchors, zs, gamma_reg: float, kernel: KernelSpec, bounds=None) -> LvLssvrModel:
    zs = np.asarray(zs, dtype=np.float64)
    if zs.ndim == 1:
        zs = zs[:, None]
    return LvLssvrModel([fit(anchors, zs[:, j], gamma_reg, kernel, bounds) for j in range(zs.shape[1])])


def predict_multi(model: LvLssvrModel, theta) -> np.ndarray:
    return model.predict(theta)


def default_grid(d: int) -> list[tuple[float, float]]:
    root = np.sqrt(d)
    return [(f * root, g) for f in (0.1, 0.2, 0.5, 1.0, 2.0) for g in (1e0, 1e2, 1e4)]


def kfold_rmse(anchors, targets, bandwidth, gamma_reg, k=5, seed=0, bounds=None) -> float:
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[:, None]
    n = anchors.shape[0]
    folds = np.array_split(np.random.default_rng(seed).permutation(n), k)
    errs = []
    for hold in folds:
        train = np.setdiff1d(np.arange(n), hold)
        mdl = fit_multi(anchors[train], targets[train], gamma_reg, KernelSpec("RBF", bandwidth), bounds)
        pred = mdl.predict(anchors[hold])
        errs.append(np.sqrt(np.mean((pred - targets[hold]) ** 2)))
    return float(np.mean(errs))


def select_hyperparams(anchors, targets, grid=None, k: int = 5, seed: int = 0, bounds=None) -> tuple[float, float]:
    """Grid point with the lowest mean k-fold RMSE.

    Ties go to the smallest bandwidth, then the smallest ``gamma_reg``. Grid
    points whose system is numerically singular are skipped.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    if grid is None:
        grid = default_grid(anchors.shape[1])
    grid = list(grid)
    if not grid:
        raise ValueError("hyperparameter grid is empty")
    if anchors.shape[0] < k:
        raise ValueError(f"{k}-fold split needs at least {k} anchors")
    scored = []
    for bw, g in grid:
        try:
            rmse = kfold_rmse(anchors, targets, bw, g, k, seed, bounds)
        except SingularSystemError:
            continue
        scored.append((rmse, bw, g))
    if not scored:
        raise SingularSystemError("every grid point gave a singular system", float("inf"))
    _, bw, g = min(scored)
    return float(bw), float(g)


# ---------------------------------------------------------------------------
# CSV bundle: meta.csv, anchors.csv, coefficients.csv


def save_bundle(model: LvLssvrModel, directory) -> None:
    directory = Path(directory)
    first = model.per_latent[0]
    d = first.anchors.shape[1]
    meta = [
        ("kernel", first.kernel.kind),
        ("n_anchors", first.anchors.shape[0]),
        ("dim", d),
        ("latent_dim", model.latent_dim),
    ]
    if first.lower is not None:
        meta += [(f"lower_{i + 1}", v) for i, v in enumerate(first.lower)]
        meta += [(f"upper_{i + 1}", v) for i, v in enumerate(first.upper)]
    write_table(directory / "meta.csv", ["key", "value"], meta)
    write_table(
        directory / "anchors.csv",
        ["anchor_id"] + [f"theta_{i + 1}" for i in range(d)],
        [(i, *row) for i, row in enumerate(first.anchors)],
    )
    n = first.anchors.shape[0]
    write_table(
        directory / "coefficients.csv",
        ["latent", "bandwidth", "gamma_reg", "bias"] + [f"alpha_{i + 1}" for i in range(n)],
        [(j + 1, m.kernel.bandwidth, m.gamma_reg, m.bias, *m.alphas) for j, m in enumerate(model.per_latent)],
    )


def load_bundle(directory) -> LvLssvrModel:
    directory = Path(directory)
    _, meta_rows = read_table(directory / "meta.csv")
    meta = {k: v for k, v in meta_rows}
    d = int(meta["dim"])
    lower = upper = None
    if "lower_1" in meta:
        lower = np.array([float(meta[f"lower_{i + 1}"]) for i in range(d)])
        upper = np.array([float(meta[f"upper_{i + 1}"]) for i in range(d)])
    _, arows = read_table(directory / "anchors.csv")
    anchors = np.array([[float(v) for v in r[1:]] for r in arows]).reshape(-1, d)
    _, crows = read_table(directory / "coefficients.csv")
    models = []
    for r in crows:
        bw, g, b = float(r[1]), float(r[2]), float(r[3])
        alphas = np.array([float(v) for v in r[4:]])
        models.append(LssvrModel(alphas, b, anchors, KernelSpec(meta["kernel"], bw), g, alphas / g, lower, upper))
    if len(models) != int(meta["latent_dim"]):
        raise ValueError(f"{directory}: coefficient rows do not match latent_dim")
    return LvLssvrModel(models)
