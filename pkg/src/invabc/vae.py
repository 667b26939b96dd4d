"""Convolutional variational auto-encoder producing ABC summary statistics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_nn as nn
from .csvio import write_table

log = logging.getLogger(__name__)

# channel widths of the full 256x256 encoder, one per BN-Conv block
FULL_ENCODER_CHANNELS = (32, 64, 128, 256, 512, 512)


class TrainingDivergence(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


@dataclass
class VaeConfig:
    image_size: int = 64
    latent_dim: int = 8
    base_channels: int = 16
    fc_channels: int | None = None  # decoder reshape depth; defaults to base_channels
    epochs: int = 150
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    lrelu_slope: float = 0.2
    eps_bn: float = 1e-5
    momentum_bn: float = 0.99
    seed: int = 0

    def __post_init__(self):
        k = self.n_conv
        if k < 1 or 4 * 2**k != self.image_size:
            raise nn.ConfigError(f"image_size must be 4 * 2**k with k >= 1, got {self.image_size}")
        if self.latent_dim < 1:
            raise nn.ConfigError("latent_dim must be positive")

    @property
    def n_conv(self) -> int:
        return max(int(round(math.log2(max(self.image_size, 1) / 4))), 0)

    @property
    def encoder_channels(self) -> list[int]:
        scale = self.base_channels / FULL_ENCODER_CHANNELS[0]
        full = [int(round(c * scale)) for c in FULL_ENCODER_CHANNELS]
        if self.n_conv <= len(full):
            return full[: self.n_conv]
        return full + [full[-1]] * (self.n_conv - len(full))

    @property
    def decoder_fc_channels(self) -> int:
        return self.fc_channels or self.base_channels


@dataclass
class LatentStats:
    u: np.ndarray
    log_var: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    seed: int = 0

    @property
    def epochs(self) -> int:
        return len(self.epoch_loss)

    def write_csv(self, path) -> None:
        write_table(path, ["epoch", "mean_loss"], [(i + 1, v) for i, v in enumerate(self.epoch_loss)])


def build_encoder(cfg: VaeConfig, rng: np.random.Generator) -> nn.Sequential:
    layers: list[nn.Layer] = []
    c_in = 3
    for c_out in cfg.encoder_channels:
        layers += [
            nn.Conv2D((4, 4, c_in, c_out), 2, "SAME", rng),
            nn.BatchNorm(c_out, cfg.eps_bn, cfg.momentum_bn),
            nn.Activation("LRELU", cfg.lrelu_slope),
        ]
        c_in = c_out
    flat = 4 * 4 * c_in
    layers += [nn.Reshape((flat,)), nn.Dense(flat, 2 * cfg.latent_dim, rng)]
    return nn.Sequential(layers)


def build_decoder(cfg: VaeConfig, rng: np.random.Generator) -> nn.Sequential:
    fc = cfg.decoder_fc_channels
    layers: list[nn.Layer] = [
        nn.Dense(cfg.latent_dim, 16 * fc, rng),
        nn.Activation("RELU"),
        nn.Reshape((4, 4, fc)),
    ]
    outs = list(reversed(cfg.encoder_channels[:-1])) + [3]
    c_in = fc
    for i, c_out in enumerate(outs):
        layers.append(nn.Conv2DTranspose((4, 4, c_out, c_in), 2, "SAME", rng))
        if i < len(outs) - 1:
            layers += [nn.BatchNorm(c_out, cfg.eps_bn, cfg.momentum_bn), nn.Activation("RELU")]
        c_in = c_out
    layers.append(nn.Activation("SIGMOID"))
    return nn.Sequential(layers)


def reparameterize(stats: LatentStats, e: np.ndarray) -> np.ndarray:
    return stats.sigma * np.asarray(e, dtype=np.float64) + stats.u


def kl_term(stats: LatentStats) -> float:
    """KL divergence of N(u, sigma^2) from the standard normal prior."""
    lv = np.asarray(stats.log_var, dtype=np.float64)
    u = np.asarray(stats.u, dtype=np.float64)
    return float(0.5 * np.sum(np.exp(lv) - lv + u * u - 1.0))


def recon_loss(d: np.ndarray, y: np.ndarray) -> float:
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if d.shape != y.shape:
        raise nn.ShapeError(f"reconstruction shape {y.shape} != input shape {d.shape}", "image")
    diff = d - y
    return float(np.sum(diff * diff))


def vae_loss(d: np.ndarray, stats: LatentStats, y: np.ndarray) -> float:
    return kl_term(stats) + recon_loss(d, y)


def as_unit_image(image) -> np.ndarray:
    """uint8 images are scaled to [0, 1]; float input is taken as already normalized."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


class VaeModel:
    def __init__(self, cfg: VaeConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = build_encoder(cfg, rng)
        self.decoder = build_decoder(cfg, rng)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.cfg.image_size, self.cfg.image_size, 3)

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    def params(self) -> dict[str, np.ndarray]:
        return {**self.encoder.named_params("encoder."), **self.decoder.named_params("decoder.")}

    def grads(self) -> dict[str, np.ndarray]:
        return {**self.encoder.named_grads("encoder."), **self.decoder.named_grads("decoder.")}

    def _batch(self, images) -> np.ndarray:
        x = as_unit_image(images)
        if x.shape == self.image_shape:
            x = x[None]
        if x.shape[1:] != self.image_shape:
            raise nn.ShapeError(f"image shape {x.shape[1:]} != model image shape {self.image_shape}", "image")
        return x

    def encode(self, image) -> LatentStats:
        """Deterministic latent statistics (batch norm in EVAL mode).

        A single image gives 1-D ``u``/``log_var``; a batch gives ``(N, m)`` arrays.
        """
        single = np.asarray(image).shape == self.image_shape
        x = self._batch(image)
        h = self.encoder.forward(x, train=False)
        m = self.latent_dim
        u, lv = h[:, :m], h[:, m:]
        if single:
            return LatentStats(u[0].copy(), lv[0].copy())
        return LatentStats(u, lv)

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z2 = z[None] if single else z
        if z2.shape[1] != self.latent_dim:
            raise nn.ShapeError(f"latent length {z2.shape[1]} != latent_dim {self.latent_dim}", "latent")
        y = self.decoder.forward(z2, train=False)
        return y[0] if single else y

    def encode_means(self, images, batch: int = 64) -> np.ndarray:
        images = np.asarray(images)
        out = [self.encode(images[i : i + batch]).u for i in range(0, len(images), batch)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.latent_dim))

    def loss_and_grads(self, x: np.ndarray, e: np.ndarray, train: bool = True) -> float:
        """Batch-mean loss; leaves gradients in the layers' ``grads``."""
        n = x.shape[0]
        m = self.latent_dim
        self.encoder.zero_grad()
        self.decoder.zero_grad()
        h = self.encoder.forward(x, train)
        u, lv = h[:, :m], h[:, m:]
        sigma = np.exp(0.5 * lv)
        z = sigma * e + u
        y = self.decoder.forward(z, train)
        diff = y - x
        kl = 0.5 * np.sum(np.exp(lv) - lv + u * u - 1.0)
        loss = (kl + np.sum(diff * diff)) / n
        gz = self.decoder.backward(2.0 * diff / n)
        gu = u / n + gz
        glv = 0.5 * (np.exp(lv) - 1.0) / n + gz * 0.5 * sigma * e
        self.encoder.backward(np.concatenate([gu, glv], axis=1))
        return float(loss)

    def descriptor(self) -> dict:
        return {
            "model": "vae",
            "config": asdict(self.cfg),
            "encoder": self.encoder.descriptor(),
            "decoder": self.decoder.descriptor(),
        }

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.encoder.named_tensors("encoder."), **self.decoder.named_tensors("decoder.")}

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.descriptor(), self.tensors())

    @classmethod
    def load(cls, path) -> "VaeModel":
        desc, tensors = nn.load_checkpoint(path)
        if desc.get("model") != "vae":
            raise nn.CheckpointError(f"{path}: not a VAE checkpoint")
        model = cls(VaeConfig(**desc["config"]))
        for part in ("encoder", "decoder"):
            if getattr(model, part).descriptor() != desc[part]:
                raise nn.CheckpointError(f"{path}: {part} architecture does not match its descriptor")
        nn.assign_tensors(model.encoder, tensors, "encoder.")
        nn.assign_tensors(model.decoder, tensors, "decoder.")
        return model


def train(images, objective, cfg: VaeConfig, progress: bool = False):
    """Fit a VAE on ``images`` plus the objective image.

    Returns ``(model, log, Zs, Zo)`` where ``Zs``/``Zo`` are encoder means of the
    training images and of the objective image.
    """
    x_train = as_unit_image(images)
    if x_train.ndim != 4 or len(x_train) == 0:
        raise ValueError("training corpus must be a nonempty (N, H, W, 3) stack")
    corpus = x_train
    if objective is not None:
        corpus = np.concatenate([x_train, as_unit_image(objective)[None]], axis=0)
    model = VaeModel(cfg)
    if corpus.shape[1:] != model.image_shape:
        raise nn.ShapeError(f"corpus image shape {corpus.shape[1:]} != {model.image_shape}", "image")
    rng = np.random.default_rng([cfg.seed, 1])
    adam = nn.AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
    params = model.params()
    log_ = TrainLog(seed=cfg.seed)
    n = len(corpus)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            e = rng.standard_normal((len(idx), cfg.latent_dim))
            loss = model.loss_and_grads(corpus[idx], e, train=True)
            if not math.isfinite(loss):
                raise TrainingDivergence(epoch + 1, b + 1, loss)
            nn.adam_step(params, model.grads(), adam)
            total += loss * len(idx)
        log_.epoch_loss.append(total / n)
        if progress:
            log.info("epoch %d/%d mean loss %.4f", epoch + 1, cfg.epochs, total / n)
    zs = model.encode_means(x_train)
    zo = model.encode(as_unit_image(objective)).u if objective is not None else None
    return model, log_, zs, zo


def write_latents(path, z: np.ndarray, ids=None) -> None:
    z = np.atleast_2d(z)
    ids = list(range(len(z))) if ids is None else list(ids)
    header = ["image_id"] + [f"z_{j + 1}" for j in range(z.shape[1])]
    write_table(path, header, [(i, *row) for i, row in zip(ids, z)])
