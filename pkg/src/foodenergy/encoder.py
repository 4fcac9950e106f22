"""Conditional GAN that translates a meal image into a calorie density map.

The generator is a skip-connected encoder-decoder (U-Net) whose depth adapts
to the image size so the bottleneck is always 4x4; the discriminator is a
conditional patch classifier over (image, density map) pairs. Densities are
divided by a constant ``K`` so training targets lie in [0, 1], matching the
generator's sigmoid output; predictions are multiplied back by ``K``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import checkpoint
from ._torch import cpu_state, deterministic_mode, resolve_device
from .density import quantize_density
from .exceptions import DivergenceError, NonPositiveK, ShapeMismatch

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "step", "loss_adv_g", "loss_l1", "loss_d")


def normalize_density(density_map, K: float) -> np.ndarray:
    if not K > 0:
        raise NonPositiveK(f"K must be > 0, got {K}")
    return np.clip(np.asarray(density_map, dtype=np.float32) / np.float32(K), 0.0, 1.0)


def denormalize_density(grid, K: float) -> np.ndarray:
    if not K > 0:
        raise NonPositiveK(f"K must be > 0, got {K}")
    return np.asarray(grid, dtype=np.float32) * np.float32(K)


def images_to_tensor(images) -> torch.Tensor:
    """(N, H, W, 3) uint8 -> (N, 3, H, W) float in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    return x.permute(0, 3, 1, 2) / 127.5 - 1.0


def _init_weights(module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class UNetGenerator(nn.Module):
    """U-Net with ``depth`` stride-2 levels; output is a sigmoid map in [0, 1]."""

    def __init__(self, depth, base_filters=64, in_channels=3, out_channels=1, dropout=0.5):
        super().__init__()
        if depth < 2:
            raise ValueError("generator depth must be >= 2")
        ch = [base_filters * min(2 ** i, 8) for i in range(depth)]
        downs = [nn.Conv2d(in_channels, ch[0], 4, 2, 1)]
        for i in range(1, depth):
            layers = [nn.LeakyReLU(0.2), nn.Conv2d(ch[i - 1], ch[i], 4, 2, 1)]
            if i < depth - 1:
                layers.append(nn.InstanceNorm2d(ch[i]))
            downs.append(nn.Sequential(*layers))
        ups = [nn.Sequential(nn.ReLU(), nn.ConvTranspose2d(2 * ch[0], out_channels, 4, 2, 1))]
        for i in range(1, depth):
            in_ch = ch[i] if i == depth - 1 else 2 * ch[i]
            layers = [nn.ReLU(), nn.ConvTranspose2d(in_ch, ch[i - 1], 4, 2, 1), nn.InstanceNorm2d(ch[i - 1])]
            # dropout sits in the up-blocks nearest the bottleneck
            if dropout > 0 and 0 < depth - 1 - i <= 2:
                layers.append(nn.Dropout(dropout))
            ups.append(nn.Sequential(*layers))
        self.downs = nn.ModuleList(downs)
        self.ups = nn.ModuleList(ups)
        self.apply(_init_weights)

    def forward(self, x):
        skips = []
        for down in self.downs:
            x = down(x)
            skips.append(x)
        h = self.ups[-1](skips[-1])
        for i in range(len(self.ups) - 2, -1, -1):
            h = self.ups[i](torch.cat([h, skips[i]], dim=1))
        return torch.sigmoid(h)


class PatchDiscriminator(nn.Module):
    """Conditional patch classifier over the channel-concatenated (image, map) pair."""

    def __init__(self, in_channels=4, base_filters=64, n_layers=3):
        super().__init__()
        layers = [nn.Conv2d(in_channels, base_filters, 4, 2, 1), nn.LeakyReLU(0.2)]
        ch = base_filters
        for n in range(1, n_layers + 1):
            out = base_filters * min(2 ** n, 8)
            stride = 2 if n < n_layers else 1
            layers += [nn.Conv2d(ch, out, 4, stride, 1), nn.InstanceNorm2d(out), nn.LeakyReLU(0.2)]
            ch = out
        layers.append(nn.Conv2d(ch, 1, 4, 1, 1))
        self.net = nn.Sequential(*layers)
        self.apply(_init_weights)

    def forward(self, image, density):
        return self.net(torch.cat([image, density], dim=1))


@dataclass
class EncoderConfig:
    image_size: int = 256
    epochs: int = 200
    batch_size: int = 1
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    l1_weight: float = 100.0
    density_norm: Optional[float] = None  # K; None = max training density
    base_filters: int = 64
    dropout: float = 0.5
    lr_decay_epochs: int = 0
    seed: int = 0
    deterministic: bool = True
    save_interval: int = 0
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        s = self.image_size
        if s < 32 or s & (s - 1):
            raise ValueError(f"image_size must be a power of two >= 32, got {s}")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and learning_rate > 0")
        if self.density_norm is not None and not self.density_norm > 0:
            raise NonPositiveK(f"K must be > 0, got {self.density_norm}")


class CGANEncoder(BaseEstimator):
    """Image -> density map estimator trained adversarially with an L1 term.

    ``fit(X, y)`` takes uint8 images of shape (N, S, S, 3) and density maps of
    shape (N, S, S) in kCal per pixel; ``predict(X)`` returns float32 maps.
    """

    def __init__(self, image_size=256, epochs=200, batch_size=1, learning_rate=0.0002,
                 beta1=0.5, beta2=0.999, l1_weight=100.0, density_norm=None,
                 base_filters=64, dropout=0.5, lr_decay_epochs=0, seed=0,
                 deterministic=True, save_interval=0, checkpoint_path=None):
        self.image_size = image_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.l1_weight = l1_weight
        self.density_norm = density_norm
        self.base_filters = base_filters
        self.dropout = dropout
        self.lr_decay_epochs = lr_decay_epochs
        self.seed = seed
        self.deterministic = deterministic
        self.save_interval = save_interval
        self.checkpoint_path = checkpoint_path

    @property
    def depth(self) -> int:
        return int(math.log2(self.image_size)) - 2

    def _build(self):
        torch.manual_seed(self.seed)
        self.generator_ = UNetGenerator(self.depth, self.base_filters, dropout=self.dropout)
        self.discriminator_ = PatchDiscriminator(4, self.base_filters, n_layers=3)

    def _check_images(self, X):
        X = np.asarray(X)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[1:] != (self.image_size, self.image_size, 3):
            raise ShapeMismatch(
                f"expected images of shape (N, {self.image_size}, {self.image_size}, 3), got {X.shape}"
            )
        return X

    def fit(self, X, y):
        EncoderConfig(**self.get_params())  # validates hyperparameters
        X = self._check_images(X)
        y = np.asarray(y, dtype=np.float64)
        if y.shape != X.shape[:3]:
            raise ShapeMismatch(f"density maps {y.shape} do not match images {X.shape}")
        if len(X) < 1:
            raise ValueError("need at least one training pair")
        K = self.density_norm if self.density_norm is not None else float(y.max())
        if not K > 0:
            raise NonPositiveK("training densities are all zero; K cannot be derived")
        self.density_norm_ = float(K)
        self.history_ = []
        self.epochs_trained_ = 0
        with deterministic_mode(self.deterministic):
            self._build()
            if self.epochs > 0:
                self._train(images_to_tensor(X), torch.from_numpy(normalize_density(y, K))[:, None])
        return self

    def _train(self, images, targets):
        device = resolve_device()
        G = self.generator_.to(device)
        D = self.discriminator_.to(device)
        opt_g = torch.optim.Adam(G.parameters(), lr=self.learning_rate, betas=(self.beta1, self.beta2))
        opt_d = torch.optim.Adam(D.parameters(), lr=self.learning_rate, betas=(self.beta1, self.beta2))
        schedulers = []
        if self.lr_decay_epochs > 0:
            flat = max(self.epochs - self.lr_decay_epochs, 0)
            rule = lambda e: 1.0 - max(0, e + 1 - flat) / float(self.lr_decay_epochs + 1)  # noqa: E731
            schedulers = [torch.optim.lr_scheduler.LambdaLR(o, rule) for o in (opt_g, opt_d)]
        bce = nn.BCEWithLogitsLoss()
        shuffler = torch.Generator().manual_seed(self.seed)
        n = len(images)
        G.train()
        D.train()
        for epoch in range(self.epochs):
            order = torch.randperm(n, generator=shuffler)
            for step, start in enumerate(range(0, n, self.batch_size)):
                idx = order[start:start + self.batch_size]
                x, y = images[idx].to(device), targets[idx].to(device)
                fake = G(x)

                opt_d.zero_grad()
                pred_fake = D(x, fake.detach())
                pred_real = D(x, y)
                loss_d = 0.5 * (bce(pred_fake, torch.zeros_like(pred_fake))
                                + bce(pred_real, torch.ones_like(pred_real)))
                loss_d.backward()
                opt_d.step()

                opt_g.zero_grad()
                pred_fake = D(x, fake)
                loss_adv = bce(pred_fake, torch.ones_like(pred_fake))
                loss_l1 = torch.mean(torch.abs(fake - y))
                (loss_adv + self.l1_weight * loss_l1).backward()
                opt_g.step()

                record = {"epoch": epoch, "step": step, "loss_adv_g": loss_adv.item(),
                          "loss_l1": loss_l1.item(), "loss_d": loss_d.item()}
                if not all(math.isfinite(record[k]) for k in LOSS_COLUMNS[2:]):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}: {record}")
                self.history_.append(record)
            for sched in schedulers:
                sched.step()
            self.epochs_trained_ = epoch + 1
            if logger.isEnabledFor(logging.INFO):
                l1 = np.mean([r["loss_l1"] for r in self.history_ if r["epoch"] == epoch])
                logger.info("epoch %d/%d  mean L1 %.5f", epoch + 1, self.epochs, l1)
            if self.checkpoint_path and self.save_interval and (epoch + 1) % self.save_interval == 0:
                self.save(self.checkpoint_path)
        G.cpu()
        D.cpu()

    def predict(self, X, batch_size=16) -> np.ndarray:
        check_is_fitted(self, "generator_")
        single = np.ndim(X) == 3
        X = self._check_images(X)
        G = self.generator_
        G.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(X), batch_size):
                out.append(G(images_to_tensor(X[start:start + batch_size]))[:, 0].numpy())
        maps = denormalize_density(np.concatenate(out), self.density_norm_)
        maps = np.nan_to_num(np.clip(maps, 0.0, self.density_norm_), nan=0.0)
        return maps[0] if single else maps

    def epoch_means(self, key="loss_l1") -> np.ndarray:
        check_is_fitted(self, "history_")
        return np.array([np.mean([r[key] for r in self.history_ if r["epoch"] == e])
                         for e in range(self.epochs_trained_)])

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "generator_")
        checkpoint.save_archive(path, "encoder", {
            "params": self.get_params(),
            "density_norm": self.density_norm_,
            "epochs_trained": self.epochs_trained_,
            "history": list(self.history_),
            "generator": cpu_state(self.generator_),
            "discriminator": cpu_state(self.discriminator_),
        })

    @classmethod
    def load(cls, path) -> "CGANEncoder":
        archive = checkpoint.load_archive(path, "encoder")
        model = cls(**archive["params"])
        model._build()
        model.generator_.load_state_dict(archive["generator"])
        model.discriminator_.load_state_dict(archive["discriminator"])
        model.density_norm_ = float(archive["density_norm"])
        model.epochs_trained_ = int(archive["epochs_trained"])
        model.history_ = list(archive["history"])
        return model


def write_loss_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in LOSS_COLUMNS})


def training_arrays(occasions, grayscale_scale: Optional[float] = None):
    """Stack occasions into ``(images, density maps)``.

    With ``grayscale_scale`` the targets are the maps as the 8-bit grayscale
    codec would store them, for the representation ablation.
    """
    images = np.stack([o.image for o in occasions])
    maps = [o.density_map() for o in occasions]
    if grayscale_scale is not None:
        maps = [quantize_density(m, grayscale_scale) for m in maps]
    return images, np.stack(maps)


def train_encoder(config: EncoderConfig, occasions, grayscale_scale: Optional[float] = None) -> CGANEncoder:
    """Fit a :class:`CGANEncoder` on (already augmented) training occasions."""
    if not occasions:
        raise ValueError("need at least one training occasion")
    images, maps = training_arrays(occasions, grayscale_scale)
    return CGANEncoder(**asdict(config)).fit(images, maps)


def predict_density(model: CGANEncoder, image) -> np.ndarray:
    return model.predict(np.asarray(image)[None])[0]
