"""Decoders turning a density map into a calorie estimate.

:class:`SummationDecoder` is the parameter-free sum over all cells.
:class:`RegressionDecoder` is the CNN baseline: a VGG16 or ResNet backbone with
a scalar head, trained on maps produced by a frozen encoder.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torchvision import models

from . import checkpoint
from ._torch import cpu_state, deterministic_mode, resolve_device, state_checksum
from .density import decode_grayscale, encode_grayscale, summation_decode
from .exceptions import DivergenceError, ShapeMismatch

logger = logging.getLogger(__name__)

BACKBONES = ("vgg16", "resnet18", "resnet50")


def _as_maps(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeMismatch(f"expected density maps of shape (N, H, W), got {X.shape}")
    return X


class SummationDecoder(BaseEstimator, RegressorMixin):
    """Sum every cell of the map. Nothing to learn; ``fit`` is a no-op."""

    decoder_kind = "summation"

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict(self, X) -> np.ndarray:
        return np.array([summation_decode(m) for m in _as_maps(X)])

    def __sklearn_is_fitted__(self):
        return True


class GrayscaleDecoder(BaseEstimator, RegressorMixin):
    """Pass the map through the 8-bit grayscale codec, then sum the levels."""

    decoder_kind = "grayscale"

    def __init__(self, scale=1.0):
        self.scale = scale

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict(self, X) -> np.ndarray:
        return np.array([decode_grayscale(encode_grayscale(m, self.scale)) for m in _as_maps(X)])

    def __sklearn_is_fitted__(self):
        return True


def build_backbone(name: str) -> nn.Module:
    """Stock torchvision backbone with its classifier swapped for one scalar output."""
    if name == "resnet18":
        net = models.resnet18(weights=None)
        net.fc = nn.Linear(net.fc.in_features, 1)
    elif name == "resnet50":
        net = models.resnet50(weights=None)
        net.fc = nn.Linear(net.fc.in_features, 1)
    elif name == "vgg16":
        net = models.vgg16_bn(weights=None)
        # global pooling keeps the head small and input-size agnostic
        net.avgpool = nn.AdaptiveAvgPool2d(1)
        net.classifier = nn.Linear(512, 1)
    else:
        raise ValueError(f"unknown backbone {name!r}; choose from {BACKBONES}")
    return net


def load_pretrained(net: nn.Module, path) -> None:
    """Load backbone weights from a state-dict file, skipping the replaced head."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    own = net.state_dict()
    usable = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
    missing = [k for k in own if k not in usable]
    net.load_state_dict(usable, strict=False)
    logger.info("loaded %d pretrained tensors; %d left at initialization", len(usable), len(missing))


class EarlyStopping:
    """Track validation loss; signal a stop after ``patience`` epochs without improvement.

    The state captured at the best epoch is kept in ``best_state``.
    """

    def __init__(self, patience=20, min_delta=0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = math.inf
        self.best_epoch = None
        self.best_state = None
        self.wait = 0

    def step(self, epoch, val_loss, snapshot: Callable[[], object]) -> bool:
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = snapshot()
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def run_early_stopping(train_epoch, validate, snapshot, restore, epochs, patience):
    """Generic loop: train, validate, keep the best snapshot, restore it at the end.

    Epochs are numbered from 1. Returns ``(history, best_epoch, stopped_epoch)``.
    """
    stopper = EarlyStopping(patience)
    history = []
    stopped = epochs
    for epoch in range(1, epochs + 1):
        train_loss = train_epoch(epoch)
        val_loss = validate(epoch)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": float(train_loss), "val_loss": float(val_loss)})
        if stopper.step(epoch, val_loss, snapshot):
            stopped = epoch
            break
    restore(stopper.best_state)
    return history, stopper.best_epoch, stopped


class RegressionDecoder(BaseEstimator, RegressorMixin):
    """CNN regressor from a kCal-scale density map to total kCal.

    The single-channel map is replicated to the three input channels the
    stock backbones expect. The head predicts in units of the mean training
    target; the L1 loss is taken in kCal.
    """

    decoder_kind = "regression"

    def __init__(self, backbone="resnet18", pretrained_weights=None, epochs=50, patience=20,
                 learning_rate=1e-4, batch_size=16, seed=0, deterministic=True):
        self.backbone = backbone
        self.pretrained_weights = pretrained_weights
        self.epochs = epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.deterministic = deterministic

    @property
    def pretrained(self) -> bool:
        return self.pretrained_weights is not None

    def _build(self):
        torch.manual_seed(self.seed)
        self.net_ = build_backbone(self.backbone)
        if self.pretrained_weights is not None:
            load_pretrained(self.net_, self.pretrained_weights)

    @staticmethod
    def _to_tensor(X) -> torch.Tensor:
        x = torch.from_numpy(np.ascontiguousarray(X, dtype=np.float32))[:, None]
        return x.expand(-1, 3, -1, -1)

    def _forward(self, x):
        return self.net_(x)[:, 0] * self.target_scale_

    def fit(self, X, y, X_val, y_val):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        X, X_val = _as_maps(X), _as_maps(X_val)
        y = np.asarray(y, dtype=np.float32)
        y_val = np.asarray(y_val, dtype=np.float32)
        if len(X) != len(y) or len(X_val) != len(y_val):
            raise ShapeMismatch("maps and targets differ in length")
        if len(X_val) == 0:
            raise ValueError("validation set must be non-empty")
        if X.shape[1:] != X_val.shape[1:]:
            raise ShapeMismatch("training and validation maps differ in shape")
        self.map_shape_ = tuple(X.shape[1:])
        self.target_scale_ = float(np.mean(np.abs(y))) or 1.0

        with deterministic_mode(self.deterministic):
            self._build()
            device = resolve_device()
            net = self.net_.to(device)
            opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
            xt, yt = self._to_tensor(X), torch.from_numpy(y)
            shuffler = torch.Generator().manual_seed(self.seed)

            def train_epoch(epoch):
                net.train()
                order = torch.randperm(len(xt), generator=shuffler)
                total = 0.0
                for start in range(0, len(xt), self.batch_size):
                    idx = order[start:start + self.batch_size]
                    if len(idx) == 1 and len(xt) > 1:
                        continue  # batch norm cannot train on a single sample
                    opt.zero_grad()
                    loss = torch.mean(torch.abs(self._forward(xt[idx].to(device)) - yt[idx].to(device)))
                    loss.backward()
                    opt.step()
                    total += loss.item() * len(idx)
                return total / len(xt)

            def validate(epoch):
                pred = self._predict_array(X_val)
                return float(np.mean(np.abs(pred - y_val)))

            self.history_, self.best_epoch_, self.stopped_epoch_ = run_early_stopping(
                train_epoch, validate,
                snapshot=lambda: copy.deepcopy(cpu_state(net)),
                restore=net.load_state_dict,
                epochs=self.epochs, patience=self.patience,
            )
            net.cpu()
        return self

    def _predict_array(self, X, batch_size=32) -> np.ndarray:
        net = self.net_
        device = next(net.parameters()).device
        net.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(X), batch_size):
                out.append(self._forward(self._to_tensor(X[start:start + batch_size]).to(device)).cpu().numpy())
        return np.concatenate(out).astype(np.float64)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = _as_maps(X)
        if tuple(X.shape[1:]) != self.map_shape_:
            raise ShapeMismatch(f"decoder expects maps of shape {self.map_shape_}, got {X.shape[1:]}")
        return self._predict_array(X)


@dataclass
class RegressionDecoderConfig:
    backbone: str = "resnet18"
    pretrained_weights: Optional[str] = None
    epochs: int = 50
    patience: int = 20
    learning_rate: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def decode(model, density_map) -> float:
    """Calorie estimate for a single map from any decoder."""
    return float(model.predict(np.asarray(density_map)[None])[0])


def train_regression_decoder(config: RegressionDecoderConfig, encoder, train_occasions, val_occasions):
    """Fit a regression decoder on maps generated by a frozen ``encoder``."""
    if not val_occasions:
        raise ValueError("validation split must be non-empty")
    before = state_checksum(encoder.generator_)
    X = encoder.predict(np.stack([o.image for o in train_occasions]))
    X_val = encoder.predict(np.stack([o.image for o in val_occasions]))
    y = [o.total_kcal for o in train_occasions]
    y_val = [o.total_kcal for o in val_occasions]
    decoder = RegressionDecoder(**asdict(config)).fit(X, y, X_val, y_val)
    if state_checksum(encoder.generator_) != before:
        raise RuntimeError("encoder parameters changed while training the decoder")
    return decoder


# -- persistence ------------------------------------------------------------

def save_decoder(decoder, path) -> None:
    payload = {"decoder_kind": decoder.decoder_kind, "params": decoder.get_params()}
    if isinstance(decoder, RegressionDecoder):
        check_is_fitted(decoder, "net_")
        payload.update({
            "state": cpu_state(decoder.net_),
            "target_scale": decoder.target_scale_,
            "map_shape": list(decoder.map_shape_),
            "history": decoder.history_,
            "best_epoch": decoder.best_epoch_,
            "stopped_epoch": decoder.stopped_epoch_,
        })
    checkpoint.save_archive(path, "decoder", payload)


def load_decoder(path):
    archive = checkpoint.load_archive(path, "decoder")
    kind = archive["decoder_kind"]
    if kind == "summation":
        return SummationDecoder().fit()
    if kind == "grayscale":
        return GrayscaleDecoder(**archive["params"]).fit()
    if kind != "regression":
        raise ValueError(f"unknown decoder kind {kind!r}")
    params = dict(archive["params"], pretrained_weights=None)
    model = RegressionDecoder(**params)
    model._build()
    model.pretrained_weights = archive["params"]["pretrained_weights"]
    model.net_.load_state_dict(archive["state"])
    model.target_scale_ = float(archive["target_scale"])
    model.map_shape_ = tuple(archive["map_shape"])
    model.history_ = list(archive["history"])
    model.best_epoch_ = archive["best_epoch"]
    model.stopped_epoch_ = archive["stopped_epoch"]
    return model
