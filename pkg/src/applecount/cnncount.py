"""Seven-class apple-count classifier on AlexNet convolutional features.

The convolutional stages come from a feature-weights file; three new fully
connected layers (4096 -> 4096 -> 7, dropout 0.5) are trained first on their
own and then jointly with the convolutions at a reduced learning rate.
"""
import copy
import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from torch import nn
from torchvision.models import alexnet

from ._validation import InvalidInputError
from .patchset import N_CLASSES, PATCH_SIZE, crop_and_resize, load_split

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CONV_STAGES = {"0": "conv1", "3": "conv2", "6": "conv3", "8": "conv4", "10": "conv5"}
HISTORY_FIELDS = ["epoch", "phase", "lr", "train_loss", "val_loss", "val_acc"]


class IncompatibleWeightsError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, last_good_state):
        super().__init__(message)
        self.last_good_state = last_good_state


@dataclass
class TrainingSchedule:
    phase1_epochs: int = 5
    phase2_epochs: int = 30
    base_lr: float = 0.001
    fine_tune_conv_lr: float = 0.0001
    momentum: float = 0.9
    lr_decay_factor: float = 0.2
    lr_decay_every: int = 5
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("base_lr", "fine_tune_conv_lr", "momentum", "lr_decay_factor"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0 or self.batch_size < 1:
            raise InvalidInputError("epoch counts must be >= 0 and batch_size >= 1")

    def phase2_factor(self, epoch):
        """Decay multiplier for 1-based phase-2 ``epoch``."""
        return self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_every)


@dataclass(frozen=True)
class CountPrediction:
    probs: tuple
    argmax_count: int

    @classmethod
    def from_probs(cls, probs):
        probs = np.asarray(probs, dtype=np.float64)
        return cls(tuple(float(p) for p in probs), int(np.argmax(probs)))


class CountNetwork(nn.Module):
    def __init__(self, n_classes=N_CLASSES, dropout=0.5):
        super().__init__()
        self.features = alexnet().features
        self.avgpool = nn.AdaptiveAvgPool2d((6, 6))
        self.classifier = nn.Sequential(
            nn.Dropout(dropout),
            nn.Linear(256 * 6 * 6, 4096),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
            nn.Linear(4096, 4096),
            nn.ReLU(inplace=True),
            nn.Linear(4096, n_classes),
        )
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def normalize(self, pixels):
        """uint8 NHWC array -> normalized float NCHW tensor."""
        x = torch.as_tensor(np.ascontiguousarray(pixels)).permute(0, 3, 1, 2).float().div_(255.0)
        return (x - self.mean) / self.std

    def embed(self, x):
        return torch.flatten(self.avgpool(self.features(x)), 1)

    def forward(self, x):
        return self.classifier(self.embed(x))

    def conv_parameters(self):
        return list(self.features.parameters())

    def head_parameters(self):
        return list(self.classifier.parameters())


def _check_patch_batch(pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim == 3:
        pixels = pixels[None]
    if pixels.ndim != 4 or pixels.shape[1:] != (PATCH_SIZE, PATCH_SIZE, 3):
        raise InvalidInputError(f"expected patches of shape ({PATCH_SIZE}, {PATCH_SIZE}, 3), got {pixels.shape}")
    if pixels.dtype != np.uint8:
        raise InvalidInputError("patch pixels must be uint8 RGB")
    return pixels


def load_feature_weights(network, weights):
    """Copy conv-stage weights into ``network``; reject any shape mismatch."""
    if isinstance(weights, (str, Path)):
        weights = torch.load(weights, map_location="cpu", weights_only=True)
    own = network.features.state_dict()
    missing = sorted(set(own) - set(weights))
    if missing:
        raise IncompatibleWeightsError(f"feature weights lack {missing}")
    for key, tensor in own.items():
        if tuple(weights[key].shape) != tuple(tensor.shape):
            stage = CONV_STAGES.get(key.split(".")[0], key)
            raise IncompatibleWeightsError(
                f"{stage} ({key}): expected shape {tuple(tensor.shape)}, got {tuple(weights[key].shape)}")
    network.features.load_state_dict({k: weights[k] for k in own})
    return network


def build_network(pretrained_feature_weights, seed=0):
    """AlexNet conv stages from the weights file plus a seeded new head."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = CountNetwork()
    load_feature_weights(net, pretrained_feature_weights)
    return net.eval()


def predict_proba(network, pixels, batch_size=64):
    """(N, 7) float64 class probabilities in inference mode."""
    pixels = _check_patch_batch(pixels)
    network.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(pixels), batch_size):
            logits = network(network.normalize(pixels[i:i + batch_size])).double()
            out.append(torch.softmax(logits, dim=1).numpy())
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES))


def predict(network, pixels):
    """CountPrediction for a single 227x227x3 uint8 patch."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3:
        raise InvalidInputError("predict takes one patch; use predict_proba for batches")
    return CountPrediction.from_probs(predict_proba(network, pixels)[0])


def _embed_all(network, X, batch_size):
    network.eval()
    feats = []
    with torch.no_grad():
        for i in range(0, len(X), batch_size):
            feats.append(network.embed(network.normalize(X[i:i + batch_size])))
    return torch.cat(feats)


def _evaluate(network, X, y, batch_size, embedded=False):
    network.eval()
    loss, correct = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(X), batch_size):
            xb = X[i:i + batch_size]
            logits = network.classifier(xb) if embedded else network(network.normalize(xb))
            yb = torch.as_tensor(y[i:i + batch_size])
            loss += nn.functional.cross_entropy(logits, yb, reduction="sum").item()
            correct += (logits.argmax(dim=1) == yb).sum().item()
    return loss / len(X), correct / len(X)


def _run_epoch(network, forward, X, y, optimizer, batch_size, generator):
    network.train()
    order = torch.randperm(len(X), generator=generator).numpy()
    total = 0.0
    for i in range(0, len(order), batch_size):
        idx = np.sort(order[i:i + batch_size])
        logits = forward(X[idx])
        loss = nn.functional.cross_entropy(logits, torch.as_tensor(y[idx]))
        if not torch.isfinite(loss):
            return math.nan
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total += loss.item() * len(idx)
    return total / len(X)


def train(network, X_train, y_train, X_val, y_val, schedule=None, log=None):
    """Two-phase transfer learning; returns (network, history rows).

    Phase 1 trains only the new fully connected layers. The convolutions are
    frozen and deterministic there, so their outputs are computed once and
    reused every epoch. Phase 2 trains everything with SGD+momentum: the conv
    stages at ``fine_tune_conv_lr``, the head at ``base_lr``, both multiplied
    by ``lr_decay_factor`` every ``lr_decay_every`` epochs. The weights with
    the best validation accuracy are restored at the end.
    """
    schedule = schedule or TrainingSchedule()
    X_train = _check_patch_batch(X_train)
    X_val = _check_patch_batch(X_val)
    y_train = np.asarray(y_train, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)
    missing = sorted(set(range(N_CLASSES)) - set(y_train.tolist()))
    if missing:
        raise InvalidInputError(f"training split lacks count classes {missing}")
    log = log or logger.info
    gen = torch.Generator().manual_seed(schedule.seed)
    bs = schedule.batch_size
    history = []
    best = (-1.0, None)
    last_good = copy.deepcopy(network.state_dict())

    def record(epoch, phase, lr, train_loss, val_loss, val_acc):
        nonlocal best, last_good
        history.append({"epoch": epoch, "phase": phase, "lr": lr, "train_loss": train_loss,
                        "val_loss": val_loss, "val_acc": val_acc})
        log(f"epoch {epoch} phase {phase} lr {lr:.2e} train_loss {train_loss:.4f} "
            f"val_loss {val_loss:.4f} val_acc {val_acc:.4f}")
        last_good = copy.deepcopy(network.state_dict())
        if val_acc > best[0]:
            best = (val_acc, last_good)

    epoch = 0
    if schedule.phase1_epochs:
        for p in network.conv_parameters():
            p.requires_grad_(False)
        F_train = _embed_all(network, X_train, bs)
        F_val = _embed_all(network, X_val, bs)
        opt = torch.optim.SGD(network.head_parameters(), lr=schedule.base_lr, momentum=schedule.momentum)
        for _ in range(schedule.phase1_epochs):
            epoch += 1
            tl = _run_epoch(network, lambda f: network.classifier(f), F_train, y_train, opt, bs, gen)
            if math.isnan(tl):
                raise TrainingDivergedError(f"loss became NaN in epoch {epoch}", last_good)
            record(epoch, 1, schedule.base_lr, tl, *_evaluate(network, F_val, y_val, bs, embedded=True))
        del F_train, F_val
        for p in network.conv_parameters():
            p.requires_grad_(True)

    if schedule.phase2_epochs:
        opt = torch.optim.SGD([
            {"params": network.conv_parameters(), "lr": schedule.fine_tune_conv_lr},
            {"params": network.head_parameters(), "lr": schedule.base_lr},
        ], momentum=schedule.momentum)
        base = [schedule.fine_tune_conv_lr, schedule.base_lr]
        for e2 in range(1, schedule.phase2_epochs + 1):
            epoch += 1
            factor = schedule.phase2_factor(e2)
            for group, lr0 in zip(opt.param_groups, base):
                group["lr"] = lr0 * factor
            tl = _run_epoch(network, lambda xb: network(network.normalize(xb)), X_train, y_train, opt, bs, gen)
            if math.isnan(tl):
                raise TrainingDivergedError(f"loss became NaN in epoch {epoch}", last_good)
            record(epoch, 2, opt.param_groups[1]["lr"], tl, *_evaluate(network, X_val, y_val, bs))

    if best[1] is not None:
        network.load_state_dict(best[1])
    return network.eval(), history


def train_from_manifest(network, manifest, root, schedule=None):
    X_train, y_train = load_split(manifest, "train", root)
    X_val, y_val = load_split(manifest, "val", root)
    if not len(X_val):
        raise InvalidInputError("manifest has no val split")
    return train(network, X_train, y_train, X_val, y_val, schedule)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(history)


def save_checkpoint(network, path, metadata=None):
    """Single-file checkpoint: state dict plus a metadata JSON string."""
    payload = {"state_dict": network.state_dict(),
               "metadata": json.dumps(metadata or {}, sort_keys=True)}
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return (network in eval mode, metadata dict)."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    net = CountNetwork()
    net.load_state_dict(payload["state_dict"])
    return net.eval(), json.loads(payload["metadata"])


@dataclass
class ImageCount:
    count: int
    proposals: list
    predictions: list


def count_image(image, segmenter, network, source_image=""):
    """Per-image count: sum of argmax counts over color-model proposals.

    ``segmenter`` is a fitted :class:`~applecount.colorseg.ColorSegmenter`.
    Proposals predicted as 0 apples are false detections and add nothing.
    """
    proposals = segmenter.propose(image, source_image=source_image)
    if not proposals:
        return ImageCount(0, [], [])
    patches = np.stack([crop_and_resize(image, p.box) for p in proposals])
    preds = [CountPrediction.from_probs(p) for p in predict_proba(network, patches)]
    return ImageCount(sum(p.argmax_count for p in preds), proposals, preds)


class CNNCounter(ClassifierMixin, BaseEstimator):
    """Estimator facade: ``fit(X, y)`` on uint8 patches, ``predict`` counts.

    ``X`` has shape (n, 227, 227, 3). When no validation set is passed to
    ``fit`` a stratified tenth of the training data is held out.
    """

    def __init__(self, feature_weights=None, phase1_epochs=5, phase2_epochs=30, base_lr=0.001,
                 fine_tune_conv_lr=0.0001, momentum=0.9, lr_decay_factor=0.2, batch_size=64, seed=0):
        self.feature_weights = feature_weights
        self.phase1_epochs = phase1_epochs
        self.phase2_epochs = phase2_epochs
        self.base_lr = base_lr
        self.fine_tune_conv_lr = fine_tune_conv_lr
        self.momentum = momentum
        self.lr_decay_factor = lr_decay_factor
        self.batch_size = batch_size
        self.seed = seed

    def schedule(self):
        return TrainingSchedule(self.phase1_epochs, self.phase2_epochs, self.base_lr, self.fine_tune_conv_lr,
                                self.momentum, self.lr_decay_factor, batch_size=self.batch_size, seed=self.seed)

    def fit(self, X, y, X_val=None, y_val=None):
        if self.feature_weights is None:
            raise InvalidInputError("feature_weights is required")
        X = _check_patch_batch(X)
        y = np.asarray(y, dtype=np.int64)
        if X_val is None:
            rng = np.random.default_rng(self.seed)
            val = np.zeros(len(y), dtype=bool)
            for c in np.unique(y):
                idx = np.flatnonzero(y == c)
                val[rng.choice(idx, size=max(1, len(idx) // 10), replace=False)] = True
            X, X_val, y, y_val = X[~val], X[val], y[~val], y[val]
        start = time.perf_counter()
        net = build_network(self.feature_weights, seed=self.seed)
        self.network_, self.history_ = train(net, X, y, X_val, y_val, self.schedule())
        self.train_seconds_ = time.perf_counter() - start
        self.classes_ = np.arange(N_CLASSES)
        return self

    def predict_proba(self, X):
        return predict_proba(self.network_, X, self.batch_size)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def metadata(self):
        return {"schedule": asdict(self.schedule()), "seed": self.seed, "n_classes": N_CLASSES,
                "input_size": PATCH_SIZE, "train_seconds": getattr(self, "train_seconds_", None)}

    def save(self, path):
        save_checkpoint(self.network_, path, self.metadata())

    @classmethod
    def load(cls, path):
        net, meta = load_checkpoint(path)
        sched = meta.get("schedule", {})
        keep = {k: sched[k] for k in ("phase1_epochs", "phase2_epochs", "base_lr", "fine_tune_conv_lr",
                                      "momentum", "lr_decay_factor", "batch_size", "seed") if k in sched}
        est = cls(**keep)
        est.network_ = net
        est.classes_ = np.arange(N_CLASSES)
        est.train_seconds_ = meta.get("train_seconds")
        return est
