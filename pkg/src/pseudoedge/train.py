"""Joint training of f (and g, h) with validation-based model selection."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .augment import IDENTITY, AugmentationConfig, augment
from .losses import LossConfig, has_supervision, total_loss
from .metrics import confusion_counts, iou_from_counts
from .models import NetworkSpec, build_network, default_spec

log = logging.getLogger(__name__)

METHODS = ("baseline_ce", "pseudo_edge", "pseudo_edge_attention")
CHECKPOINT_FORMAT = "pseudoedge-checkpoint/1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "pseudo_edge_attention"
    seg_spec: NetworkSpec = field(default_factory=lambda: default_spec("segmentation"))
    edge_spec: NetworkSpec = field(default_factory=lambda: default_spec("edge"))
    att_spec: NetworkSpec = field(default_factory=lambda: default_spec("attention"))
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    lr_factor: float = 0.5
    lr_patience: int = 5
    epochs: int = 120
    batch_size: int = 8
    patch_size: int = 256
    threshold: float = 0.5
    seed: int = 0
    augmentation: AugmentationConfig = IDENTITY
    config_hash: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.loss.use_attention != (self.method == "pseudo_edge_attention"):
            self.loss = LossConfig(self.loss.lam, self.loss.weight_positive, self.loss.weight_negative,
                                   use_attention=self.method == "pseudo_edge_attention")
        if self.epochs < 1 or self.batch_size < 1 or self.patch_size < 1:
            raise ValueError("epochs, batch_size and patch_size must be positive")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    @property
    def uses_edge(self) -> bool:
        return self.method != "baseline_ce"

    @property
    def uses_attention(self) -> bool:
        return self.method == "pseudo_edge_attention"


class PlateauHalving:
    """Multiply the lr by ``factor`` after ``patience`` epochs without a strictly lower loss."""

    def __init__(self, optimizer, factor=0.5, patience=5):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, loss: float) -> None:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for g in self.optimizer.param_groups:
                g["lr"] *= self.factor
            self.bad_epochs = 0


@dataclass
class EpochRecord:
    epoch: int
    ce: float
    edge: float
    total: float
    val_iou: float
    lr: float
    steps: int


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_iou: float = -1.0

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs],
                "best_epoch": self.best_epoch, "best_val_iou": self.best_val_iou}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


class Checkpoint:
    """f's weights plus what inference needs; g and h ride along for figures."""

    def __init__(self, spec: NetworkSpec, state: dict, mean, std, config_hash="", epoch=-1,
                 method="", extras: dict | None = None):
        self.spec = spec
        self.state = state
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)
        self.config_hash = config_hash
        self.epoch = epoch
        self.method = method
        self.extras = extras or {}  # role -> (spec, state)
        self._nets = {}

    def network(self, role="segmentation"):
        if role not in self._nets:
            if role == "segmentation":
                spec, state = self.spec, self.state
            elif role in self.extras:
                spec, state = self.extras[role]
            else:
                return None
            net = build_network(spec)
            net.load_state_dict(state)
            net.eval()
            self._nets[role] = net
        return self._nets[role]

    def normalize(self, images: np.ndarray) -> torch.Tensor:
        """(N, H, W, 3) or (H, W, 3) floats -> normalized (N, 3, H, W) tensor."""
        return to_input(images, self.mean, self.std)

    def save(self, path) -> None:
        doc = {"format": CHECKPOINT_FORMAT, "spec": self.spec.to_dict(), "state": self.state,
               "mean": self.mean.tolist(), "std": self.std.tolist(), "config_hash": self.config_hash,
               "epoch": self.epoch, "method": self.method}
        torch.save(doc, path)
        if self.extras:
            side = {role: {"spec": spec.to_dict(), "state": state} for role, (spec, state) in self.extras.items()}
            torch.save({"format": CHECKPOINT_FORMAT, "networks": side}, sidecar_path(path))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            doc = torch.load(path, map_location="cpu", weights_only=True)
            if doc.get("format") != CHECKPOINT_FORMAT:
                raise ValueError("unrecognised format tag")
            extras = {}
            side = sidecar_path(path)
            if os.path.exists(side):
                for role, d in torch.load(side, map_location="cpu", weights_only=True)["networks"].items():
                    extras[role] = (NetworkSpec(**d["spec"]), d["state"])
            ckpt = cls(NetworkSpec(**doc["spec"]), doc["state"], doc["mean"], doc["std"],
                       doc["config_hash"], doc["epoch"], doc["method"], extras)
            ckpt.network()
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise ValueError(f"corrupted checkpoint {path}: {exc}") from exc
        return ckpt


def sidecar_path(path) -> str:
    root, ext = os.path.splitext(str(path))
    return root + ".gh" + (ext or ".pt")


def to_input(images, mean, std) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    arr = (arr - mean) / std
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def channel_stats(samples) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over all training pixels."""
    n = 0
    s = np.zeros(3)
    ss = np.zeros(3)
    for smp in samples:
        px = smp.image.reshape(-1, 3).astype(np.float64)
        n += len(px)
        s += px.sum(0)
        ss += (px ** 2).sum(0)
    mean = s / n
    std = np.sqrt(np.maximum(ss / n - mean ** 2, 1e-12))
    return mean.astype(np.float32), np.maximum(std, 1e-3).astype(np.float32)


@torch.no_grad()
def predict(checkpoint: Checkpoint, image) -> np.ndarray:
    """Probability map of f in eval mode for one (H, W, 3) image."""
    net = checkpoint.network()
    net.eval()
    return net(checkpoint.normalize(image))[0, 0].numpy()


@torch.no_grad()
def predict_batch(net, images, mean, std, batch=16) -> list[np.ndarray]:
    net.eval()
    fmt = memory_format([net])
    device = next(net.parameters(), torch.empty(0)).device
    out = []
    # equal shapes batch together
    for i in range(0, len(images), batch):
        chunk = images[i:i + batch]
        groups = [np.stack(chunk)] if len({im.shape for im in chunk}) == 1 else [im[None] for im in chunk]
        for arr in groups:
            x = to_input(arr, mean, std).to(device).contiguous(memory_format=fmt)
            out += list(net(x)[:, 0].cpu().numpy())
    return out


def dataset_iou(net, samples, mean, std, threshold) -> float:
    probs = predict_batch(net, [s.image for s in samples], mean, std)
    counts = sum((confusion_counts(p > threshold, s.foreground()) for p, s in zip(probs, samples)),
                 np.zeros(4, dtype=np.int64))
    return iou_from_counts(counts)


def _random_crop(sample, size, rng):
    h, w = sample.shape
    if h <= size and w <= size:
        return sample
    ph, pw = min(size, h), min(size, w)
    r = int(rng.integers(0, h - ph + 1))
    c = int(rng.integers(0, w - pw + 1))
    pts = sample.points - [r, c]
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < ph) & (pts[:, 1] >= 0) & (pts[:, 1] < pw)
    mask = None if sample.instance_mask is None else sample.instance_mask[r:r + ph, c:c + pw]
    return sample.with_(image=sample.image[r:r + ph, c:c + pw], labels=sample.labels[r:r + ph, c:c + pw],
                        instance_mask=mask, points=pts[keep])


def epoch_batches(samples, cfg: TrainConfig, epoch: int):
    """Yield (images, labels) numpy batches; a pure function of (seed, epoch)."""
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(samples))
    draw = rng.integers(0, 2 ** 31, size=len(samples))
    for start in range(0, len(order), cfg.batch_size):
        imgs, labs = [], []
        for i in order[start:start + cfg.batch_size]:
            crop = _random_crop(samples[i], cfg.patch_size, rng)
            crop = augment(crop, cfg.augmentation, int(draw[i]))
            imgs.append(crop.image)
            labs.append(crop.labels)
        if len({im.shape for im in imgs}) > 1:
            raise ValueError("training images smaller than the patch size must share one shape")
        yield np.stack(imgs), np.stack(labs)


def memory_format(nets) -> torch.memory_format:
    """channels_last is faster on CPU, but backward crashes on some builds with very narrow convs."""
    widths = [m.out_channels for net in nets for m in net.modules()
              if isinstance(m, torch.nn.Conv2d) and m.out_channels > 2]
    return torch.channels_last if widths and min(widths) >= 16 else torch.contiguous_format


def build_models(cfg: TrainConfig) -> dict:
    """Build f, then g and h as the method requires, from one seed."""
    torch.manual_seed(cfg.seed)
    nets = {"segmentation": build_network(cfg.seg_spec)}
    if cfg.uses_edge:
        nets["edge"] = build_network(cfg.edge_spec)
    if cfg.uses_attention:
        nets["attention"] = build_network(cfg.att_spec)
    return nets


def _snapshot(nets):
    return {role: {k: v.detach().to("cpu", copy=True) for k, v in net.state_dict().items()}
            for role, net in nets.items()}


def default_device() -> torch.device:
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def train(train_samples, val_samples, cfg: TrainConfig, callback=None, device=None):
    """Train per ``cfg``; returns ``(checkpoint, history)`` for the best validation epoch.

    ``callback(record, nets)`` runs after every epoch when given. Training uses
    the GPU when one is visible unless ``device`` says otherwise; the returned
    checkpoint always holds CPU tensors.
    """
    device = default_device() if device is None else torch.device(device)
    if not train_samples or not val_samples:
        raise ValueError("training and validation sets must be non-empty")
    mean, std = channel_stats(train_samples)
    nets = build_models(cfg)
    fmt = memory_format(nets.values())
    for net in nets.values():
        net.to(device=device, memory_format=fmt)
    params = [p for net in nets.values() for p in net.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.adam_eps)
    sched = PlateauHalving(opt, cfg.lr_factor, cfg.lr_patience)
    history = TrainHistory()
    best_state = None
    f = nets["segmentation"]
    g = nets.get("edge")
    h = nets.get("attention")

    for epoch in range(1, cfg.epochs + 1):
        for net in nets.values():
            net.train()
        sums = np.zeros(3)
        steps = 0
        lr = sched.lr
        for images, labels in epoch_batches(train_samples, cfg, epoch):
            y = torch.from_numpy(labels)
            if not has_supervision(y):
                continue
            x = to_input(images, mean, std).to(device).contiguous(memory_format=fmt)
            seg = f(x)
            edge = g(x) if g is not None else None
            att = h(x) if h is not None else None
            parts = total_loss(seg, edge, att, y, cfg.loss)
            opt.zero_grad(set_to_none=True)
            parts.total.backward()
            opt.step()
            sums += [parts.ce.item(), parts.edge.item(), parts.total.item()]
            steps += 1
        means = sums / max(steps, 1)
        if not np.all(np.isfinite(means)):
            raise TrainingDiverged(f"epoch {epoch}: non-finite mean loss "
                                   f"(ce={means[0]}, edge={means[1]}, total={means[2]}) at lr={lr}")
        if steps:
            sched.step(float(means[2]))
        val_iou = dataset_iou(f, val_samples, mean, std, cfg.threshold)
        rec = EpochRecord(epoch, *map(float, means), val_iou=val_iou, lr=lr, steps=steps)
        history.epochs.append(rec)
        if val_iou > history.best_val_iou:
            history.best_val_iou = val_iou
            history.best_epoch = epoch
            best_state = _snapshot(nets)
        log.info("epoch %d  ce %.4f  edge %.4f  total %.4f  val_iou %.4f  lr %.2e",
                 epoch, means[0], means[1], means[2], val_iou, lr)
        if callback is not None:
            callback(rec, nets)

    extras = {role: (nets[role].spec, best_state[role]) for role in ("edge", "attention") if role in nets}
    ckpt = Checkpoint(cfg.seg_spec, best_state["segmentation"], mean, std, cfg.config_hash,
                      history.best_epoch, cfg.method, extras)
    return ckpt, history
