"""Frozen classification task network, its perceptual distortion, and the
procedural shapes dataset that stands in for a natural-image corpus.

Every image is a pure function of (dataset seed, index), so any split can
be regenerated bit-exactly from the manifest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

NUM_SHAPES = 5
SHAPE_NAMES = ("circle", "square", "triangle", "plus", "ring")
COLOR_NAMES = ("warm", "cool")
_PALETTES = ((0.85, 0.30, 0.22), (0.22, 0.45, 0.85))


class TaskError(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskNetConfig:
    stage_widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    num_classes: int = 10
    input_channels: int = 3


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    train_size: int = 5000
    val_size: int = 1000
    image_size: int = 64
    num_classes: int = 10

    def class_map(self) -> dict[int, str]:
        return {c: f"{SHAPE_NAMES[c % NUM_SHAPES]}/{COLOR_NAMES[c // NUM_SHAPES]}"
                for c in range(self.num_classes)}

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "train_size": self.train_size,
            "val_size": self.val_size,
            "image_size": self.image_size,
            "num_classes": self.num_classes,
            "class_map": {str(k): v for k, v in self.class_map().items()},
        }


def _rot(xg: np.ndarray, yg: np.ndarray, theta: float):
    c, s = np.cos(theta), np.sin(theta)
    return c * xg + s * yg, -s * xg + c * yg


def _shape_sdf(shape_id: int, xg: np.ndarray, yg: np.ndarray, radius: float) -> np.ndarray:
    if shape_id == 0:  # circle
        return np.hypot(xg, yg) - radius
    if shape_id == 1:  # square
        return np.maximum(np.abs(xg), np.abs(yg)) - radius * 0.85
    if shape_id == 2:  # triangle (equilateral, point up)
        k = np.sqrt(3.0)
        r = radius * 0.95
        px = np.abs(xg) - r
        py = -yg + r / k
        over = px + k * py > 0
        nx, ny = (px - k * py) / 2.0, (-k * px - py) / 2.0
        px = np.where(over, nx, px)
        py = np.where(over, ny, py)
        px = px - np.clip(px, -2.0 * r, 0.0)
        return -np.hypot(px, py) * np.sign(py)
    if shape_id == 3:  # plus
        arm, thick = radius, radius * 0.34
        b1 = np.maximum(np.abs(xg) - arm, np.abs(yg) - thick)
        b2 = np.maximum(np.abs(xg) - thick, np.abs(yg) - arm)
        return np.minimum(b1, b2)
    if shape_id == 4:  # ring
        return np.abs(np.hypot(xg, yg) - radius * 0.8) - radius * 0.28
    raise TaskError(f"unknown shape id {shape_id}")


def render_image(seed: int, index: int, size: int = 64, num_classes: int = 10) -> np.ndarray:
    """Render one (3, size, size) float32 image deterministically."""
    rng = np.random.default_rng([7, seed, index])
    cls = index % num_classes
    shape_id, color_id = cls % NUM_SHAPES, cls // NUM_SHAPES

    cx = rng.uniform(0.30, 0.70) * size
    cy = rng.uniform(0.30, 0.70) * size
    radius = rng.uniform(0.16, 0.30) * size
    theta = rng.uniform(0.0, 2.0 * np.pi)
    color = np.clip(np.asarray(_PALETTES[color_id]) + rng.uniform(-0.08, 0.08, 3),
                    0.05, 0.95)
    bg = rng.uniform(0.12, 0.35)
    grad_dir = rng.uniform(0.0, 2.0 * np.pi)
    grad_amp = rng.uniform(0.0, 0.08)
    noise = rng.normal(0.0, 0.015, (size, size))

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    xg, yg = _rot(xs - cx, ys - cy, theta)
    sdf = _shape_sdf(shape_id, xg, yg, radius)
    cov = np.clip(0.5 - sdf / 1.5, 0.0, 1.0)

    ramp = ((xs / size - 0.5) * np.cos(grad_dir) + (ys / size - 0.5) * np.sin(grad_dir))
    base = bg + grad_amp * ramp + noise
    img = base[None] * (1.0 - cov[None]) + color[:, None, None] * cov[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


class ShapesDataset:
    """Class-balanced procedural dataset; train indices come first, the
    validation split continues the same index space."""

    def __init__(self, config: DataConfig):
        if config.num_classes != NUM_SHAPES * len(COLOR_NAMES):
            raise TaskError(f"num_classes must be {NUM_SHAPES * len(COLOR_NAMES)}")
        self.config = config

    def _block(self, start: int, count: int) -> tuple[np.ndarray, np.ndarray]:
        imgs = np.stack([
            render_image(self.config.seed, i, self.config.image_size,
                         self.config.num_classes)
            for i in range(start, start + count)
        ])
        labels = np.arange(start, start + count) % self.config.num_classes
        return imgs, labels.astype(np.int64)

    def train_split(self) -> tuple[np.ndarray, np.ndarray]:
        return self._block(0, self.config.train_size)

    def val_split(self) -> tuple[np.ndarray, np.ndarray]:
        return self._block(self.config.train_size, self.config.val_size)


class TaskNet(nn.Module):
    """Four stride-2 conv stages, global pooling, linear head."""

    def __init__(self, config: TaskNetConfig = TaskNetConfig()):
        super().__init__()
        self.config = config
        w = config.stage_widths
        chans = (config.input_channels, *w)
        self.stages = nn.ModuleList([
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1)
            for i in range(4)
        ])
        self.head = nn.Linear(w[-1], config.num_classes)

    def stage_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.stages:
            h = F.relu(conv(h))
            feats.append(h)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stage_features(x)[-1]
        return self.head(h.mean(dim=(2, 3)))

    def freeze(self) -> "TaskNet":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def perceptual_distortion(self, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
        """Mean over the four stage-wise feature MSEs."""
        if x.shape != x_hat.shape:
            raise TaskError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
        fx = self.stage_features(x)
        fy = self.stage_features(x_hat)
        return sum(F.mse_loss(a, b) for a, b in zip(fx, fy)) / len(fx)


def top1_accuracy(net: TaskNet, images: torch.Tensor, labels: torch.Tensor,
                  batch_size: int = 256) -> float:
    net.eval()
    hits = 0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            pred = net(images[i:i + batch_size]).argmax(dim=1)
            hits += int((pred == labels[i:i + batch_size]).sum())
    return hits / len(images)


def pretrain_task_net(dataset: ShapesDataset, epochs: int = 5, seed: int = 0, *,
                      lr: float = 1e-3, batch_size: int = 64,
                      config: TaskNetConfig = TaskNetConfig()) -> tuple[TaskNet, float]:
    """Train the classifier on the synthetic set and return it frozen with
    its validation top-1."""
    torch.manual_seed(seed)
    net = TaskNet(config)
    tr_x, tr_y = dataset.train_split()
    va_x, va_y = dataset.val_split()
    tr_x = torch.from_numpy(tr_x)
    tr_y = torch.from_numpy(tr_y)
    va_x = torch.from_numpy(va_x)
    va_y = torch.from_numpy(va_y)

    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(epochs):
        perm = torch.randperm(len(tr_x), generator=gen)
        for i in range(0, len(perm), batch_size):
            idx = perm[i:i + batch_size]
            loss = F.cross_entropy(net(tr_x[idx]), tr_y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()

    acc = top1_accuracy(net, va_x, va_y)
    if acc < 0.60:
        raise TaskError(
            f"task net reached only {acc:.1%} validation top-1 "
            f"(chance is {1 / config.num_classes:.0%}); data pipeline looks broken"
        )
    net.freeze()
    return net, acc


def evaluate_accuracy(model, dataset_val: tuple[np.ndarray, np.ndarray],
                      task_net: TaskNet, *, limit: int | None = None) -> tuple[float, float]:
    """Code every validation image through the codec, classify the
    reconstruction, and report (mean bpp from actual bitstream lengths,
    top-1 fraction)."""
    from .codec import compress, decompress

    images, labels = dataset_val
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    n = len(images)
    if n == 0:
        raise TaskError("empty validation set")
    bpps = np.empty(n)
    hits = 0
    model.eval()
    task_net.eval()
    with torch.no_grad():
        for i in range(n):
            x = torch.from_numpy(images[i][None])
            blob = compress(model, x)
            x_hat = decompress(model, blob)
            bpps[i] = len(blob) * 8.0 / (x.shape[2] * x.shape[3])
            pred = int(task_net(x_hat).argmax(dim=1))
            hits += int(pred == labels[i])
    return float(bpps.mean()), hits / n
