"""Adam optimizer and the four training loops.

Every loop is deterministic in (data order, TrainConfig.rng_seed): fresh
model weights come from torch.manual_seed, shuffling from a dedicated numpy
PCG64 stream, and the optimizer is the plain Adam update rule below.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..dataio import (ClassificationSample, DetectionSample, SegmentationSample,
                      ValidationError)
from ..losses import LossConfig, detection_loss, focal_loss, segmentation_loss
from ..preprocess import downsample_volume, resize_stack, scale_box, zscore, zscore_stack
from .nets import (CLASSIFIER_INPUT, SEGMENTOR_INPUT, Baseline3DNet, ClassifierNet,
                   DetectorNet, SegmentorNet)


@dataclass
class EpochBudget:
    classifier: int
    detector: int
    segmentor: int


@dataclass
class TrainConfig:
    lr_classifier: float = 1e-5
    lr_detector: float = 1e-3
    lr_segmentor: float = 1e-3
    lr_baseline: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_classifier: int = 64
    batch_detector: int = 16
    batch_segmentor: int = 32
    batch_baseline: int = 2
    epochs_pretrain: EpochBudget = field(default_factory=lambda: EpochBudget(150, 100, 25))
    epochs_finetune: EpochBudget = field(default_factory=lambda: EpochBudget(50, 100, 15))
    baseline_grid: tuple[int, int, int] = (64, 96, 96)
    rng_seed: int = 0

    def __post_init__(self):
        if isinstance(self.epochs_pretrain, (tuple, list)):
            self.epochs_pretrain = EpochBudget(*self.epochs_pretrain)
        if isinstance(self.epochs_finetune, (tuple, list)):
            self.epochs_finetune = EpochBudget(*self.epochs_finetune)
        self.baseline_grid = tuple(int(g) for g in self.baseline_grid)
        if min(self.batch_classifier, self.batch_detector,
               self.batch_segmentor, self.batch_baseline) < 1:
            raise ValidationError("batch sizes must be >= 1")

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["baseline_grid"] = list(self.baseline_grid)
        return d


class Adam:
    """The Adam update rule over torch parameters.

    m_t = b1 m + (1-b1) g;  v_t = b2 v + (1-b2) g^2
    p  -= lr * (m_t / (1-b1^t)) / (sqrt(v_t / (1-b2^t)) + eps)
    """

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def preprocess_classifier_batch(images: np.ndarray) -> torch.Tensor:
    """Native slices -> zscored 224x224 float32 tensor (N, H, W)."""
    resized = resize_stack(images, (CLASSIFIER_INPUT, CLASSIFIER_INPUT), "bilinear")
    return torch.as_tensor(zscore_stack(resized))


def train_classifier(
    data: list[ClassificationSample],
    config: TrainConfig,
    init: ClassifierNet | None = None,
    epochs: int | None = None,
    loss_config: LossConfig | None = None,
) -> tuple[ClassifierNet, list[float]]:
    """Focal-loss training; epochs default to the pretrain/finetune budget."""
    if not data:
        raise ValidationError("empty classification dataset")
    loss_config = loss_config or LossConfig()
    if epochs is None:
        epochs = config.epochs_pretrain.classifier if init is None else config.epochs_finetune.classifier
    torch.manual_seed(config.rng_seed)
    model = init if init is not None else ClassifierNet()
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    opt = Adam(model.parameters(), config.lr_classifier, config.beta1, config.beta2, config.eps_adam)

    images = [s.image for s in data]
    labels = np.array([s.label for s in data], dtype=np.float32)
    history = []
    model.train()
    for _ in range(epochs):
        losses = []
        for idx in _batches(len(data), config.batch_classifier, rng):
            x = preprocess_classifier_batch(np.stack([images[i] for i in idx]))
            y = torch.as_tensor(labels[idx])
            opt.zero_grad()
            probs = model(x)
            loss = focal_loss(probs, y, alpha=loss_config.alpha, gamma=loss_config.gamma,
                              eps=loss_config.epsilon_stability)
            loss.backward()
            opt.step()
            losses.append(float(loss))
        history.append(float(np.mean(losses)))
    return model, history


def detector_targets_for_sample(grid, sample: DetectionSample):
    """Anchor labels/deltas for one foreground slice, boxes mapped to 224."""
    if not sample.boxes:
        raise ValidationError(f"detection sample {sample.case_id}[{sample.slice_index}] has zero boxes")
    h, w = sample.image.shape
    size = grid.image_size
    gt = np.array([scale_box(b.as_tuple(), (h, w), (size, size)) for b in sample.boxes])
    return grid.assign(gt)


def train_detector(
    data: list[DetectionSample],
    config: TrainConfig,
    init: DetectorNet | None = None,
    epochs: int | None = None,
    loss_config: LossConfig | None = None,
) -> tuple[DetectorNet, list[float]]:
    """Composite objectness/box-regression training on foreground slices."""
    if not data:
        raise ValidationError("empty detection dataset")
    loss_config = loss_config or LossConfig()
    if epochs is None:
        epochs = config.epochs_pretrain.detector if init is None else config.epochs_finetune.detector
    torch.manual_seed(config.rng_seed)
    model = init if init is not None else DetectorNet()
    grid = model.anchor_grid
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    opt = Adam(model.parameters(), config.lr_detector, config.beta1, config.beta2, config.eps_adam)

    size = grid.image_size
    inputs = zscore_stack(resize_stack(np.stack([s.image for s in data]), (size, size), "bilinear"))
    labels = np.empty((len(data), len(grid)), dtype=np.int8)
    targets = np.empty((len(data), len(grid), 4), dtype=np.float32)
    for i, sample in enumerate(data):
        labels[i], targets[i] = detector_targets_for_sample(grid, sample)

    history = []
    model.train()
    for _ in range(epochs):
        losses = []
        for idx in _batches(len(data), config.batch_detector, rng):
            x = torch.as_tensor(inputs[idx])
            opt.zero_grad()
            probs, deltas = model(x)
            loss = detection_loss(probs, deltas,
                                  torch.as_tensor(labels[idx]), torch.as_tensor(targets[idx]),
                                  lambda_det=loss_config.lambda_det,
                                  eps=loss_config.epsilon_stability)
            loss.backward()
            opt.step()
            losses.append(float(loss))
        history.append(float(np.mean(losses)))
    return model, history


def preprocess_roi(image_patch: np.ndarray, mask_patch: np.ndarray | None = None):
    """ROI patch -> zscored 128x128 image (and nearest-resized binary mask)."""
    target = (SEGMENTOR_INPUT, SEGMENTOR_INPUT)
    img = zscore(resize_stack(np.asarray(image_patch, dtype=np.float32)[None], target, "bilinear")[0])
    if mask_patch is None:
        return img
    mask = resize_stack(np.asarray(mask_patch, dtype=np.uint8)[None], target, "nearest")[0]
    return img, mask


def train_segmentor(
    data: list[SegmentationSample],
    config: TrainConfig,
    init: SegmentorNet | None = None,
    epochs: int | None = None,
    loss_config: LossConfig | None = None,
) -> tuple[SegmentorNet, list[float]]:
    """Generalized-Dice + focal training on ROI patches."""
    if not data:
        raise ValidationError("empty segmentation dataset")
    loss_config = loss_config or LossConfig()
    if epochs is None:
        epochs = config.epochs_pretrain.segmentor if init is None else config.epochs_finetune.segmentor
    torch.manual_seed(config.rng_seed)
    model = init if init is not None else SegmentorNet()
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    opt = Adam(model.parameters(), config.lr_segmentor, config.beta1, config.beta2, config.eps_adam)

    n = len(data)
    images = np.empty((n, SEGMENTOR_INPUT, SEGMENTOR_INPUT), dtype=np.float32)
    masks = np.empty((n, SEGMENTOR_INPUT, SEGMENTOR_INPUT), dtype=np.float32)
    for i, s in enumerate(data):
        if s.image_patch.shape != s.mask_patch.shape:
            raise ValidationError(f"ROI image/mask dims differ for {s.case_id}[{s.slice_index}]")
        img, mask = preprocess_roi(s.image_patch, s.mask_patch)
        images[i] = img
        masks[i] = mask

    history = []
    model.train()
    for _ in range(epochs):
        losses = []
        for idx in _batches(n, config.batch_segmentor, rng):
            x = torch.as_tensor(images[idx])
            y = torch.as_tensor(masks[idx])
            opt.zero_grad()
            probs = model(x)
            loss = segmentation_loss(probs, y, loss_config)
            loss.backward()
            opt.step()
            losses.append(float(loss))
        history.append(float(np.mean(losses)))
    return model, history


def matched_baseline_steps(n_classification: int, n_detection: int, n_segmentation: int,
                           config: TrainConfig, budget: EpochBudget) -> int:
    """Gradient-step count of the three cascade modules under one budget."""
    steps = 0
    for n, batch, epochs in (
        (n_classification, config.batch_classifier, budget.classifier),
        (n_detection, config.batch_detector, budget.detector),
        (n_segmentation, config.batch_segmentor, budget.segmentor),
    ):
        steps += math.ceil(n / batch) * epochs
    return steps


def preprocess_baseline_volume(voxels: np.ndarray, grid: tuple[int, int, int]) -> np.ndarray:
    small = downsample_volume(np.asarray(voxels, dtype=np.float32), grid, mode="mean")
    return zscore(small.reshape(-1)).reshape(grid).astype(np.float32)


def train_baseline(
    data: list[tuple[np.ndarray, np.ndarray]],
    config: TrainConfig,
    steps: int,
    init: Baseline3DNet | None = None,
    loss_config: LossConfig | None = None,
) -> tuple[Baseline3DNet, list[float]]:
    """Single-step 3D U-Net on (volume, mask) pairs for a fixed step budget.

    Volumes are block-averaged down to config.baseline_grid and z-scored;
    masks are nearest-resampled. History holds one mean loss per data pass.
    """
    if not data:
        raise ValidationError("empty baseline dataset")
    if steps < 0:
        raise ValidationError("steps must be >= 0")
    loss_config = loss_config or LossConfig()
    grid = config.baseline_grid
    torch.manual_seed(config.rng_seed)
    model = init if init is not None else Baseline3DNet(grid=grid)
    if model.grid != grid:
        raise ValidationError(f"init model grid {model.grid} != config grid {grid}")
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    opt = Adam(model.parameters(), config.lr_baseline, config.beta1, config.beta2, config.eps_adam)

    n = len(data)
    volumes = np.stack([preprocess_baseline_volume(v, grid) for v, _ in data])
    masks = np.stack([downsample_volume(np.asarray(m, dtype=np.float32), grid, mode="nearest")
                      for _, m in data])

    history: list[float] = []
    done = 0
    model.train()
    while done < steps:
        losses = []
        for idx in _batches(n, config.batch_baseline, rng):
            if done >= steps:
                break
            x = torch.as_tensor(volumes[idx])
            y = torch.as_tensor(masks[idx])
            opt.zero_grad()
            probs = model(x)
            loss = segmentation_loss(probs, y, loss_config)
            loss.backward()
            opt.step()
            losses.append(float(loss))
            done += 1
        if losses:
            history.append(float(np.mean(losses)))
    return model, history
