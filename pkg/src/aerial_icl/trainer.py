"""Incremental training loop.

Each optimisation batch holds B tiles and their transformed copies, so the
network sees 2B supervised samples. For step t > 0 a frozen copy of the
previous network acts as teacher for the distillation terms.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses as L
from .dihedral import ALL_TRANSFORMS, Transform, apply_transform, sample_transform
from .errors import TrainingDivergedError
from .metrics import ConfusionMatrix, MetricsReport, build_report, f1_scores
from .rastertile import Dataset, StepSpec, TaskSequence, Tile, keep_classes
from .segnet import SegNet, clone_frozen, expand_classifier, expand_input_channels, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 8
    lr: float = 1e-3
    late_lr: float = 1e-4
    late_steps: list[int] | None = None  # None: the final step of a multi-step sequence
    weight_decay: float = 1e-2
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    ce: str = "unbiased"  # or "standard"
    classifier_init: str = "mib"  # or "random"
    paired_kd: bool = True
    transforms: tuple[Transform, ...] = ALL_TRANSFORMS
    val_fraction: float = 0.15
    ignore_index: int | None = None
    eval_batch_size: int = 32
    deterministic: bool = True

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be positive")
        if self.batch_size < 1:
            problems.append("batch_size must be positive")
        if not self.lr > 0 or not self.late_lr > 0:
            problems.append("learning rates must be > 0")
        if self.ce not in ("unbiased", "standard"):
            problems.append(f"ce must be 'unbiased' or 'standard', got {self.ce!r}")
        if self.classifier_init not in ("mib", "random"):
            problems.append(f"classifier_init must be 'mib' or 'random', got {self.classifier_init!r}")
        if not self.transforms:
            problems.append("transform allow-set is empty")
        if problems:
            raise ValueError("; ".join(problems))


# Ablation rows as presets over the loss configuration.
METHODS: dict[str, dict] = {
    "ft": dict(ce="standard", weights=L.LossWeights(0.0, 0.0, 0.0), classifier_init="random"),
    "ft-unbiased-cd": dict(ce="unbiased", weights=L.LossWeights(0.0, 0.1, 0.1), classifier_init="mib"),
    "mib": dict(ce="unbiased", weights=L.LossWeights(1.0, 0.0, 0.0), classifier_init="mib"),
    "mib+cd": dict(ce="unbiased", weights=L.LossWeights(1.0, 0.1, 0.1), classifier_init="mib"),
    "mib+seg-only": dict(ce="unbiased", weights=L.LossWeights(1.0, 0.1, 0.0), classifier_init="mib"),
    "mib+kd-only": dict(ce="unbiased", weights=L.LossWeights(1.0, 0.0, 0.1), classifier_init="mib"),
    "offline": dict(ce="standard", weights=L.LossWeights(0.0, 0.0, 0.0), classifier_init="mib"),
}


def apply_method(cfg: TrainConfig, method: str, lambda_kd: float | None = None) -> TrainConfig:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    preset = dict(METHODS[method])
    if lambda_kd is not None and preset["weights"].lambda_kd > 0:
        preset["weights"] = replace(preset["weights"], lambda_kd=lambda_kd)
    return replace(cfg, **preset)


def lr_schedule(epoch: int, step_index: int, cfg: TrainConfig, num_steps: int = 1) -> float:
    """Cosine annealing from the step's base rate towards zero."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    late = cfg.late_steps if cfg.late_steps is not None else ([num_steps - 1] if num_steps > 1 else [])
    base = cfg.late_lr if step_index in late else cfg.lr
    return base * (1 + math.cos(math.pi * epoch / cfg.epochs)) / 2


@dataclass
class Batch:
    x: torch.Tensor  # (B, C, H, W)
    tx: torch.Tensor
    transforms: list[Transform]
    y: torch.Tensor  # (B, H, W) int64
    ty: torch.Tensor


def build_batch(
    samples: Sequence[tuple[np.ndarray, np.ndarray]],
    rng: np.random.Generator,
    allow: Sequence[Transform] = ALL_TRANSFORMS,
) -> Batch:
    """Pair every (pixels, target) sample with one randomly transformed copy."""
    if not samples:
        raise ValueError("cannot build a batch from no samples")
    xs, txs, ys, tys, ts = [], [], [], [], []
    for pixels, target in samples:
        t = sample_transform(rng, allow)
        xs.append(pixels)
        ys.append(target)
        txs.append(apply_transform(t, pixels))
        tys.append(apply_transform(t, target))
        ts.append(t)
    return Batch(
        x=torch.from_numpy(np.stack(xs)).float(),
        tx=torch.from_numpy(np.stack(txs)).float(),
        transforms=ts,
        y=torch.from_numpy(np.stack(ys).astype(np.int64)),
        ty=torch.from_numpy(np.stack(tys).astype(np.int64)),
    )


def channel_lut(class_ids: Sequence[int], size: int = 256) -> np.ndarray:
    """Global class id -> classifier channel (unknown ids -> background)."""
    lut = np.zeros(size, dtype=np.int64)
    for ch, cid in enumerate(class_ids):
        lut[cid] = ch
    return lut


def step_samples(tiles: Sequence[Tile], keep: Sequence[int], class_ids: Sequence[int]):
    lut = channel_lut(class_ids)
    return [(t.pixels, lut[keep_classes(t.labels, keep)]) for t in tiles]


@dataclass
class StepState:
    step: StepSpec
    student: SegNet
    teacher: SegNet | None
    train_tiles: list[Tile]
    val_tiles: list[Tile]
    history: list[dict] = field(default_factory=list)


@torch.no_grad()
def predict(net: SegNet, pixels: np.ndarray | torch.Tensor, batch_size: int = 32) -> np.ndarray:
    """Argmax channel per pixel for a stack of images (N, C, H, W)."""
    was_training = net.training
    net.eval()
    x = torch.as_tensor(np.asarray(pixels), dtype=torch.float32)
    out = [net(x[i : i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)]
    net.train(was_training)
    return torch.cat(out).numpy()


def evaluate(
    net: SegNet, tiles: Sequence[Tile], keep: Sequence[int], batch_size: int = 32
) -> ConfusionMatrix:
    """Confusion over the network's channels; classes outside ``keep`` count as background."""
    cm = ConfusionMatrix(net.num_classes)
    lut = channel_lut(net.class_ids)
    for i in range(0, len(tiles), batch_size):
        chunk = tiles[i : i + batch_size]
        pred = predict(net, np.stack([t.pixels for t in chunk]), batch_size)
        gt = np.stack([lut[keep_classes(t.labels, keep)] for t in chunk])
        cm.accumulate(pred, gt)
    return cm


def _validation_score(net: SegNet, tiles: Sequence[Tile], step: StepSpec, batch_size: int) -> float:
    # Validation tiles only carry this step's labels, so predictions of old
    # classes are folded into the background before scoring the new ones.
    if not tiles:
        return math.nan
    lut = channel_lut(net.class_ids)
    new_channels = [net.class_ids.index(c) for c in step.new_classes]
    fold = np.zeros(net.num_classes, dtype=np.int64)
    fold[new_channels] = new_channels
    cm = ConfusionMatrix(net.num_classes)
    for i in range(0, len(tiles), batch_size):
        chunk = tiles[i : i + batch_size]
        pred = fold[predict(net, np.stack([t.pixels for t in chunk]), batch_size)]
        gt = np.stack([lut[keep_classes(t.labels, step.new_classes)] for t in chunk])
        cm.accumulate(pred, gt)
    return f1_scores(cm, exclude=(0,), classes=new_channels).micro


def _diagnose(bundle: L.LossBundle, logits: torch.Tensor, epoch: int, it: int) -> str:
    vals = {k: v for k, v in bundle.as_floats().items()}
    return (
        f"non-finite loss at epoch {epoch}, iteration {it}: {vals}; "
        f"logits finite={bool(torch.isfinite(logits).all())}, max |logit|={float(logits.detach().abs().max()):.3g}"
    )


def train_step(
    state: StepState,
    cfg: TrainConfig,
    num_steps: int = 1,
    log_sink: Callable[[dict], None] | None = None,
) -> StepState:
    """Optimise the student for one learning step; keeps the best-validation weights."""
    t = state.step.index
    student, teacher = state.student, state.teacher
    if t > 0 and teacher is None:
        raise ValueError(f"step {t} needs a frozen teacher")
    if t == 0 and teacher is not None:
        raise ValueError("step 0 cannot have a teacher")
    if not state.train_tiles:
        raise ValueError(f"step {t}: no training tiles for classes {state.step.new_classes}")

    rng = np.random.default_rng([cfg.seed, t])
    samples = step_samples(state.train_tiles, state.step.new_classes, student.class_ids)
    legal = {0} | {student.class_ids.index(c) for c in state.step.new_classes}
    old_channels = list(range(1, teacher.num_classes)) if teacher is not None else []
    params = [p for p in student.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    w = cfg.weights
    use_kd = teacher is not None and w.lambda_kd > 0
    use_inv_kd = teacher is not None and w.rho_inv_kd > 0

    best_score, best_state = -math.inf, None
    iteration = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, t, cfg, num_steps)
        for g in optimizer.param_groups:
            g["lr"] = lr
        student.train()
        order = rng.permutation(len(samples))
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = build_batch([samples[i] for i in order[start : start + cfg.batch_size]], rng, cfg.transforms)
            b = batch.x.shape[0]
            inputs = torch.cat([batch.x, batch.tx])
            targets = torch.cat([batch.y, batch.ty])
            present = set(torch.unique(targets).tolist())
            if not present <= legal:
                raise AssertionError(f"illegal training labels {sorted(present - legal)} at step {t}")

            feats, logits = student.forward_all(inputs)
            if cfg.ce == "unbiased":
                ce = L.unbiased_cross_entropy(logits, targets, old_channels, cfg.ignore_index)
            else:
                ce = L.standard_cross_entropy(logits, targets, cfg.ignore_index)
            kd = inv_kd = None
            if teacher is not None and (use_kd or use_inv_kd):
                with torch.no_grad():
                    t_feats, t_logits = teacher.forward_all(inputs if cfg.paired_kd else batch.x)
                if use_kd:
                    kd = L.unbiased_kd(logits if cfg.paired_kd else logits[:b], t_logits)
                if use_inv_kd:
                    inv_kd = L.invariance_kd_loss(feats[b:], t_feats[:b], batch.transforms)
            inv_seg = L.invariance_seg_loss(feats[b:], feats[:b], batch.transforms) if w.eta_inv_seg > 0 else None
            bundle = L.total_loss(ce, w, t, kd=kd, inv_seg=inv_seg, inv_kd=inv_kd)
            if not torch.isfinite(bundle.total):
                raise TrainingDivergedError(_diagnose(bundle, logits, epoch, iteration))

            optimizer.zero_grad(set_to_none=True)
            bundle.total.backward()
            optimizer.step()

            vals = bundle.as_floats()
            record = {"kind": "iteration", "step": t, "epoch": epoch, "iteration": iteration, "lr": lr, **vals}
            if log_sink:
                log_sink(record)
            for k, v in vals.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
            iteration += 1

        score = _validation_score(student, state.val_tiles, state.step, cfg.eval_batch_size)
        means = {k: v / n_batches for k, v in sums.items()}
        summary = {"kind": "epoch", "step": t, "epoch": epoch, "lr": lr, "val_micro_f1": None if math.isnan(score) else score, **means}
        state.history.append(summary)
        if log_sink:
            log_sink(summary)
        log.info("step %d epoch %d total %.4f val micro-F1 %s", t, epoch, means["total"], summary["val_micro_f1"])
        # ties go to the later epoch; without validation data the last epoch wins
        cmp = -math.inf if math.isnan(score) else score
        if best_state is None or cmp >= best_score:
            best_score = cmp
            best_state = copy.deepcopy(student.state_dict())
    student.load_state_dict(best_state)
    return state


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    feature_dim: int = 16
    encoder_weights: str | None = None  # state-dict file loaded non-strictly at step 0
    expand_to_rgbir: bool = False  # encoder weights are 3-channel; grow the stem to 4 after loading


def _offline_sequence(seq: TaskSequence) -> TaskSequence:
    classes = tuple(c for s in seq.steps for c in s.new_classes)
    return TaskSequence(f"{seq.name}-offline", (StepSpec(0, classes, (0,) + classes),))


def _set_determinism(cfg: TrainConfig) -> None:
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)


def run_sequence(
    seq: TaskSequence,
    data: Dataset,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    out_dir: str | Path | None = None,
    offline: bool = False,
    log_sink: Callable[[dict], None] | None = None,
) -> tuple[SegNet, list[MetricsReport]]:
    """Train every step of ``seq`` and evaluate on the test split after each.

    With ``offline=True`` the whole sequence collapses into one step over
    all its classes (joint training upper bound).
    """
    model_cfg = model_cfg or ModelConfig()
    if offline:
        seq = _offline_sequence(seq)
    _set_determinism(cfg)
    train_parts = data.partitions("train")
    val_parts = data.partitions("val")
    test_tiles = data.split("test")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    channels = data.tiles[0].pixels.shape[0]

    net: SegNet | None = None
    reports: list[MetricsReport] = []
    step_log: list[dict] = []
    for step in seq.steps:
        train_tiles = [tl for c in step.new_classes for tl in train_parts.get(c, [])]
        val_tiles = [tl for c in step.new_classes for tl in val_parts.get(c, [])]
        if step.index == 0:
            grow = model_cfg.expand_to_rgbir and channels == 4
            net = SegNet(3 if grow else channels, model_cfg.widths, model_cfg.feature_dim, (0,) + step.new_classes)
            if model_cfg.encoder_weights:
                weights = torch.load(model_cfg.encoder_weights, weights_only=True)
                missing, _ = net.load_state_dict(weights, strict=False)
                log.info("loaded encoder weights; %d tensors left at init", len(missing))
            if grow:
                expand_input_channels(net, 4)
            teacher = None
        else:
            teacher = clone_frozen(net)
            expand_classifier(net, step.new_classes, init=cfg.classifier_init)
        state = StepState(step, net, teacher, train_tiles, val_tiles)
        train_step(state, cfg, num_steps=len(seq), log_sink=log_sink)
        net = state.student

        cm = evaluate(net, test_tiles, step.cumulative_classes, cfg.eval_batch_size)
        groups = {"step0": seq.steps[0].new_classes, "new": step.new_classes}
        if step.index > 0:
            groups["old"] = tuple(c for c in step.cumulative_classes[1:] if c not in step.new_classes)
        rep = build_report(cm, net.class_ids, data.labels.names, step.index, groups)
        reports.append(rep)
        step_log.append({"index": step.index, "new_classes": list(step.new_classes)})
        log.info("step %d test macro-F1 %s micro-F1 %s", step.index, rep.macro_f1, rep.micro_f1)
        if out is not None:
            meta = {"labels": data.labels.to_json(), "steps": step_log, "sequence": seq.to_json()}
            save_checkpoint(net, out / f"step{step.index}.ckpt", meta)
    return net, reports
