"""Student/teacher training loop with flip-consistency losses.

One iteration: initial augmentation -> (consistency modes) flipped teacher view
-> student forward with supervised + consistency loss -> backward into the
student only -> AdamW step -> EMA teacher update.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .boxgeom import anchor_permutation
from .data import LabeledSample, dataset_fingerprint, ensure_dir, initial_augment, load_dataset, make_pair
from .errors import (ArchMismatch, BadMagic, ChecksumMismatch, IoError, NonFiniteLoss, ShapeMismatch, Truncated,
                     VersionMismatch)
from .evaluation import CONF_THRESHOLD, NMS_IOU, MetricsReport, evaluate
from .losses import (LossBreakdown, cls_consistency_total, loc_consistency_total, match_targets,
                     ramp_weight, supervised_terms, teacher_confidence_mask, total_loss)
from .model import DetectorParams, StudentTeacher, anchor_grid, ema_update, forward, init_params

log = logging.getLogger(__name__)

# mode -> (flip inside initial augmentation, consistency losses)
MODES = {
    "vanilla": (False, False),
    "flipaug": (True, False),
    "consis": (False, True),
    "consis_flipaug": (True, True),
}

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    data_dir: str = "data"
    out_dir: str = "runs/train"
    mode: str = "consis_flipaug"
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 16
    max_lr: float = 1e-4
    weight_decay: float = 0.01
    tau: float = 0.01
    consistency_weight: float = 1.0
    consistency_ramp_epochs: int = 0
    confidence_mask_threshold: float = 0.0
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    seed: int = 0
    eval_every: int = 1
    train_split: str = "train"
    val_split: str = "val"
    num_classes: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need epochs >= 1 and 0 <= warmup_epochs < epochs")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        for name in ("max_lr", "weight_decay", "consistency_weight", "confidence_mask_threshold"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ schedule

def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0 to max_lr, then half-cosine decay towards 0."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.max_lr * step / warm
    t = min(1.0, (step - warm) / max(1, total - warm))
    return cfg.max_lr * 0.5 * (1.0 + math.cos(math.pi * t))


# ----------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    weight_decay: float = 0.0
    t: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS

    @classmethod
    def zeros_like(cls, params: DetectorParams, weight_decay: float) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in params.tensors.items()},
                   {k: np.zeros_like(t.data) for k, t in params.tensors.items()}, weight_decay)


def optimizer_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
                   lr: float) -> None:
    """AdamW: bias-corrected Adam step plus decay ``-lr * wd * theta`` on the weights."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -------------------------------------------------------------------- batches

@dataclass
class Batch:
    ids: list[str]
    images: np.ndarray
    targets: list
    teacher_images: np.ndarray | None = None
    perms: np.ndarray | None = None
    kinds: list | None = None


def sample_seeds(seed: int, epoch: int, index: int) -> tuple[list[int], list[int]]:
    """Seeds for (initial augmentation, pair flip) of one sample in one epoch."""
    return [seed, epoch, index, 0], [seed, epoch, index, 1]


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def make_batch(samples: list[LabeledSample], indices, cfg: TrainConfig, epoch: int, grid) -> Batch:
    flip_in_initial, consistency = MODES[cfg.mode]
    ids, images, targets, t_images, perms, kinds = [], [], [], [], [], []
    for idx in indices:
        s = samples[idx]
        aug_seed, pair_seed = sample_seeds(cfg.seed, epoch, int(idx))
        aug = initial_augment(s, aug_seed, enable_flip=flip_in_initial)
        ids.append(s.id)
        images.append(aug.image)
        targets.append(match_targets(grid, aug.boxes, aug.classes, cfg.pos_iou, cfg.neg_iou))
        if consistency:
            pair = make_pair(aug, pair_seed)
            t_images.append(pair.teacher_image)
            perms.append(anchor_permutation(grid, pair.kind))
            kinds.append(pair.kind)
    batch = Batch(ids, np.stack(images), targets)
    if consistency:
        batch.teacher_images = np.stack(t_images)
        batch.perms = np.stack(perms)
        batch.kinds = kinds
    return batch


def train_step(batch: Batch, st: StudentTeacher, opt: OptimizerState, cfg: TrainConfig, lr: float,
               consistency_weight: float | None = None) -> LossBreakdown:
    """One optimization step on ``batch``; returns the batch-averaged loss breakdown."""
    if not batch.ids:
        raise ValueError("empty batch")
    weight = cfg.consistency_weight if consistency_weight is None else consistency_weight
    st.student.zero_grad()
    with ad.Tape() as tape:
        out = forward(st.student, batch.images, train_mode=True)
        ce, box = supervised_terms(out, batch.targets)
        sup = ce + box
        if batch.teacher_images is not None:
            with tape.paused():
                t_out = forward(st.teacher, batch.teacher_images, train_mode=False).detached()
            mask = teacher_confidence_mask(t_out, batch.perms, cfg.confidence_mask_threshold)
            con_loc = loc_consistency_total(out, t_out, batch.perms, batch.kinds, mask)
            con_cls = cls_consistency_total(out, t_out, batch.perms, mask)
        else:
            con_loc = con_cls = ad.Tensor(0.0)
        objective, breakdown = total_loss(sup, con_loc, con_cls, weight)
        if not all(math.isfinite(x) for x in breakdown.as_dict().values()):
            raise NonFiniteLoss(f"non-finite loss {breakdown.as_dict()} in batch {batch.ids}")
        ad.backward(objective, tape)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in st.student.tensors.items()}
    optimizer_step(st.student.tensors, grads, opt, lr)
    st.student.step += 1
    ema_update(st)
    return breakdown


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CSAG"
FORMAT_F32 = 1  # payload little-endian float32
FORMAT_F64 = 2  # same layout, float64 payload; exact for resume
_PAYLOAD = {FORMAT_F32: "<f4", FORMAT_F64: "<f8"}


@dataclass
class Checkpoint:
    arch_hash: int
    step: int
    tensors: dict[str, np.ndarray]
    version: int = FORMAT_F64

    @property
    def config(self) -> dict:
        raw = self.tensors.get("meta/config")
        return json.loads(bytes(raw.astype(np.uint8)).decode()) if raw is not None else {}

    def params(self, prefix: str, num_classes: int) -> DetectorParams:
        tensors = {k[len(prefix) + 1:]: ad.Tensor(v.astype(np.float64), requires_grad=True)
                   for k, v in self.tensors.items() if k.startswith(prefix + "/")}
        return DetectorParams(tensors, num_classes, self.step)

    def state(self) -> tuple[StudentTeacher, OptimizerState, TrainConfig]:
        cfg = TrainConfig.from_dict(self.config)
        student = self.params("student", cfg.num_classes)
        teacher = self.params("teacher", cfg.num_classes)
        if student.architecture_hash() != self.arch_hash:
            raise ArchMismatch("checkpoint tensors do not match the recorded architecture hash")
        opt = OptimizerState({k: self.tensors[f"adam_m/{k}"].astype(np.float64).copy() for k in student.tensors},
                             {k: self.tensors[f"adam_v/{k}"].astype(np.float64).copy() for k in student.tensors},
                             cfg.weight_decay, t=self.step)
        return StudentTeacher(student, teacher, cfg.tau), opt, cfg


def make_checkpoint(st: StudentTeacher, opt: OptimizerState, cfg: TrainConfig) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for prefix, params in (("student", st.student), ("teacher", st.teacher)):
        for k, t in params.tensors.items():
            tensors[f"{prefix}/{k}"] = t.data.copy()
    for k in st.student.tensors:
        tensors[f"adam_m/{k}"] = opt.m[k].copy()
        tensors[f"adam_v/{k}"] = opt.v[k].copy()
    # out_dir is left out so identical runs write identical bytes wherever they land
    stored = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
    cfg_bytes = json.dumps(stored, sort_keys=True).encode()
    tensors["meta/config"] = np.frombuffer(cfg_bytes, dtype=np.uint8).astype(np.float64)
    return Checkpoint(st.student.architecture_hash(), st.student.step, tensors)


def checkpoint_bytes(ckpt: Checkpoint, version: int | None = None) -> bytes:
    version = ckpt.version if version is None else version
    if version not in _PAYLOAD:
        raise VersionMismatch(f"cannot write checkpoint version {version}")
    parts = [MAGIC, struct.pack("<IIQI", version, ckpt.arch_hash, ckpt.step, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_PAYLOAD[version]).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path, version: int | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(checkpoint_bytes(ckpt, version))
        tmp.replace(path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def _parse_body(body: bytes) -> Checkpoint:
    def need(pos, n):
        if pos + n > len(body):
            raise Truncated("checkpoint ends before its declared contents")

    need(0, 24)
    version, arch, step, count = struct.unpack_from("<IIQI", body, 4)
    if version not in _PAYLOAD:
        raise VersionMismatch(f"unsupported checkpoint version {version}")
    dtype = np.dtype(_PAYLOAD[version])
    pos = 24
    tensors = {}
    for _ in range(count):
        need(pos, 4)
        (nlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        need(pos, nlen + 4)
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", body, pos)
        pos += 4
        need(pos, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        need(pos, nbytes)
        tensors[name] = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos) \
            .reshape(dims).astype(np.float64)
        pos += nbytes
    if pos != len(body):
        raise ChecksumMismatch("trailing bytes after the last tensor")
    return Checkpoint(arch, step, tensors, version)


def load_checkpoint(path, expected_arch: int | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 4:
        raise Truncated(f"{path}: file too short")
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < 24 + 32:
        raise Truncated(f"{path}: file too short")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        _parse_body(body)  # raises Truncated when the file was cut short
        raise ChecksumMismatch(f"{path}: checksum mismatch")
    ckpt = _parse_body(body)
    if expected_arch is not None and ckpt.arch_hash != expected_arch:
        raise ArchMismatch(f"{path}: architecture hash {ckpt.arch_hash:#x} != expected {expected_arch:#x}")
    return ckpt


# ----------------------------------------------------------------------- loop

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    losses: list[LossBreakdown] = field(default_factory=list)


def metrics_line(epoch: int, split: str, report: MetricsReport, losses: dict, lr: float, cfg: TrainConfig) -> dict:
    return {
        "epoch": epoch, "split": split,
        "precision": report.precision, "recall": report.recall, "map50": report.map50,
        "f1": report.f1, "f2": report.f2,
        "loss_sup": losses["sup"], "loss_con_loc": losses["con_loc"], "loss_con_cls": losses["con_cls"],
        "lr": lr, "mode": cfg.mode, "seed": cfg.seed,
        "tp": report.tp, "fp": report.fp, "fn": report.fn,
        "conf_threshold": report.conf_threshold, "nms_iou": report.nms_iou,
    }


def _dump_json_line(d: dict) -> str:
    return json.dumps(d, separators=(", ", ": ")) + "\n"


def train(cfg: TrainConfig, resume=None, stop_after_epochs: int | None = None,
          train_set: list[LabeledSample] | None = None, val_set: list[LabeledSample] | None = None) -> TrainResult:
    """Run the full schedule; writes metrics.jsonl, last.ckpt, best.ckpt and config.json to out_dir.

    ``stop_after_epochs`` ends this invocation early (the schedule still spans
    ``cfg.epochs``), which is how interrupted-then-resumed runs are produced.
    """
    cfg.validate()
    out = ensure_dir(cfg.out_dir)
    data_dir = Path(cfg.data_dir)
    if train_set is None:
        train_set = load_dataset(data_dir / cfg.train_split)
    if val_set is None:
        val_set = load_dataset(data_dir / cfg.val_split)
    if not train_set:
        raise IoError(f"no training samples under {data_dir / cfg.train_split}")
    image_size = train_set[0].image.shape[-1]
    grid = anchor_grid(image_size)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    metrics_path = out / "metrics.jsonl"

    if resume is not None:
        ckpt = load_checkpoint(resume)
        st, opt, saved_cfg = ckpt.state()
        if dataclasses.replace(saved_cfg, out_dir=cfg.out_dir) != cfg:
            log.warning("resuming with a config that differs from the checkpoint snapshot")
        if st.student.step % steps_per_epoch:
            raise ValueError("can only resume from an epoch boundary")
        start_epoch = st.student.step // steps_per_epoch
        history = [json.loads(line) for line in metrics_path.read_text().splitlines()] if metrics_path.exists() else []
        history = [h for h in history if h["epoch"] <= start_epoch]
    else:
        st = init_params(cfg.seed, cfg.num_classes, image_size)
        opt = OptimizerState.zeros_like(st.student, cfg.weight_decay)
        start_epoch = 0
        history = []
    st.tau = cfg.tau
    snapshot = dict(cfg.to_dict(), dataset=dataset_fingerprint(data_dir / cfg.train_split))
    (out / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    metrics_path.write_text("".join(_dump_json_line(h) for h in history))

    best = max((h["map50"] for h in history), default=-1.0)
    losses: list[LossBreakdown] = []
    end_epoch = cfg.epochs if stop_after_epochs is None else min(cfg.epochs, stop_after_epochs)
    for epoch in range(start_epoch, end_epoch):
        order = epoch_order(cfg.seed, epoch, len(train_set))
        epoch_losses = []
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = make_batch(train_set, idx, cfg, epoch, grid)
            step = st.student.step
            lr = lr_at(step, cfg, steps_per_epoch)
            weight = ramp_weight(step, cfg.consistency_ramp_epochs * steps_per_epoch, cfg.consistency_weight)
            try:
                br = train_step(batch, st, opt, cfg, lr, weight)
            except NonFiniteLoss as exc:
                dump = {"epoch": epoch, "step": step, "batch_index": b, "ids": batch.ids, "error": str(exc)}
                (out / "nonfinite_batch.json").write_text(json.dumps(dump, indent=2) + "\n")
                raise NonFiniteLoss(f"epoch {epoch} batch {b} (ids {batch.ids}): {exc}") from None
            epoch_losses.append(br)
        losses.extend(epoch_losses)
        ckpt = make_checkpoint(st, opt, cfg)
        save_checkpoint(ckpt, out / "last.ckpt")
        done = epoch + 1
        if done % cfg.eval_every == 0 or done == cfg.epochs:
            report = evaluate(st.student, val_set, grid, CONF_THRESHOLD, NMS_IOU)
            mean = {k: float(np.mean([getattr(x, k) for x in epoch_losses])) for k in ("sup", "con_loc", "con_cls")}
            line = metrics_line(done, "val", report, mean, lr, cfg)
            history.append(line)
            with metrics_path.open("a") as fh:
                fh.write(_dump_json_line(line))
            if report.map50 > best:
                best = report.map50
                save_checkpoint(ckpt, out / "best.ckpt")
            log.info("epoch %d map50 %.4f sup %.4f con_loc %.4f con_cls %.4f", done, report.map50,
                     mean["sup"], mean["con_loc"], mean["con_cls"])
    final = make_checkpoint(st, opt, cfg)
    return TrainResult(final, history, losses)
