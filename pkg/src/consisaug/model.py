"""Tiny anchor-based detector shared by student and teacher, plus the EMA update."""

from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .boxgeom import AnchorGrid
from .errors import InvalidImageSize, ShapeMismatch

STRIDE = 8
ANCHOR_SHAPES = ((12.0, 12.0), (24.0, 24.0), (16.0, 28.0))
BACKBONE = ((3, 16), (16, 32), (32, 64))
# decay = 1 - tau; teacher <- tau * student + (1 - tau) * teacher
DEFAULT_TAU = 0.01


@dataclass
class DetectorParams:
    tensors: dict[str, ad.Tensor]
    num_classes: int
    step: int = 0

    @property
    def head_width(self) -> int:
        return self.num_classes + 1 + 4

    @property
    def num_shapes(self) -> int:
        return self.tensors["head.w"].shape[0] // self.head_width

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def architecture_hash(self) -> int:
        return architecture_hash({k: t.shape for k, t in self.tensors.items()}, self.num_classes)

    def copy(self) -> "DetectorParams":
        return DetectorParams({k: ad.Tensor(t.data.copy(), requires_grad=t.requires_grad)
                               for k, t in self.tensors.items()}, self.num_classes, self.step)


def architecture_hash(shapes: dict[str, tuple[int, ...]], num_classes: int) -> int:
    desc = ";".join(f"{k}:{'x'.join(map(str, s))}" for k, s in shapes.items())
    desc += f";classes={num_classes};stride={STRIDE};anchors={ANCHOR_SHAPES}"
    return zlib.crc32(desc.encode())


@dataclass
class DetectorOutput:
    """Per-anchor predictions; arrays are ``K x ...`` or batched ``N x K x ...``."""

    cls: ad.Tensor
    log_cls: ad.Tensor
    loc: ad.Tensor

    @property
    def num_anchors(self) -> int:
        return self.loc.shape[-2]

    def detached(self) -> "DetectorOutput":
        return DetectorOutput(ad.detach(self.cls), ad.detach(self.log_cls), ad.detach(self.loc))

    def batched(self) -> "DetectorOutput":
        if self.loc.ndim == 3:
            return self
        return DetectorOutput(*(ad.reshape(t, (1,) + t.shape) for t in (self.cls, self.log_cls, self.loc)))

    def __getitem__(self, n: int) -> "DetectorOutput":
        """Detached single-image view."""
        return DetectorOutput(ad.Tensor(self.cls.data[n]), ad.Tensor(self.log_cls.data[n]),
                              ad.Tensor(self.loc.data[n]))


@dataclass
class StudentTeacher:
    student: DetectorParams
    teacher: DetectorParams
    tau: float = DEFAULT_TAU
    extras: dict = field(default_factory=dict)


def anchor_grid(image_size: int) -> AnchorGrid:
    if image_size % STRIDE or image_size <= 0:
        raise InvalidImageSize(f"image size {image_size} is not a positive multiple of {STRIDE}")
    return AnchorGrid(image_size // STRIDE, STRIDE, ANCHOR_SHAPES)


def init_params(seed: int, num_classes: int = 1, image_size: int = 64) -> StudentTeacher:
    """He-uniform weights, zero biases; the teacher starts as an exact copy."""
    anchor_grid(image_size)
    rng = np.random.default_rng(seed)
    tensors: dict[str, ad.Tensor] = {}
    for idx, (cin, cout) in enumerate(BACKBONE, start=1):
        bound = np.sqrt(6.0 / (cin * 9))
        tensors[f"conv{idx}.w"] = ad.Tensor(rng.uniform(-bound, bound, (cout, cin, 3, 3)), requires_grad=True)
        tensors[f"conv{idx}.b"] = ad.Tensor(np.zeros(cout), requires_grad=True)
    cin = BACKBONE[-1][1]
    cout = len(ANCHOR_SHAPES) * (num_classes + 1 + 4)
    bound = np.sqrt(6.0 / cin)
    tensors["head.w"] = ad.Tensor(rng.uniform(-bound, bound, (cout, cin, 1, 1)), requires_grad=True)
    tensors["head.b"] = ad.Tensor(np.zeros(cout), requires_grad=True)
    student = DetectorParams(tensors, num_classes)
    return StudentTeacher(student, student.copy())


def forward(params: DetectorParams, image, train_mode: bool = True) -> DetectorOutput:
    """Run the detector on ``3 x H x W`` or ``N x 3 x H x W`` images.

    Anchors are ordered row-major over ``(i, j, shape)``. ``train_mode`` is
    accepted for interface symmetry; the network has no mode-dependent layers.
    """
    x = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
    single = x.ndim == 3
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeMismatch(f"forward expects 3-channel images, got {x.shape}")
    if x.shape[2] != x.shape[3] or x.shape[2] % STRIDE:
        raise ShapeMismatch(f"forward expects square images with side divisible by {STRIDE}, got {x.shape}")
    t = params.tensors
    h = x
    for idx in range(1, len(BACKBONE) + 1):
        h = ad.relu(ad.conv2d(h, t[f"conv{idx}.w"], t[f"conv{idx}.b"], stride=2, padding=1))
    h = ad.conv2d(h, t["head.w"], t["head.b"], stride=1, padding=0)
    n, _, s, _ = h.shape
    width = params.head_width
    h = ad.transpose(h, (0, 2, 3, 1))
    h = ad.reshape(h, (n, s * s * params.num_shapes, width))
    logits = ad.take(h, np.arange(params.num_classes + 1), axis=2)
    loc = ad.take(h, np.arange(params.num_classes + 1, width), axis=2)
    log_cls = ad.log_softmax(logits, axis=2)
    cls = ad.softmax(logits, axis=2)
    out = DetectorOutput(cls, log_cls, loc)
    if single:
        k = out.num_anchors
        out = DetectorOutput(ad.reshape(cls, (k, -1)), ad.reshape(log_cls, (k, -1)), ad.reshape(loc, (k, 4)))
    return out


def ema_update(st: StudentTeacher) -> None:
    """teacher <- tau * student + (1 - tau) * teacher, clamped to the segment between them."""
    tau = st.tau
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for name, tt in st.teacher.tensors.items():
        s = st.student.tensors[name].data
        t = tt.data
        if tau == 1.0:
            np.copyto(t, s)
            continue
        if tau == 0.0:
            continue
        new = tau * s + (1.0 - tau) * t
        # rounding can step a hair outside [min, max]; keep the update convex
        np.clip(new, np.minimum(s, t), np.maximum(s, t), out=t)
    st.teacher.step = st.student.step


def clone_state(st: StudentTeacher) -> StudentTeacher:
    return StudentTeacher(st.student.copy(), st.teacher.copy(), st.tau, copy.deepcopy(st.extras))
