"""Dataset splits, the four-mode ablation, cross-domain evaluation and the gradient-check suite."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .boxgeom import FlipKind, anchor_permutation
from .data import DOMAINS, dataset_fingerprint, ensure_dir, generate_synthetic, load_dataset, write_manifest
from .errors import IoError
from .evaluation import evaluate
from .losses import cls_consistency_total, loc_consistency_total, match_targets, supervised_loss, total_loss
from .model import anchor_grid, forward, init_params
from .trainer import MODES, TrainConfig, load_checkpoint, train

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MODE_LABELS = {
    "vanilla": "(a) sup",
    "flipaug": "(b) sup+flip",
    "consis": "(c) sup+consis",
    "consis_flipaug": "(d) sup+flip+consis",
}
METRICS = ("map50", "precision", "recall", "f1", "f2")
GRAD_TOLERANCE = 1e-4


# ----------------------------------------------------------------- datasets

@dataclass
class GenConfig:
    out: str = "data"
    domain: str = "a"
    n_train: int = 500
    n_val: int = 50
    n_test: int = 50
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {sorted(DOMAINS)}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("--n-train, --n-val and --n-test must all be >= 1")
        anchor_grid(self.image_size)


def split_seed(seed: int, domain: str, split: str) -> int:
    key = [seed, sorted(DOMAINS).index(domain), SPLITS.index(split)]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def gen_data(cfg: GenConfig) -> list[tuple[str, str]]:
    """Write train/val/test splits under ``cfg.out`` plus a top-level manifest."""
    out = ensure_dir(cfg.out)
    domain = dataclasses.replace(DOMAINS[cfg.domain], image_size=cfg.image_size)
    entries = []
    for split, n in zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test)):
        for digest, rel in generate_synthetic(domain, n, split_seed(cfg.seed, cfg.domain, split), out / split):
            entries.append((digest, f"{split}/{rel}"))
    try:
        write_manifest(out / "manifest.txt", entries)
        (out / "gen_config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest under {out}: {exc}") from exc
    return entries


# ----------------------------------------------------------------- ablation

def package_fingerprint() -> str:
    """Hash of this package's source, so cached experiment cells expire when code changes."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def cell_dir(out_dir, mode: str, seed: int) -> Path:
    return Path(out_dir) / mode / f"seed{seed}"


def _cell_key(cfg: TrainConfig) -> dict:
    return {"config": cfg.to_dict(), "code": package_fingerprint(),
            "dataset": dataset_fingerprint(Path(cfg.data_dir) / cfg.train_split)}


def run_cell(cfg: TrainConfig, eval_split: str = "test") -> dict:
    """Train one (mode, seed) cell and evaluate its best checkpoint on ``eval_split``.

    A finished cell with the same config, code and data is reused as-is.
    """
    out = Path(cfg.out_dir)
    result_path = out / "result.json"
    key = _cell_key(cfg)
    if result_path.exists():
        cached = json.loads(result_path.read_text())
        if all(cached.get(k) == v for k, v in key.items()):
            log.info("reusing %s", out)
            return cached
    train(cfg)
    ckpt = load_checkpoint(out / "best.ckpt")
    samples = load_dataset(Path(cfg.data_dir) / eval_split)
    report = evaluate(ckpt.params("student", cfg.num_classes), samples, anchor_grid(samples[0].image.shape[-1]))
    result = dict(key, split=eval_split, best_step=ckpt.step, metrics=report.as_dict())
    result_path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def _run_cell_args(args) -> dict:
    return run_cell(*args)


def run_cells(cfgs: list[TrainConfig], jobs: int = 1) -> list[dict]:
    if jobs <= 1:
        return [run_cell(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell_args, [(c,) for c in cfgs]))


def summarize(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "values": [float(v) for v in arr]}


@dataclass
class AblationReport:
    seeds: list[int]
    cells: dict[str, dict[int, dict]] = field(default_factory=dict)  # mode -> seed -> metrics

    def summary(self) -> dict[str, dict[str, dict]]:
        return {mode: {m: summarize([self.cells[mode][s][m] for s in self.seeds]) for m in METRICS}
                for mode in MODES}

    def to_json(self) -> dict:
        return {"seeds": self.seeds, "modes": list(MODES),
                "cells": {mode: {str(s): r for s, r in per.items()} for mode, per in self.cells.items()},
                "summary": self.summary()}

    def to_text(self) -> str:
        summary = self.summary()
        rows = [["mode"] + list(METRICS)]
        for mode in MODES:
            rows.append([MODE_LABELS[mode]] + [f"{summary[mode][m]['mean']:.3f}±{summary[mode][m]['std']:.3f}"
                                               for m in METRICS])
        return format_table(rows) + f"\nseeds: {', '.join(map(str, self.seeds))}\n"


def format_table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def ablation_configs(base: TrainConfig, seeds, modes=tuple(MODES)) -> list[TrainConfig]:
    return [dataclasses.replace(base, mode=mode, seed=seed, out_dir=str(cell_dir(base.out_dir, mode, seed)))
            for seed in seeds for mode in modes]


def run_ablation(base: TrainConfig, seeds, jobs: int = 1) -> AblationReport:
    """Train every mode for every seed on shared data and per-seed shared initialization."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    cfgs = ablation_configs(base, seeds)
    results = run_cells(cfgs, jobs)
    report = AblationReport(seeds, {m: {} for m in MODES})
    for cfg, res in zip(cfgs, results):
        report.cells[cfg.mode][cfg.seed] = res["metrics"]
    out = ensure_dir(base.out_dir)
    (out / "ablation.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    (out / "ablation.txt").write_text(report.to_text())
    return report


# ------------------------------------------------------------- cross-domain

CROSS_MODELS = ("vanilla", "consis_flipaug")


def run_cross_domain(base: TrainConfig, seeds, target_dir, jobs: int = 1, split: str = "test") -> dict:
    """Evaluate vanilla and consis_flipaug checkpoints (trained on ``base.data_dir``) on both domains.

    Missing training cells are trained first; cells shared with an ablation run are reused.
    """
    seeds = list(seeds)
    cfgs = ablation_configs(base, seeds, CROSS_MODELS)
    run_cells(cfgs, jobs)
    domains = {"source": load_dataset(Path(base.data_dir) / split), "target": load_dataset(Path(target_dir) / split)}
    for name, samples in domains.items():
        if not samples:
            raise IoError(f"no {split} samples for the {name} domain")
    entries = []
    for mode in CROSS_MODELS:
        for domain, samples in domains.items():
            grid = anchor_grid(samples[0].image.shape[-1])
            per_seed = {}
            for cfg in (c for c in cfgs if c.mode == mode):
                ckpt = load_checkpoint(Path(cfg.out_dir) / "best.ckpt")
                per_seed[cfg.seed] = evaluate(ckpt.params("student", cfg.num_classes), samples, grid).as_dict()
            entries.append({"model": mode, "domain": domain, "per_seed": {str(s): r for s, r in per_seed.items()},
                            "summary": {m: summarize([r[m] for r in per_seed.values()]) for m in METRICS}})
    report = {"seeds": seeds, "source": str(base.data_dir), "target": str(target_dir), "split": split,
              "entries": entries}
    out = ensure_dir(base.out_dir)
    (out / "cross_domain.json").write_text(json.dumps(report, indent=2) + "\n")
    rows = [["model", "domain"] + list(METRICS)]
    for e in entries:
        rows.append([MODE_LABELS[e["model"]], e["domain"]] +
                    [f"{e['summary'][m]['mean']:.3f}±{e['summary'][m]['std']:.3f}" for m in METRICS])
    (out / "cross_domain.txt").write_text(format_table(rows) + "\n")
    return report


def cross_domain_entry(report: dict, model: str, domain: str) -> dict:
    return next(e for e in report["entries"] if e["model"] == model and e["domain"] == domain)


# --------------------------------------------------------------- grad-check

@dataclass(frozen=True)
class GradCheckResult:
    name: str
    seed: int
    error: float

    @property
    def ok(self) -> bool:
        return self.error < GRAD_TOLERANCE


PRIMITIVES = {
    "add": lambda t, c: ad.add(t, c),
    "sub": lambda t, c: ad.sub(c, t),
    "mul": lambda t, c: ad.mul(t, c),
    "div": lambda t, c: ad.div(c, ad.add(ad.square(t), 1.0)),
    "neg": lambda t, c: ad.neg(t),
    "exp": lambda t, c: ad.exp(t),
    "log": lambda t, c: ad.log(ad.add(ad.square(t), 0.5)),
    "relu": lambda t, c: ad.relu(t),
    "sigmoid": lambda t, c: ad.sigmoid(t),
    "square": lambda t, c: ad.square(t),
    "smooth_l1": lambda t, c: ad.smooth_l1(ad.mul(t, 3.0)),
    "softmax": lambda t, c: ad.softmax(t, 1),
    "log_softmax": lambda t, c: ad.log_softmax(t, 0),
    "sum": lambda t, c: ad.sum(t, 1),
    "mean": lambda t, c: ad.mean(t, 0),
    "max": lambda t, c: ad.max(t, 1),
    "reshape": lambda t, c: ad.reshape(t, (4, 3)),
    "transpose": lambda t, c: ad.transpose(t, (1, 0)),
    "take": lambda t, c: ad.take(t, [2, 0, 2], 1),
    "matmul": lambda t, c: ad.matmul(t, ad.transpose(c, (1, 0))),
}


def _check_primitive(name: str, seed: int) -> float:
    rng = np.random.default_rng([seed, 1])
    if name == "conv2d":
        x = ad.Tensor(rng.uniform(-1, 1, (2, 7, 6)))
        k = ad.Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)))
        b = rng.normal(size=3)
        w = rng.normal(size=(3, 4, 3))
        ex = ad.grad_check(lambda t: ad.sum(ad.mul(ad.conv2d(t, k, b, stride=2, padding=1), w)), x)
        ek = ad.grad_check(lambda t: ad.sum(ad.mul(ad.conv2d(x, t, b, stride=2, padding=1), w)), k)
        return max(ex, ek)
    fn = PRIMITIVES[name]
    x = ad.Tensor(rng.uniform(-2, 2, (3, 4)))
    c = ad.Tensor(rng.uniform(-2, 2, (3, 4)))
    w = rng.normal(size=fn(x, c).shape)
    return ad.grad_check(lambda t: ad.sum(ad.mul(fn(t, c), w)), x)


def _loss_terms(seed: int, size: int = 16):
    rng = np.random.default_rng([seed, 2])
    grid = anchor_grid(size)
    kind = (FlipKind.HORIZONTAL, FlipKind.VERTICAL, FlipKind.ROTATE180)[seed % 3]
    perm = anchor_permutation(grid, kind)
    image = rng.random((1, 3, size, size))
    flipped = image[..., ::-1, :] if kind.mirrors_y else image
    flipped = flipped[..., ::-1] if kind.mirrors_x else flipped
    cx, cy = rng.uniform(4, size - 4, 2)
    targets = [match_targets(grid, [[cx, cy, rng.uniform(6, 12), rng.uniform(6, 12)]])]
    st = init_params(seed, image_size=size)
    for t in st.teacher.tensors.values():
        t.data += rng.normal(scale=0.05, size=t.shape)
    t_out = forward(st.teacher, np.ascontiguousarray(flipped)).detached()

    def sup(p):
        return supervised_loss(forward(p, image), targets)

    def con_loc(p):
        return loc_consistency_total(forward(p, image), t_out, perm, kind)

    def con_cls(p):
        return cls_consistency_total(forward(p, image), t_out, perm)

    def total(p):
        out = forward(p, image)
        return total_loss(supervised_loss(out, targets), loc_consistency_total(out, t_out, perm, kind),
                          cls_consistency_total(out, t_out, perm))[0]

    return st.student, {"loss:sup": sup, "loss:con_loc": con_loc, "loss:con_cls": con_cls, "loss:total": total}


def _check_losses(seed: int, coords_per_tensor: int = 8) -> dict[str, float]:
    params, terms = _loss_terms(seed)
    rng = np.random.default_rng([seed, 3])
    errors = {}
    for name, fn in terms.items():
        worst = 0.0
        for tensor in params.tensors.values():
            coords = rng.choice(tensor.size, size=min(coords_per_tensor, tensor.size), replace=False)
            worst = max(worst, ad.grad_check(lambda _x: fn(params), tensor, 1e-6, coords=coords))
        errors[name] = worst
    return errors


def gradcheck_suite(seed: int = 0, n_seeds: int = 5, fault_ops=()) -> list[GradCheckResult]:
    """Every primitive and every loss term against central differences over ``n_seeds`` seeds."""
    results = []
    with ad.inject_backward_fault(*fault_ops):
        for s in range(seed, seed + n_seeds):
            for name in list(PRIMITIVES) + ["conv2d"]:
                results.append(GradCheckResult(name, s, _check_primitive(name, s)))
            for name, err in _check_losses(s).items():
                results.append(GradCheckResult(name, s, err))
    return results


def worst_by_check(results: list[GradCheckResult]) -> dict[str, float]:
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    return worst
