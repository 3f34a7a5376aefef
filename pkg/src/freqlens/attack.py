"""Universal and per-image adversarial perturbations with frequency control.

A universal perturbation is a single pattern v, optimized over many training
images, that flips the model's predictions when added to held-out inputs. The
optimizer ascends classification loss (or descends it toward a chosen target
class) while v stays inside an L-infinity ball and, optionally, inside a fixed
frequency band enforced by a Fourier-domain mask applied to v before use.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericalError, Tensor, adam_step, backward, no_grad
from .data import DataError, Dataset, read_checkpoint, write_checkpoint
from .fourier import ALL_PASS, FreqFilterSpec, entropy, filter_array
from .models import Model, predict


@dataclass
class AttackConfig:
    eps: float = 10.0 / 255.0
    iterations: int = 2000
    batch_size: int = 64
    lr: float = 0.01
    target: int | None = None           # None = untargeted
    filter: FreqFilterSpec = field(default_factory=lambda: ALL_PASS)
    reg_weight: float = 0.0             # smoothness penalty coefficient
    seed: int = 0

    def __post_init__(self) -> None:
        if self.eps <= 0 or self.eps > 1:
            raise ValueError(f"AttackConfig: eps must be in (0, 1], got {self.eps}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("AttackConfig: iterations and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError(f"AttackConfig: lr must be positive, got {self.lr}")
        if self.reg_weight < 0:
            raise ValueError(f"AttackConfig: reg_weight must be >= 0, got {self.reg_weight}")
        if self.target is not None and self.target < 0:
            raise ValueError(f"AttackConfig: target must be a class index, got {self.target}")

    def digest(self) -> str:
        blob = json.dumps({
            "eps": self.eps, "iterations": self.iterations, "batch_size": self.batch_size,
            "lr": self.lr, "target": self.target, "filter": [self.filter.kind, self.filter.bw],
            "reg_weight": self.reg_weight, "seed": self.seed,
        }, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Perturbation:
    v: np.ndarray                       # (C, H, W) float32, |v| <= eps everywhere
    eps: float
    filter: FreqFilterSpec
    meta: dict[str, str]

    def __post_init__(self) -> None:
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.v.ndim != 3:
            raise DataError(f"Perturbation: v must be (C, H, W), got shape {self.v.shape}")
        if float(np.abs(self.v).max(initial=0.0)) > self.eps + 1e-6:
            raise DataError("Perturbation: v exceeds its own eps bound")

    def filtered(self) -> np.ndarray:
        """The pattern actually added to images (after the frequency mask)."""
        return filter_array(self.v, self.filter).astype(np.float32)


def perturbation_input(v: np.ndarray, eps: float) -> np.ndarray:
    """Render a perturbation as a standalone model input: affine map onto
    mid-gray, 0.5 + v * (0.5 / eps), which lands in [0, 1] for |v| <= eps."""
    if eps <= 0:
        raise ValueError("perturbation_input: eps must be positive")
    return np.clip(0.5 + np.asarray(v, dtype=np.float32) * (0.5 / eps), 0.0, 1.0)


def apply_perturbation(images: np.ndarray, pert: Perturbation) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32)
    return np.clip(x + pert.filtered()[None], 0.0, 1.0)


def _loss_for_batch(model: Model, x: np.ndarray, v: Tensor, filt: FreqFilterSpec,
                    clean_pred: np.ndarray, cfg: AttackConfig) -> Tensor:
    fv = ad.freq_filter(v, filt) if filt != ALL_PASS else v
    adv = ad.clip(ad.add(Tensor(x), fv), 0.0, 1.0)
    logits = model.forward(adv)
    if cfg.target is None:
        # push the model away from its own clean predictions
        loss = ad.mul(ad.softmax_cross_entropy(logits, clean_pred), -1.0)
    else:
        tgt = np.full(len(x), cfg.target, dtype=np.int64)
        loss = ad.softmax_cross_entropy(logits, tgt)
    if cfg.reg_weight > 0.0:
        loss = ad.add(loss, ad.mul(ad.smoothness_penalty(v), cfg.reg_weight))
    return loss


def generate_uap(model: Model, train: Dataset, cfg: AttackConfig,
                 log_every: int = 0) -> Perturbation:
    """Optimize one image-agnostic perturbation on the training split.

    The model is frozen for the duration (its own grads are never needed),
    v is re-projected onto the eps ball after every Adam step.
    """
    if train.n == 0:
        raise DataError("generate_uap: empty training set")
    num_classes = int(model.meta.get("num_classes", "0"))
    if cfg.target is not None and num_classes and cfg.target >= num_classes:
        raise ValueError(f"generate_uap: target {cfg.target} out of range for "
                         f"{num_classes} classes")
    c, h, w = train.images.shape[1:]
    was_grad = [p.requires_grad for p in model.params().values()]
    model.freeze()
    try:
        clean_pred_all = predict(model, train.images)
        v = Tensor(np.zeros((c, h, w), dtype=np.float32), requires_grad=True)
        state = AdamState(lr=cfg.lr)
        rng = np.random.default_rng(cfg.seed)
        for it in range(cfg.iterations):
            idx = rng.integers(0, train.n, size=cfg.batch_size)
            loss = _loss_for_batch(model, train.images[idx], v, cfg.filter,
                                   clean_pred_all[idx], cfg)
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise NumericalError(f"generate_uap: non-finite loss at iteration {it}")
            grads = backward(loss, {"v": v})
            adam_step(state, grads, {"v": v})
            np.clip(v.data, -cfg.eps, cfg.eps, out=v.data)
            if log_every and (it + 1) % log_every == 0:
                print(f"  iter {it + 1}/{cfg.iterations} loss {lv:+.4f}")
    finally:
        for p, flag in zip(model.params().values(), was_grad):
            p.requires_grad = flag
    meta = {
        "kind": "uap",
        "mode": "targeted" if cfg.target is not None else "untargeted",
        "target": str(cfg.target) if cfg.target is not None else "",
        "iterations": str(cfg.iterations),
        "seed": str(cfg.seed),
        "config": cfg.digest(),
    }
    return Perturbation(v.data.copy(), cfg.eps, cfg.filter, meta)


def generate_idp_batch(model: Model, images: np.ndarray, cfg: AttackConfig,
                       clean_pred: np.ndarray | None = None) -> np.ndarray:
    """Per-image perturbations, optimized jointly as one (N, C, H, W) tensor.

    Each image's perturbation only ever sees that image's loss term, so the
    batched run matches N independent runs up to Adam's scalar step count.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise DataError(f"generate_idp_batch: images must be (N, C, H, W), got {images.shape}")
    if cfg.target is not None:
        raise ValueError("generate_idp_batch: per-image attacks are untargeted here")
    was_grad = [p.requires_grad for p in model.params().values()]
    model.freeze()
    try:
        if clean_pred is None:
            clean_pred = predict(model, images)
        v = Tensor(np.zeros_like(images), requires_grad=True)
        state = AdamState(lr=cfg.lr)
        for it in range(cfg.iterations):
            fv = ad.freq_filter(v, cfg.filter) if cfg.filter != ALL_PASS else v
            adv = ad.clip(ad.add(Tensor(images), fv), 0.0, 1.0)
            loss = ad.mul(ad.softmax_cross_entropy(model.forward(adv), clean_pred), -1.0)
            if cfg.reg_weight > 0.0:
                loss = ad.add(loss, ad.mul(ad.smoothness_penalty(v), cfg.reg_weight))
            if not np.isfinite(float(loss.data)):
                raise NumericalError(f"generate_idp_batch: non-finite loss at iteration {it}")
            grads = backward(loss, {"v": v})
            adam_step(state, grads, {"v": v})
            np.clip(v.data, -cfg.eps, cfg.eps, out=v.data)
    finally:
        for p, flag in zip(model.params().values(), was_grad):
            p.requires_grad = flag
    return v.data.copy()


def generate_idp(model: Model, image: np.ndarray, cfg: AttackConfig) -> Perturbation:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise DataError(f"generate_idp: image must be (C, H, W), got {image.shape}")
    v = generate_idp_batch(model, image[None], cfg)[0]
    meta = {"kind": "idp", "mode": "untargeted", "iterations": str(cfg.iterations),
            "seed": str(cfg.seed), "config": cfg.digest()}
    return Perturbation(v, cfg.eps, cfg.filter, meta)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _eval_images(obj) -> np.ndarray:
    """Accept a Dataset or a raw (N, C, H, W) array; labels play no role in
    fooling metrics (they compare against the model's clean predictions)."""
    arr = obj.images if isinstance(obj, Dataset) else np.asarray(obj, dtype=np.float32)
    if arr.ndim != 4:
        raise DataError(f"expected (N, C, H, W) images, got shape {arr.shape}")
    return arr


def fooling_ratio(model: Model, data, pert: Perturbation) -> float:
    """Fraction of images whose prediction changes under the perturbation.
    Measured against the model's own clean predictions, not the labels."""
    images = _eval_images(data)
    if len(images) == 0:
        raise DataError("fooling_ratio: empty dataset")
    clean = predict(model, images)
    adv = predict(model, apply_perturbation(images, pert))
    return float(np.mean(adv != clean))


def targeted_fooling_ratio(model: Model, data, pert: Perturbation,
                           target: int) -> float:
    """Fraction steered to the target class, among images the model did not
    already place there."""
    images = _eval_images(data)
    if len(images) == 0:
        raise DataError("targeted_fooling_ratio: empty dataset")
    clean = predict(model, images)
    keep = clean != target
    if not keep.any():
        raise DataError("targeted_fooling_ratio: every clean prediction is already the target")
    adv = predict(model, apply_perturbation(images[keep], pert))
    return float(np.mean(adv == target))


def logit_cosine_stats(model: Model, data, pert: Perturbation,
                       n_images: int = 100, seed: int = 0) -> dict[str, float]:
    """Average cosine between logits of (pattern alone) vs (image + pattern),
    and between (clean image) vs (image + pattern). Used for the
    pattern-dominance check."""
    from .analysis import cosine
    images = _eval_images(data)
    rng = np.random.default_rng(seed)
    n = min(n_images, len(images))
    idx = rng.choice(len(images), size=n, replace=False)
    imgs = images[idx]
    from .models import model_logits
    alone = model_logits(model, perturbation_input(pert.filtered(), pert.eps)[None])[0]
    clean_l = model_logits(model, imgs)
    adv_l = model_logits(model, apply_perturbation(imgs, pert))
    cos_pattern = float(np.mean([cosine(alone, adv_l[i]) for i in range(n)]))
    cos_image = float(np.mean([cosine(clean_l[i], adv_l[i]) for i in range(n)]))
    return {"cos_pattern_adv": cos_pattern, "cos_image_adv": cos_image}


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def frequency_sweep(model: Model, train: Dataset, val: Dataset, cfg: AttackConfig,
                    kind: str, bws: list[int]) -> list[dict]:
    """One UAP per bandwidth, all under the same budget and seed; rows carry
    the held-out fooling ratio and the entropy of the filtered pattern."""
    if kind not in ("low_pass", "high_pass"):
        raise ValueError(f"frequency_sweep: kind must be low_pass or high_pass, got {kind!r}")
    rows = []
    for bw in bws:
        fcfg = AttackConfig(eps=cfg.eps, iterations=cfg.iterations,
                            batch_size=cfg.batch_size, lr=cfg.lr, target=cfg.target,
                            filter=FreqFilterSpec(kind, bw), reg_weight=cfg.reg_weight,
                            seed=cfg.seed)
        pert = generate_uap(model, train, fcfg)
        rows.append({
            "kind": kind,
            "bw": bw,
            "fooling": fooling_ratio(model, val, pert),
            "entropy": entropy(pert.filtered()),
        })
    return rows


def regularization_sweep(model: Model, train: Dataset, val: Dataset, cfg: AttackConfig,
                         lambdas: list[float]) -> list[dict]:
    """One UAP per smoothness weight; rows (lambda, fooling, entropy, smoothness)."""
    rows = []
    for lam in lambdas:
        if lam < 0:
            raise ValueError(f"regularization_sweep: negative weight {lam}")
        fcfg = AttackConfig(eps=cfg.eps, iterations=cfg.iterations,
                            batch_size=cfg.batch_size, lr=cfg.lr, target=cfg.target,
                            filter=cfg.filter, reg_weight=lam, seed=cfg.seed)
        pert = generate_uap(model, train, fcfg)
        with no_grad():
            smooth = float(ad.smoothness_penalty(Tensor(pert.v)).data)
        rows.append({
            "lambda": lam,
            "fooling": fooling_ratio(model, val, pert),
            "entropy": entropy(pert.filtered()),
            "smoothness": smooth,
        })
    return rows


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_perturbation(path, pert: Perturbation) -> None:
    meta = dict(pert.meta)
    meta.update({
        "eps": f"{pert.eps:.10g}",
        "filter_kind": pert.filter.kind,
        "filter_bw": str(pert.filter.bw),
    })
    write_checkpoint(path, {"uap.v": pert.v}, meta)


def load_perturbation(path) -> Perturbation:
    tensors, meta = read_checkpoint(path)
    if "uap.v" not in tensors:
        raise DataError(f"load_perturbation: {path}: missing tensor 'uap.v'")
    filt = FreqFilterSpec(meta.get("filter_kind", "all_pass"), int(meta.get("filter_bw", "0")))
    return Perturbation(tensors["uap.v"], float(meta["eps"]), filt, meta)
