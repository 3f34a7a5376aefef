"""Hiding one image inside another as a small additive perturbation.

The encoder maps a secret image S to a bounded perturbation S_p (its output
layer is an amplitude-capped tanh, so ``|S_p| <= eps_hide`` by construction).
Any cover C becomes a container C' = clip(C + S_p); the decoder maps C' back
to an estimate S'. Both nets train jointly on

    loss = mean|S_p| + beta * mean|S - S'| + gamma * (-CE(classifier(C'), y))

where y are the frozen classifier's predictions on the clean covers. With
gamma = 0 this is plain hiding; with gamma > 0 the perturbation must also
flip the classifier (and is hard-clamped to ``|S_p| <= eps_attack`` so it
stays a valid small attack). Because the encoder never sees the cover, S_p is
cover-agnostic: one secret yields one universal perturbation.

Reconstruction quality is reported as APD: mean absolute pixel difference on
the 0-255 scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericalError, Tensor, adam_step, backward, no_grad
from .data import DataError, Dataset
from .models import Model, predict, run_model


@dataclass
class StegConfig:
    beta: float = 0.75
    gamma: float = 0.0              # weight of the attack term; 0 = plain hiding
    eps_attack: float = 10.0 / 255.0
    eps_hide: float = 0.06
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    smooth_weight: float = 0.0      # optional smoothness penalty on S_p
    warmup_frac: float = 0.25       # fraction of steps over which the
                                    # amplitude-cost weight ramps 0 -> 1

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError(f"StegConfig: beta must be > 0, got {self.beta}")
        if self.gamma < 0 or self.smooth_weight < 0:
            raise ValueError("StegConfig: gamma and smooth_weight must be >= 0")
        if not 0 < self.eps_attack <= 1 or not 0 < self.eps_hide <= 1:
            raise ValueError("StegConfig: eps bounds must be in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError(f"StegConfig: bad loop values {self}")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError(f"StegConfig: warmup_frac must be in [0, 1), got {self.warmup_frac}")


@dataclass
class HideResult:
    container: np.ndarray   # C' in [0, 1]
    s_p: np.ndarray         # the additive perturbation, |s_p| <= eps_hide
    capd: float             # cover distortion APD(C', C)


def apd(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference on the 0-255 scale."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"apd: shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)) * 255.0)


def _images(obj) -> np.ndarray:
    """Accept a Dataset or a raw (N, C, H, W) array; labels are irrelevant here."""
    arr = obj.images if isinstance(obj, Dataset) else np.asarray(obj, dtype=np.float32)
    if arr.ndim != 4:
        raise DataError(f"expected (N, C, H, W) images, got shape {arr.shape}")
    return arr


def perturbation_as_decoder_input(s_p: np.ndarray) -> np.ndarray:
    """Render a bare perturbation as a decoder input: shift onto mid-gray at
    unit gain (the decoder was trained on cover+s_p sums, so s_p keeps its
    trained amplitude)."""
    return np.clip(0.5 + np.asarray(s_p, dtype=np.float32), 0.0, 1.0)


def encode_secret(encoder: Model, secrets: np.ndarray, batch: int = 128) -> np.ndarray:
    """S_p for a batch of secrets; a pure function of the secrets."""
    return run_model(encoder, secrets, batch=batch)


def hide(encoder: Model, secret: np.ndarray, cover: np.ndarray) -> HideResult:
    secret = np.asarray(secret, dtype=np.float32)
    cover = np.asarray(cover, dtype=np.float32)
    if secret.shape != cover.shape:
        raise DataError(f"hide: secret {secret.shape} vs cover {cover.shape}")
    s_p = encode_secret(encoder, secret[None])[0]
    container = np.clip(cover + s_p, 0.0, 1.0)
    return HideResult(container, s_p, apd(container, cover))


def reveal(decoder: Model, container: np.ndarray) -> np.ndarray:
    container = np.asarray(container, dtype=np.float32)
    single = container.ndim == 3
    out = run_model(decoder, container[None] if single else container)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_usp(encoder: Model, decoder: Model, covers, secrets,
              cfg: StegConfig, model: Model | None = None,
              eval_pairs: tuple | None = None) -> list[dict]:
    """Joint encoder+decoder training; see the module docstring for the loss.

    Covers and secrets are Datasets or (N, C, H, W) arrays, sampled
    independently each step. Returns per-epoch rows (epoch, loss, and
    held-out metrics when eval_pairs is given).
    """
    covers, secrets = _images(covers), _images(secrets)
    if covers.shape[1:] != secrets.shape[1:]:
        raise DataError(f"train_usp: cover shape {covers.shape[1:]} vs "
                        f"secret shape {secrets.shape[1:]}")
    if cfg.gamma > 0 and model is None:
        raise ValueError("train_usp: gamma > 0 requires a target model")
    params = {}
    for name, p in encoder.params().items():
        params[f"enc.{name}"] = p
    for name, p in decoder.params().items():
        params[f"dec.{name}"] = p
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    model_was = None
    cover_pred = None
    if cfg.gamma > 0:
        model_was = [p.requires_grad for p in model.params().values()]
        model.freeze()
        cover_pred = predict(model, covers)

    history: list[dict] = []
    try:
        steps = max(len(secrets) // cfg.batch_size, 1)
        total = steps * max(cfg.epochs, 1)
        warm_steps = int(cfg.warmup_frac * total)
        done = 0
        for epoch in range(cfg.epochs):
            epoch_losses = []
            for step in range(steps):
                # amplitude-cost warmup: at full weight from step one, the L1
                # term silences the encoder before the decoder learns to read
                # it, and the all-zero state is a dead end
                w_amp = min(done / warm_steps, 1.0) if warm_steps > 0 else 1.0
                done += 1
                si = rng.integers(0, len(secrets), size=cfg.batch_size)
                ci = rng.integers(0, len(covers), size=cfg.batch_size)
                s = Tensor(secrets[si])
                c = Tensor(covers[ci])
                s_p = encoder.forward(s)
                if cfg.gamma > 0:
                    # keep the perturbation a valid small attack in-graph
                    s_p = ad.clip(s_p, -cfg.eps_attack, cfg.eps_attack)
                container = ad.clip(ad.add(c, s_p), 0.0, 1.0)
                s_rec = decoder.forward(container)
                loss = ad.add(ad.mul(ad.mean_abs(s_p), w_amp),
                              ad.mul(ad.mean_abs(ad.sub(s, s_rec)), cfg.beta))
                if cfg.smooth_weight > 0:
                    loss = ad.add(loss, ad.mul(ad.smoothness_penalty(s_p), cfg.smooth_weight))
                if cfg.gamma > 0:
                    nce = ad.mul(ad.softmax_cross_entropy(model.forward(container),
                                                          cover_pred[ci]), -1.0)
                    loss = ad.add(loss, ad.mul(nce, cfg.gamma))
                lv = float(loss.data)
                if not np.isfinite(lv):
                    raise NumericalError(f"train_usp: non-finite loss at epoch {epoch} step {step}")
                grads = backward(loss, params)
                adam_step(state, grads, params)
                epoch_losses.append(lv)
            row = {"epoch": epoch, "loss": float(np.mean(epoch_losses))}
            if eval_pairs is not None:
                row.update(evaluate_steg(encoder, decoder, eval_pairs[0], eval_pairs[1],
                                         clamp_eps=cfg.eps_attack if cfg.gamma > 0 else None))
            history.append(row)
    finally:
        if model_was is not None:
            for p, flag in zip(model.params().values(), model_was):
                p.requires_grad = flag
    return history


def _paired_perturbations(encoder: Model, secrets: np.ndarray,
                          clamp_eps: float | None) -> np.ndarray:
    s_p = encode_secret(encoder, secrets)
    if clamp_eps is not None:
        s_p = np.clip(s_p, -clamp_eps, clamp_eps)
    return s_p


def evaluate_steg(encoder: Model, decoder: Model, covers, secrets,
                  n_pairs: int | None = None, seed: int = 0,
                  clamp_eps: float | None = None) -> dict[str, float]:
    """Held-out hiding metrics over seeded cover/secret pairs.

    Returns capd (container vs cover), sapd_container (reveal from C'), and
    sapd_alone (reveal from the mid-gray-mapped bare perturbation).
    """
    covers, secrets = _images(covers), _images(secrets)
    if len(covers) == 0 or len(secrets) == 0:
        raise DataError("evaluate_steg: empty corpus")
    rng = np.random.default_rng(seed)
    n = n_pairs or min(len(covers), len(secrets))
    ci = rng.integers(0, len(covers), size=n)
    si = rng.integers(0, len(secrets), size=n)
    c = covers[ci]
    s = secrets[si]
    s_p = _paired_perturbations(encoder, s, clamp_eps)
    containers = np.clip(c + s_p, 0.0, 1.0)
    rec_container = run_model(decoder, containers)
    rec_alone = run_model(decoder, perturbation_as_decoder_input(s_p))
    return {
        "capd": apd(containers, c),
        "sapd_container": apd(rec_container, s),
        "sapd_alone": apd(rec_alone, s),
    }


def evaluate_usap(encoder: Model, decoder: Model, model: Model, data,
                  cfg: StegConfig, seed: int = 0) -> dict[str, float]:
    """Attack-plus-hiding evaluation: fooling ratio of containers against the
    model's clean cover predictions, and reveal quality of the secrets.

    Covers and secrets come from disjoint halves of ``data`` so no image
    plays both roles.
    """
    data = _images(data)
    if len(data) < 4:
        raise DataError("evaluate_usap: need at least 4 images")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(data))
    half = len(data) // 2
    n = min(half, len(data) - half)
    c = data[perm[:n]]
    s = data[perm[half:half + n]]
    clamp = cfg.eps_attack if cfg.gamma > 0 else None
    s_p = _paired_perturbations(encoder, s, clamp)
    containers = np.clip(c + s_p, 0.0, 1.0)
    clean_pred = predict(model, c)
    adv_pred = predict(model, containers)
    rec = run_model(decoder, containers)
    return {
        "fooling": float(np.mean(adv_pred != clean_pred)),
        "sapd": apd(rec, s),
        "capd": apd(containers, c),
    }


# ---------------------------------------------------------------------------
# diagnostic experiments
# ---------------------------------------------------------------------------

TYPE_ORDER = ("flat", "natural", "noise")


def three_type_matrix(encoder: Model, decoder: Model, covers_by_type: dict,
                      secrets_by_type: dict, n_pairs: int = 200,
                      seed: int = 0) -> list[dict]:
    """Reveal quality for each cover-type x secret-type cell (mean sAPD over
    n_pairs seeded pairs). Row order and column order follow TYPE_ORDER."""
    for name in TYPE_ORDER:
        if name not in covers_by_type or name not in secrets_by_type:
            raise DataError(f"three_type_matrix: missing corpus {name!r}")
    rows = []
    rng = np.random.default_rng(seed)
    for cover_type in TYPE_ORDER:
        row: dict = {"cover": cover_type}
        for secret_type in TYPE_ORDER:
            cimgs = _images(covers_by_type[cover_type])
            simgs = _images(secrets_by_type[secret_type])
            ci = rng.integers(0, len(cimgs), size=n_pairs)
            si = rng.integers(0, len(simgs), size=n_pairs)
            s_p = encode_secret(encoder, simgs[si])
            containers = np.clip(cimgs[ci] + s_p, 0.0, 1.0)
            rec = run_model(decoder, containers)
            row[secret_type] = apd(rec, simgs[si])
        rows.append(row)
    return rows


class FixedScaleEncoder:
    """Parameter-free stand-in encoder: S_p = scale * (S - 0.5).

    Centering first keeps the perturbation zero-mean, so a mid-gray secret
    hides as no perturbation at all."""

    def __init__(self, scale: float = 0.1):
        self.scale = float(scale)
        self.arch = "fixed_scale"
        self.meta = {"arch": "fixed_scale", "scale": f"{self.scale:.10g}"}

    def params(self) -> dict[str, Tensor]:
        return {}

    def forward(self, x: Tensor) -> Tensor:
        return ad.mul(ad.add(x, -0.5), self.scale)


def train_scale_decoder(decoder: Model, covers, secrets,
                        cfg: StegConfig, scale: float = 0.1) -> list[dict]:
    """Decoder-only training against the fixed S_p = scale*(S-0.5) map."""
    covers, secrets = _images(covers), _images(secrets)
    enc = FixedScaleEncoder(scale)
    params = {f"dec.{name}": p for name, p in decoder.params().items()}
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    steps = max(len(secrets) // cfg.batch_size, 1)
    for epoch in range(cfg.epochs):
        losses = []
        for step in range(steps):
            si = rng.integers(0, len(secrets), size=cfg.batch_size)
            ci = rng.integers(0, len(covers), size=cfg.batch_size)
            s = Tensor(secrets[si])
            with no_grad():
                s_p = enc.forward(Tensor(secrets[si])).data
            container = ad.clip(ad.add(Tensor(covers[ci]), Tensor(s_p)), 0.0, 1.0)
            loss = ad.mean_abs(ad.sub(s, decoder.forward(container)))
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise NumericalError(f"train_scale_decoder: non-finite loss at epoch "
                                     f"{epoch} step {step}")
            grads = backward(loss, params)
            adam_step(state, grads, params)
            losses.append(lv)
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return history


def scale_hiding_experiment(covers, secrets, cfg: StegConfig,
                            decoder: Model, scale: float = 0.1,
                            eval_covers=None, eval_secrets=None,
                            n_eval: int = 200) -> dict[str, float]:
    """Train a decoder against the fixed S/10-style encoder, then compare
    reveal quality with and without the cover in the input.

    Returns {apd_with_cover, apd_without_cover, ratio}. The bare-perturbation
    condition feeds clip(0.5 + S_p) to the decoder.
    """
    covers, secrets = _images(covers), _images(secrets)
    history = train_scale_decoder(decoder, covers, secrets, cfg, scale)
    ec = _images(eval_covers) if eval_covers is not None else covers
    es = _images(eval_secrets) if eval_secrets is not None else secrets
    rng = np.random.default_rng(cfg.seed + 1)
    ci = rng.integers(0, len(ec), size=n_eval)
    si = rng.integers(0, len(es), size=n_eval)
    s = es[si]
    with no_grad():
        s_p = FixedScaleEncoder(scale).forward(Tensor(s)).data
    containers = np.clip(ec[ci] + s_p, 0.0, 1.0)
    rec_with = run_model(decoder, containers)
    rec_without = run_model(decoder, perturbation_as_decoder_input(s_p))
    apd_with = apd(rec_with, s)
    apd_without = apd(rec_without, s)
    return {
        "apd_with_cover": apd_with,
        "apd_without_cover": apd_without,
        "ratio": apd_without / apd_with if apd_with > 0 else float("inf"),
        "final_loss": history[-1]["loss"] if history else float("nan"),
    }
