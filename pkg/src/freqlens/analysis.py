"""Diagnostics: what drives a model's predictions, band by band.

Four studies share this module:

* dominance sweep: add unit-RMS bandpass content from a donor image at a
  chosen magnitude and ask whose logits the container resembles, the image's
  or the added pattern's;
* hybrid images: low-pass of one image plus high-pass of another, scored
  against both source labels;
* per-class rankings: robustness to a targeted universal attack (R1), secret
  reveal difficulty (R2), and mean spectral entropy (R3), with rank
  correlations and a permutation test;
* layer profile: cosine similarity of intermediate activations under
  perturbations, filtering, and noise.

Activation cosines are centered: post-relu activations share a large positive
mean component, so raw cosines crowd toward 1 and hide the structure. Every
activation is reduced by the mean clean-image activation of its tap before
the cosine. Logit-space cosines elsewhere (attack module) stay raw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attack import AttackConfig, Perturbation, apply_perturbation, generate_uap, perturbation_input
from .data import DataError, Dataset
from .fourier import FreqFilterSpec, entropy, filter_array, lowpass_mask
from .models import Model, forward_with_taps, model_logits, predict
from .steg import apd, encode_secret, run_model


# ---------------------------------------------------------------------------
# similarity and ranking primitives
# ---------------------------------------------------------------------------

def cosine(a, b) -> float:
    """Cosine of two arrays, flattened; 0 when either norm is below 1e-12."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise DataError(f"cosine: size mismatch {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def tie_ranks(values) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Rank correlation: Pearson correlation of tie-averaged ranks."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"spearman: need equal 1-d arrays, got {a.shape} vs {b.shape}")
    ra, rb = tie_ranks(a), tie_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom < 1e-12:
        return 0.0
    return float((ra * rb).sum() / denom)


def rank_descending(scores: dict[int, float]) -> dict[int, int]:
    """Rank 1 = highest score; ties broken by ascending class id."""
    items = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return {cid: pos + 1 for pos, (cid, _) in enumerate(items)}


def rank_correlation(ra, rb, n_perm: int = 2000, seed: int = 0) -> dict[str, float]:
    """Raw cosine and Spearman of two rank vectors, plus a one-sided
    permutation p-value for the Spearman statistic (how often a random
    relabeling matches or beats the observed value)."""
    ra = np.asarray(ra, dtype=np.float64)
    rb = np.asarray(rb, dtype=np.float64)
    if ra.shape != rb.shape or ra.ndim != 1:
        raise DataError(f"rank_correlation: need equal 1-d rank vectors, "
                        f"got {ra.shape} vs {rb.shape}")
    if len(ra) < 3:
        raise DataError(f"rank_correlation: need length >= 3, got {len(ra)}")
    if n_perm < 1000:
        raise DataError(f"rank_correlation: need >= 1000 permutations, got {n_perm}")
    obs = spearman(ra, rb)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_perm):
        if spearman(ra, rng.permutation(rb)) >= obs:
            hits += 1
    return {
        "raw_cosine": cosine(ra, rb),
        "spearman": obs,
        "permutation_p": (1.0 + hits) / (1.0 + n_perm),
    }


def random_rank_cosine_baseline(n: int, trials: int = 50, seed: int = 0) -> float:
    """Mean raw cosine of independent random rank permutations of length n.

    Analytic expectation 3(n+1)/(2(2n+1)), about 0.75 for large n: raw rank
    cosines have a high floor, which is why acceptance rests on Spearman."""
    rng = np.random.default_rng(seed)
    base = np.arange(1, n + 1, dtype=np.float64)
    vals = [cosine(rng.permutation(base), rng.permutation(base)) for _ in range(trials)]
    return float(np.mean(vals))


def expected_random_rank_cosine(n: int) -> float:
    return 3.0 * (n + 1) / (2.0 * (2 * n + 1))


# ---------------------------------------------------------------------------
# dominance sweep
# ---------------------------------------------------------------------------

DOMINANCE_BAND_EDGES = (0, 6, 12, 18, 24, 32)
DOMINANCE_MAGNITUDES = (2 / 255, 5 / 255, 10 / 255, 20 / 255)


def _band_content(image: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Zero-mean unit-RMS content of the square annulus between low-pass
    bandwidths lo and hi (DC excluded via the mean subtraction)."""
    if lo >= hi:
        raise DataError(f"_band_content: need lo < hi, got ({lo}, {hi})")
    band = (filter_array(image, FreqFilterSpec("low_pass", hi))
            - filter_array(image, FreqFilterSpec("low_pass", lo)))
    band -= band.mean()
    rms = float(np.sqrt(np.mean(band * band)))
    if rms < 1e-12:
        return np.zeros_like(band)
    return band / rms


def dominance_sweep(model: Model, images: np.ndarray, donors: np.ndarray,
                    band_edges=DOMINANCE_BAND_EDGES,
                    magnitudes=DOMINANCE_MAGNITUDES) -> list[dict]:
    """For each band and magnitude: P = donor band content at unit RMS times
    m; rows report mean cos(logits(I), logits(I+P)) and
    mean cos(logits(P), logits(I+P)) over donor x image pairs.

    m = 0 short-circuits to an exact image-cosine of 1. The bare pattern is
    rendered at full range via the mid-gray affine rule.
    """
    images = np.asarray(images, dtype=np.float32)
    donors = np.asarray(donors, dtype=np.float32)
    if images.ndim != 4 or donors.ndim != 4:
        raise DataError("dominance_sweep: images and donors must be (N, C, H, W)")
    clean_logits = model_logits(model, images)
    rows = []
    for lo, hi in zip(band_edges[:-1], band_edges[1:]):
        bands = [_band_content(d, lo, hi) for d in donors]
        for m in magnitudes:
            if m < 0:
                raise DataError(f"dominance_sweep: negative magnitude {m}")
            if m == 0.0:
                rows.append({"band_lo": lo, "band_hi": hi, "m": 0.0,
                             "cos_image": 1.0, "cos_pattern": 0.0})
                continue
            ci, cp = [], []
            for band in bands:
                p = (m * band).astype(np.float32)
                peak = float(np.abs(p).max())
                alone = (perturbation_input(p, peak) if peak > 0
                         else np.full_like(p, 0.5))
                alone_logits = model_logits(model, alone[None])[0]
                adv_logits = model_logits(model, np.clip(images + p[None], 0.0, 1.0))
                for i in range(len(images)):
                    ci.append(cosine(clean_logits[i], adv_logits[i]))
                    cp.append(cosine(alone_logits, adv_logits[i]))
            rows.append({"band_lo": lo, "band_hi": hi, "m": float(m),
                         "cos_image": float(np.mean(ci)),
                         "cos_pattern": float(np.mean(cp))})
    return rows


# ---------------------------------------------------------------------------
# hybrid images
# ---------------------------------------------------------------------------

def deranged_partners(labels: np.ndarray, seed: int) -> np.ndarray:
    """A seeded pairing i -> partner[i] whose labels always differ.

    Starts from a random permutation and repairs label collisions by
    swapping them with compatible positions."""
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2 or len(np.unique(labels)) < 2:
        raise DataError("deranged_partners: need at least two distinct labels")
    rng = np.random.default_rng(seed)
    partner = rng.permutation(n)
    for _ in range(64):
        bad = np.flatnonzero(labels[partner] == labels)
        if len(bad) == 0:
            return partner
        for i in bad:
            # swap with a random position whose assignment fixes both slots
            for j in rng.permutation(n):
                if (labels[partner[j]] != labels[i]
                        and labels[partner[i]] != labels[j]):
                    partner[i], partner[j] = partner[j], partner[i]
                    break
    raise DataError("deranged_partners: could not build a label derangement")


def hybrid_accuracy(model: Model, ds: Dataset, bws: list[int], seed: int = 0) -> list[dict]:
    """Accuracy of band-separated and recombined images at each bandwidth.

    Per row: HF-only images scored against their own labels, LF-only against
    their own labels, and the hybrid (own high band + partner's low band)
    scored against the high-band label (hybrid_hf) and the low-band label
    (hybrid_lf).
    """
    if ds.n == 0:
        raise DataError("hybrid_accuracy: empty dataset")
    partner = deranged_partners(ds.labels, seed)
    rows = []
    for bw in bws:
        lp_spec = FreqFilterSpec("low_pass", bw)
        hp_spec = FreqFilterSpec("high_pass", bw)
        lp = np.stack([filter_array(im, lp_spec) for im in ds.images])
        hp = np.stack([filter_array(im, hp_spec) for im in ds.images])
        hf_imgs = np.clip(hp + 0.5, 0.0, 1.0).astype(np.float32)
        lf_imgs = np.clip(lp, 0.0, 1.0).astype(np.float32)
        hybrids = np.clip(lp[partner] + hp, 0.0, 1.0).astype(np.float32)
        pred_hf = predict(model, hf_imgs)
        pred_lf = predict(model, lf_imgs)
        pred_hy = predict(model, hybrids)
        rows.append({
            "bw": bw,
            "acc_hf": float(np.mean(pred_hf == ds.labels)),
            "acc_lf": float(np.mean(pred_lf == ds.labels)),
            "acc_hybrid_hf": float(np.mean(pred_hy == ds.labels)),
            "acc_hybrid_lf": float(np.mean(pred_hy == ds.labels[partner])),
        })
    return rows


# ---------------------------------------------------------------------------
# per-class rankings
# ---------------------------------------------------------------------------

def class_robustness(model: Model, train: Dataset, val: Dataset, target: int,
                     cfg: AttackConfig) -> tuple[dict[int, float], Perturbation]:
    """Per-class resistance to one targeted universal perturbation.

    Score = 1 - (fraction of the class's held-out images pushed to the
    target prediction); the target class itself is excluded.
    """
    if cfg.target != target:
        cfg = AttackConfig(eps=cfg.eps, iterations=cfg.iterations,
                           batch_size=cfg.batch_size, lr=cfg.lr, target=target,
                           filter=cfg.filter, reg_weight=cfg.reg_weight, seed=cfg.seed)
    pert = generate_uap(model, train, cfg)
    adv_pred = predict(model, apply_perturbation(val.images, pert))
    scores: dict[int, float] = {}
    for k in np.unique(val.labels):
        if int(k) == target:
            continue
        members = val.labels == k
        scores[int(k)] = float(1.0 - np.mean(adv_pred[members] == target))
    return scores, pert


def class_reveal_quality(encoder: Model, decoder: Model, secrets: Dataset,
                         covers: Dataset, n_per_class: int = 20, min_class: int = 5,
                         seed: int = 0) -> tuple[dict[int, float], list[int]]:
    """Per-class mean reveal APD when class members are hidden in random
    covers. Classes with fewer than min_class members are skipped and
    reported in the second return value."""
    rng = np.random.default_rng(seed)
    scores: dict[int, float] = {}
    skipped: list[int] = []
    for k in np.unique(secrets.labels):
        members = np.flatnonzero(secrets.labels == k)
        if len(members) < min_class:
            skipped.append(int(k))
            continue
        chosen = members if len(members) <= n_per_class else \
            rng.choice(members, size=n_per_class, replace=False)
        s = secrets.images[chosen]
        c = covers.images[rng.integers(0, covers.n, size=len(chosen))]
        s_p = encode_secret(encoder, s)
        containers = np.clip(c + s_p, 0.0, 1.0)
        rec = run_model(decoder, containers)
        scores[int(k)] = apd(rec, s)
    return scores, skipped


def entropy_ranking(ds: Dataset) -> dict[int, float]:
    """Per-class mean spectral entropy."""
    if ds.n == 0:
        raise DataError("entropy_ranking: empty dataset")
    return {int(k): float(np.mean([entropy(ds.images[i])
                                   for i in np.flatnonzero(ds.labels == k)]))
            for k in np.unique(ds.labels)}


@dataclass
class RankingReport:
    class_ids: list[int]
    scores: dict[str, dict[int, float]]   # metric -> class -> score
    ranks: dict[str, dict[int, int]]      # metric -> class -> rank (1 = top)
    correlations: dict[str, dict[str, float]]  # "r1_r3" -> rank_correlation dict

    def to_rows(self) -> list[dict]:
        rows = []
        for cid in self.class_ids:
            rows.append({
                "class": cid,
                "score_r1": self.scores["r1"][cid],
                "score_r2": self.scores["r2"][cid],
                "score_r3": self.scores["r3"][cid],
                "rank_r1": self.ranks["r1"][cid],
                "rank_r2": self.ranks["r2"][cid],
                "rank_r3": self.ranks["r3"][cid],
            })
        return rows


def build_ranking_report(robustness: dict[int, float], reveal: dict[int, float],
                         entropies: dict[int, float], n_perm: int = 2000,
                         seed: int = 0) -> RankingReport:
    """Assemble the three per-class metrics over their common classes, rank
    each (1 = highest score, ties by class id), and correlate the rank pairs."""
    common = sorted(set(robustness) & set(reveal) & set(entropies))
    if len(common) < 3:
        raise DataError(f"build_ranking_report: only {len(common)} shared classes")
    scores = {
        "r1": {k: robustness[k] for k in common},
        "r2": {k: reveal[k] for k in common},
        "r3": {k: entropies[k] for k in common},
    }
    ranks = {name: rank_descending(vals) for name, vals in scores.items()}
    vecs = {name: np.array([ranks[name][k] for k in common], dtype=np.float64)
            for name in ranks}
    correlations = {
        "r1_r2": rank_correlation(vecs["r1"], vecs["r2"], n_perm, seed),
        "r1_r3": rank_correlation(vecs["r1"], vecs["r3"], n_perm, seed + 1),
        "r2_r3": rank_correlation(vecs["r2"], vecs["r3"], n_perm, seed + 2),
    }
    return RankingReport(common, scores, ranks, correlations)


# ---------------------------------------------------------------------------
# layer profile
# ---------------------------------------------------------------------------

@dataclass
class LayerProfile:
    taps: list[str]
    # condition -> tap -> (mean cosine, std over images)
    stats: dict[str, dict[str, tuple[float, float]]]

    def mean(self, condition: str, tap: str) -> float:
        return self.stats[condition][tap][0]


def _centered_tap_cosines(taps_a: dict[str, np.ndarray], taps_b: dict[str, np.ndarray],
                          mu: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Per-image cosine at each tap after subtracting the clean-mean
    activation mu of that tap. taps_a may hold a single broadcastable row."""
    out = {}
    for name, a in taps_a.items():
        b = taps_b[name]
        am = a.reshape(len(a), -1) - mu[name]
        bm = b.reshape(len(b), -1) - mu[name]
        if len(am) == 1 and len(bm) > 1:
            am = np.broadcast_to(am, bm.shape)
        vals = np.empty(len(bm))
        for i in range(len(bm)):
            vals[i] = cosine(am[i], bm[i])
        out[name] = vals
    return out


def layer_cosine_profile(model: Model, images: np.ndarray, uap: Perturbation,
                         idps: np.ndarray, noise_eps: float = 10 / 255,
                         filter_bw: int = 8, seed: int = 0) -> LayerProfile:
    """Centered activation cosines at every tap under eight conditions:
    container vs image and vs bare pattern for the universal perturbation
    (uap_image, uap_pattern) and per-image perturbations (idp_image,
    idp_pattern); the universal condition split at the evaluation median
    entropy (uap_image_he / uap_image_le); low-pass and high-pass filtered
    images vs originals (lowpass, highpass); and additive uniform noise
    (noise)."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise DataError("layer_cosine_profile: images must be (N, C, H, W)")
    idps = np.asarray(idps, dtype=np.float32)
    if idps.shape != images.shape:
        raise DataError(f"layer_cosine_profile: idps {idps.shape} vs images {images.shape}")
    n = len(images)
    if n < 4:
        raise DataError("layer_cosine_profile: need at least 4 images")

    clean = forward_with_taps(model, images)
    mu = {name: a.reshape(len(a), -1).mean(axis=0) for name, a in clean.items()}
    taps = list(clean.keys())

    def prof(taps_a, taps_b):
        return _centered_tap_cosines(taps_a, taps_b, mu)

    stats: dict[str, dict[str, np.ndarray]] = {}

    # universal perturbation
    adv = forward_with_taps(model, apply_perturbation(images, uap))
    pattern_in = perturbation_input(uap.filtered(), uap.eps)[None]
    pat = forward_with_taps(model, pattern_in)
    stats["uap_image"] = prof(clean, adv)
    stats["uap_pattern"] = prof(pat, adv)

    # per-image perturbations share shape with their images
    idp_adv = forward_with_taps(model, np.clip(images + idps, 0.0, 1.0))
    idp_pat = forward_with_taps(
        model, np.stack([perturbation_input(p, max(float(np.abs(p).max()), 1e-9))
                         for p in idps]))
    stats["idp_image"] = prof(clean, idp_adv)
    stats["idp_pattern"] = prof(idp_pat, idp_adv)

    # entropy split of the universal condition
    ent = np.array([entropy(im) for im in images])
    he = ent >= np.median(ent)
    if he.sum() < 2 or (~he).sum() < 2:
        raise DataError("layer_cosine_profile: entropy split needs 2+ images per side")
    stats["uap_image_he"] = {t: stats["uap_image"][t][he] for t in taps}
    stats["uap_image_le"] = {t: stats["uap_image"][t][~he] for t in taps}

    # band filtering and noise
    lp_spec = FreqFilterSpec("low_pass", filter_bw)
    hp_spec = FreqFilterSpec("high_pass", filter_bw)
    lp_in = np.clip(np.stack([filter_array(im, lp_spec) for im in images]),
                    0.0, 1.0).astype(np.float32)
    hp_in = np.clip(np.stack([filter_array(im, hp_spec) for im in images]) + 0.5,
                    0.0, 1.0).astype(np.float32)
    stats["lowpass"] = prof(clean, forward_with_taps(model, lp_in))
    stats["highpass"] = prof(clean, forward_with_taps(model, hp_in))

    rng = np.random.default_rng(seed)
    noisy = np.clip(images + rng.uniform(-noise_eps, noise_eps,
                                         size=images.shape).astype(np.float32), 0.0, 1.0)
    stats["noise"] = prof(clean, forward_with_taps(model, noisy))

    final = {cond: {t: (float(np.mean(v[t])), float(np.std(v[t]))) for t in taps}
             for cond, v in stats.items()}
    return LayerProfile(taps, final)
