"""Command-line harness: one subcommand per experiment.

Every run takes a master --seed fanned into named sub-seeds (data, init,
attack, pairing, ...), writes its artifacts under --out (default from the
FREQLENS_OUT environment variable, else ./runs), echoes the effective
configuration to config.txt, and finishes with a manifest.csv listing each
artifact with its SHA-256 digest. Hyperparameters come from a flat
key=value config file ('#' comments allowed; unknown keys rejected) plus
repeatable --set key=value overrides.

Exit codes: 0 success, 1 usage error, 2 data/file error, 3 numerical abort.
Single-threaded runs (--threads 1, the default) are bit-deterministic.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import (build_ranking_report, class_reveal_quality, class_robustness,
                       entropy_ranking, hybrid_accuracy, layer_cosine_profile)
from .attack import (ALL_PASS, AttackConfig, apply_perturbation, fooling_ratio,
                     generate_idp_batch, generate_uap, load_perturbation,
                     logit_cosine_stats, perturbation_input, regularization_sweep,
                     frequency_sweep, save_perturbation, targeted_fooling_ratio)
from .autodiff import NumericalError
from .data import (DataError, Dataset, generate_flat, generate_noise,
                   generate_synthetic, generate_textures, load_cifar_binary,
                   read_ppm, split_train_val, write_csv, write_ppm)
from .fourier import FILTER_KINDS, FreqFilterSpec, entropy, filter_image, fourier_image
from .models import (TrainConfig, build_classifier, build_decoder, build_steg_nets,
                     load_model, save_model, train_classifier, accuracy)
from .seeds import subseed
from .steg import (StegConfig, evaluate_steg, evaluate_usap, hide, reveal,
                   scale_hiding_experiment, three_type_matrix, train_usp,
                   encode_secret, apd)


class UsageError(ValueError):
    """Bad flags or config keys; maps to exit code 1."""


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

_DATA_KEYS = {
    "dataset": "textures",     # textures | synthetic | flat | noise | <path>.bin
    "per_class": 200,
    "size": 32,
    "val_per_class": 40,
}

_SCHEMAS: dict[str, dict] = {
    "train-classifier": {**_DATA_KEYS, "epochs": 8, "batch_size": 64, "lr": 1e-3,
                         "weight_decay": 0.0},
    "train-steg": {**_DATA_KEYS, "beta": 0.75, "gamma": 0.0, "eps_attack": 10 / 255,
                   "eps_hide": 0.06, "epochs": 10, "batch_size": 32, "lr": 1e-3,
                   "warmup_frac": 0.25, "smooth_weight": 0.0},
    "gen-uap": {**_DATA_KEYS, "eps": 10 / 255, "iterations": 2000, "batch_size": 64,
                "lr": 0.01, "target": -1, "filter_kind": "all_pass", "filter_bw": 0,
                "reg_weight": 0.0},
    "gen-idp": {**_DATA_KEYS, "eps": 10 / 255, "iterations": 500, "batch_size": 64,
                "lr": 0.01, "index": 0},
    "eval-attack": {**_DATA_KEYS, "n_cosine_images": 100},
    "sweep-freq": {**_DATA_KEYS, "eps": 10 / 255, "iterations": 2000, "batch_size": 64,
                   "lr": 0.01, "kind": "low_pass", "bws": [4, 8, 12, 16]},
    "sweep-reg": {**_DATA_KEYS, "eps": 10 / 255, "iterations": 2000, "batch_size": 64,
                  "lr": 0.01, "lambdas": [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0]},
    "hide": {},
    "reveal": {},
    "entropy": {},
    "filter": {},
    "hybrid": {**_DATA_KEYS, "bws": [4, 6, 8, 10]},
    "analyze-layers": {**_DATA_KEYS, "n_images": 100, "idp_iterations": 200,
                       "idp_eps": 10 / 255, "noise_eps": 10 / 255, "filter_bw": 8},
    "rank-classes": {"per_class": 200, "size": 32, "val_per_class": 40,
                     "cover_per_class": 40, "eps": 10 / 255, "iterations": 1000,
                     "batch_size": 64, "lr": 0.01, "target": 2, "n_perm": 2000,
                     "reveal_per_class": 20},
    "table3": {"n_images": 200, "n_pairs": 200, "size": 32},
    "scale-hiding": {**_DATA_KEYS, "scale": 0.1, "epochs": 10, "batch_size": 32,
                     "lr": 1e-3, "secret_amp_lo": 0.30, "secret_amp_hi": 0.50,
                     "n_eval": 200},
    "usap": {**_DATA_KEYS, "beta": 0.75, "gamma": 1e-3, "eps_attack": 10 / 255,
             "eps_hide": 0.06, "epochs": 10, "batch_size": 32, "lr": 1e-3,
             "warmup_frac": 0.25},
    "report": {"n_samples": 4},
}


def _cast(key: str, raw: str, default):
    """Cast a raw config string to the type of the schema default."""
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            inner = default[0] if default else 0
            parts = [p for p in raw.split(",") if p.strip()]
            return [type(inner)(p) if not isinstance(inner, float) else float(p)
                    for p in parts]
        return raw.strip()
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from exc


def _load_config(command: str, path: str | None, overrides: list[str]) -> dict:
    schema = _SCHEMAS[command]
    cfg = dict(schema)
    pairs: list[tuple[str, str]] = []
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"config file {path}: {exc}") from exc
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{ln}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            pairs.append((k.strip(), v.strip()))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set {item!r}: expected key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    for k, v in pairs:
        if k not in schema:
            raise UsageError(f"unknown config key {k!r} for {command} "
                             f"(known: {', '.join(sorted(schema))})")
        cfg[k] = _cast(k, v, schema[k])
    return cfg


def _format_value(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    if isinstance(v, list):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def _out_dir(args) -> Path:
    root = args.out or os.environ.get("FREQLENS_OUT") or "runs"
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _finish_run(out: Path, command: str, cfg: dict, seed: int) -> None:
    """Echo the effective config and manifest every artifact in the run dir."""
    lines = [f"command = {command}", f"seed = {seed}"]
    lines += [f"{k} = {_format_value(v)}" for k, v in sorted(cfg.items())]
    (out / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    rows = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.csv":
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            rows.append([str(p.relative_to(out)), digest])
    write_csv(out / "manifest.csv", ["file", "sha256"], rows)


def _build_dataset(cfg: dict, master: int, name_key: str = "dataset",
                   seed_name: str = "data") -> Dataset:
    name = cfg[name_key]
    dseed = subseed(master, seed_name)
    n_total = 10 * cfg["per_class"]
    if name.endswith(".bin"):
        return load_cifar_binary(name)
    if name == "textures":
        return generate_textures(dseed, per_class=cfg["per_class"], size=cfg["size"])
    if name == "synthetic":
        return generate_synthetic(dseed, per_class=cfg["per_class"], size=cfg["size"])
    if name == "flat":
        return generate_flat(dseed, n=n_total, size=cfg["size"])
    if name == "noise":
        return generate_noise(dseed, n=n_total, size=cfg["size"])
    raise UsageError(f"unknown dataset {name!r}")


def _train_val(cfg: dict, master: int) -> tuple[Dataset, Dataset]:
    ds = _build_dataset(cfg, master)
    return split_train_val(ds, val_per_class=cfg["val_per_class"],
                           seed=subseed(master, "perm"))


def _attack_config(cfg: dict, master: int, target: int | None = None) -> AttackConfig:
    kind, bw = cfg.get("filter_kind", "all_pass"), cfg.get("filter_bw", 0)
    filt = ALL_PASS if kind == "all_pass" else FreqFilterSpec(kind, bw)
    return AttackConfig(eps=cfg["eps"], iterations=cfg["iterations"],
                        batch_size=cfg["batch_size"], lr=cfg["lr"], target=target,
                        filter=filt, reg_weight=cfg.get("reg_weight", 0.0),
                        seed=subseed(master, "attack"))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train_classifier(args, cfg) -> int:
    out = _out_dir(args)
    train, val = _train_val(cfg, args.seed)
    model = build_classifier(train.num_classes, seed=subseed(args.seed, "init"),
                             size=cfg["size"])
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                     weight_decay=cfg["weight_decay"], seed=subseed(args.seed, "perm"))
    history = train_classifier(model, train, val, tc)
    val_acc = history[-1]["val_acc"] if history else accuracy(model, val)
    save_model(out / "model.ckpt", model, {"val_acc": f"{val_acc:.6f}"})
    write_csv(out / "history.csv", ["epoch", "train_loss", "val_acc"],
              [[r["epoch"], f"{r['train_loss']:.6f}", f"{r['val_acc']:.6f}"]
               for r in history])
    print(f"val_acc {val_acc:.4f}")
    return 0


def _steg_corpora(cfg, master):
    covers = _build_dataset(cfg, master, seed_name="data").images
    secrets_ds = generate_textures(subseed(master, "steg"), per_class=cfg["per_class"],
                                   size=cfg["size"])
    return covers, secrets_ds.images


def cmd_train_steg(args, cfg) -> int:
    out = _out_dir(args)
    covers, secrets = _steg_corpora(cfg, args.seed)
    n_val = max(len(covers) // 10, 1)
    sc = StegConfig(beta=cfg["beta"], gamma=cfg["gamma"], eps_attack=cfg["eps_attack"],
                    eps_hide=cfg["eps_hide"], epochs=cfg["epochs"],
                    batch_size=cfg["batch_size"], lr=cfg["lr"],
                    warmup_frac=cfg["warmup_frac"], smooth_weight=cfg["smooth_weight"],
                    seed=subseed(args.seed, "steg"))
    model = load_model(args.model) if args.model else None
    if sc.gamma > 0 and model is None:
        raise UsageError("train-steg: gamma > 0 requires --model")
    enc, dec = build_steg_nets(cfg["eps_hide"], seed=subseed(args.seed, "init"))
    history = train_usp(enc, dec, covers[n_val:], secrets[n_val:], sc, model=model,
                        eval_pairs=(covers[:n_val], secrets[:n_val]))
    save_model(out / "encoder.ckpt", enc)
    save_model(out / "decoder.ckpt", dec)
    cols = list(history[-1].keys()) if history else ["epoch", "loss"]
    write_csv(out / "history.csv", cols,
              [[_format_value(r[c]) for c in cols] for r in history])
    if history:
        final = {k: v for k, v in history[-1].items() if k != "epoch"}
        print(" ".join(f"{k} {v:.4f}" for k, v in final.items()))
    return 0


def cmd_gen_uap(args, cfg) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    train, val = _train_val(cfg, args.seed)
    target = None if cfg["target"] < 0 else cfg["target"]
    acfg = _attack_config(cfg, args.seed, target)
    pert = generate_uap(model, train, acfg)
    save_perturbation(out / "uap.ckpt", pert)
    write_ppm(out / "uap.ppm", perturbation_input(pert.filtered(), pert.eps))
    rows = [["fooling", f"{fooling_ratio(model, val, pert):.6f}"]]
    if target is not None:
        rows.append(["targeted_fooling",
                     f"{targeted_fooling_ratio(model, val, pert, target):.6f}"])
    write_csv(out / "eval.csv", ["metric", "value"], rows)
    for name, value in rows:
        print(f"{name} {value}")
    return 0


def cmd_gen_idp(args, cfg) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    _, val = _train_val(cfg, args.seed)
    if not 0 <= cfg["index"] < val.n:
        raise UsageError(f"gen-idp: index {cfg['index']} outside val split of {val.n}")
    image = val.images[cfg["index"]]
    acfg = AttackConfig(eps=cfg["eps"], iterations=cfg["iterations"],
                        batch_size=cfg["batch_size"], lr=cfg["lr"],
                        seed=subseed(args.seed, "attack"))
    v = generate_idp_batch(model, image[None], acfg)[0]
    from .attack import Perturbation
    pert = Perturbation(v, acfg.eps, acfg.filter, {"kind": "idp"})
    save_perturbation(out / "idp.ckpt", pert)
    write_ppm(out / "idp.ppm", perturbation_input(v, acfg.eps))
    flipped = fooling_ratio(model, image[None], pert)
    write_csv(out / "eval.csv", ["metric", "value"], [["flipped", f"{flipped:.0f}"]])
    print(f"flipped {flipped:.0f}")
    return 0


def cmd_eval_attack(args, cfg) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    pert = load_perturbation(args.pert)
    _, val = _train_val(cfg, args.seed)
    rows = [["fooling", f"{fooling_ratio(model, val, pert):.6f}"]]
    target = pert.meta.get("target", "")
    if target not in ("", "None"):
        rows.append(["targeted_fooling",
                     f"{targeted_fooling_ratio(model, val, pert, int(target)):.6f}"])
    stats = logit_cosine_stats(model, val, pert, n_images=cfg["n_cosine_images"],
                               seed=subseed(args.seed, "eval"))
    rows += [[k, f"{v:.6f}"] for k, v in stats.items()]
    write_csv(out / "eval.csv", ["metric", "value"], rows)
    for name, value in rows:
        print(f"{name} {value}")
    return 0


def cmd_sweep_freq(args, cfg) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    train, val = _train_val(cfg, args.seed)
    acfg = AttackConfig(eps=cfg["eps"], iterations=cfg["iterations"],
                        batch_size=cfg["batch_size"], lr=cfg["lr"],
                        seed=subseed(args.seed, "attack"))
    rows = frequency_sweep(model, train, val, acfg, cfg["kind"], cfg["bws"])
    write_csv(out / "sweep.csv", ["kind", "bw", "fooling", "entropy"],
              [[r["kind"], r["bw"], f"{r['fooling']:.6f}", f"{r['entropy']:.6f}"]
               for r in rows])
    for r in rows:
        print(f"{r['kind']} bw={r['bw']} fooling {r['fooling']:.4f}")
    return 0


def cmd_sweep_reg(args, cfg) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    train, val = _train_val(cfg, args.seed)
    acfg = AttackConfig(eps=cfg["eps"], iterations=cfg["iterations"],
                        batch_size=cfg["batch_size"], lr=cfg["lr"],
                        seed=subseed(args.seed, "attack"))
    rows = regularization_sweep(model, train, val, acfg, cfg["lambdas"])
    write_csv(out / "sweep.csv", ["lambda", "fooling", "entropy", "smoothness"],
              [[_format_value(r["lambda"]), f"{r['fooling']:.6f}",
                f"{r['entropy']:.6f}", f"{r['smoothness']:.6f}"] for r in rows])
    for r in rows:
        print(f"lambda={_format_value(r['lambda'])} fooling {r['fooling']:.4f} "
              f"entropy {r['entropy']:.4f}")
    return 0


def cmd_hide(args, cfg) -> int:
    out = _out_dir(args)
    encoder = load_model(args.encoder)
    secret = read_ppm(args.secret)
    cover = read_ppm(args.cover)
    res = hide(encoder, secret, cover)
    write_ppm(out / "container.ppm", res.container)
    write_ppm(out / "perturbation.ppm", np.clip(0.5 + res.s_p, 0.0, 1.0))
    write_csv(out / "eval.csv", ["metric", "value"], [["capd", f"{res.capd:.6f}"]])
    print(f"capd {res.capd:.4f}")
    return 0


def cmd_reveal(args, cfg) -> int:
    out = _out_dir(args)
    decoder = load_model(args.decoder)
    container = read_ppm(args.container)
    write_ppm(out / "revealed.ppm", reveal(decoder, container))
    print("revealed.ppm written")
    return 0


def cmd_entropy(args, cfg) -> int:
    image = read_ppm(args.infile)
    value = entropy(image)
    print(f"{value:.6f}")
    if args.out:
        out = _out_dir(args)
        write_csv(out / "entropy.csv", ["file", "entropy"],
                  [[args.infile, f"{value:.6f}"]])
    return 0


def cmd_filter(args, cfg) -> int:
    if args.kind not in FILTER_KINDS:
        raise UsageError(f"filter: kind must be one of {FILTER_KINDS}, got {args.kind!r}")
    image = read_ppm(args.infile)
    spec = FreqFilterSpec(args.kind, args.bw)
    write_ppm(args.out_img, np.clip(filter_image(image, spec), 0.0, 1.0))
    print(f"{args.out_img} written")
    return 0


def cmd_hybrid(args, cfg) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    _, val = _train_val(cfg, args.seed)
    rows = hybrid_accuracy(model, val, cfg["bws"], seed=subseed(args.seed, "pairing"))
    write_csv(out / "hybrid.csv",
              ["bw", "acc_hf", "acc_lf", "acc_hybrid_hf", "acc_hybrid_lf"],
              [[r["bw"], f"{r['acc_hf']:.6f}", f"{r['acc_lf']:.6f}",
                f"{r['acc_hybrid_hf']:.6f}", f"{r['acc_hybrid_lf']:.6f}"]
               for r in rows])
    for r in rows:
        print(f"bw={r['bw']} hybrid_hf {r['acc_hybrid_hf']:.4f} "
              f"hybrid_lf {r['acc_hybrid_lf']:.4f}")
    return 0


def cmd_analyze_layers(args, cfg) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    uap = load_perturbation(args.uap)
    _, val = _train_val(cfg, args.seed)
    rng = np.random.default_rng(subseed(args.seed, "eval"))
    n = min(cfg["n_images"], val.n)
    images = val.images[rng.choice(val.n, size=n, replace=False)]
    acfg = AttackConfig(eps=cfg["idp_eps"], iterations=cfg["idp_iterations"],
                        batch_size=cfg["batch_size"] if "batch_size" in cfg else 64,
                        seed=subseed(args.seed, "attack"))
    idps = generate_idp_batch(model, images, acfg)
    profile = layer_cosine_profile(model, images, uap, idps,
                                   noise_eps=cfg["noise_eps"],
                                   filter_bw=cfg["filter_bw"],
                                   seed=subseed(args.seed, "noise"))
    rows = []
    for cond in sorted(profile.stats):
        for tap in profile.taps:
            mean, std = profile.stats[cond][tap]
            rows.append([cond, tap, f"{mean:.6f}", f"{std:.6f}"])
    write_csv(out / "profile.csv", ["condition", "tap", "mean_cos", "std_cos"], rows)
    last = profile.taps[-1]
    print(f"last tap {last}: uap_pattern {profile.mean('uap_pattern', last):.4f} "
          f"uap_image {profile.mean('uap_image', last):.4f}")
    return 0


def cmd_rank_classes(args, cfg) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    encoder = load_model(args.encoder)
    decoder = load_model(args.decoder)
    ds = generate_synthetic(subseed(args.seed, "data"), per_class=cfg["per_class"],
                            size=cfg["size"])
    train, val = split_train_val(ds, val_per_class=cfg["val_per_class"],
                                 seed=subseed(args.seed, "perm"))
    covers = generate_textures(subseed(args.seed, "steg"),
                               per_class=cfg["cover_per_class"], size=cfg["size"])
    acfg = AttackConfig(eps=cfg["eps"], iterations=cfg["iterations"],
                        batch_size=cfg["batch_size"], lr=cfg["lr"],
                        target=cfg["target"], seed=subseed(args.seed, "attack"))
    r1, _ = class_robustness(model, train, val, cfg["target"], acfg)
    r2, skipped = class_reveal_quality(encoder, decoder, val, covers,
                                       n_per_class=cfg["reveal_per_class"],
                                       seed=subseed(args.seed, "pairing"))
    r3 = entropy_ranking(val)
    report = build_ranking_report(r1, r2, r3, n_perm=cfg["n_perm"],
                                  seed=subseed(args.seed, "perm"))
    write_csv(out / "ranking.csv",
              ["class", "score_r1", "score_r2", "score_r3",
               "rank_r1", "rank_r2", "rank_r3"],
              [[r["class"], f"{r['score_r1']:.6f}", f"{r['score_r2']:.6f}",
                f"{r['score_r3']:.6f}", r["rank_r1"], r["rank_r2"], r["rank_r3"]]
               for r in report.to_rows()])
    write_csv(out / "correlations.csv",
              ["pair", "raw_cosine", "spearman", "permutation_p"],
              [[pair, f"{c['raw_cosine']:.6f}", f"{c['spearman']:.6f}",
                f"{c['permutation_p']:.6f}"]
               for pair, c in sorted(report.correlations.items())])
    if skipped:
        print(f"reveal skipped classes: {skipped}")
    for pair, c in sorted(report.correlations.items()):
        print(f"{pair} spearman {c['spearman']:.4f} p {c['permutation_p']:.4f}")
    return 0


def cmd_table3(args, cfg) -> int:
    out = _out_dir(args)
    encoder = load_model(args.encoder)
    decoder = load_model(args.decoder)
    n = cfg["n_images"]
    covers = {
        "flat": generate_flat(subseed(args.seed, "data"), n=n, size=cfg["size"]),
        "natural": generate_textures(subseed(args.seed, "data") + 1,
                                     per_class=max(n // 10, 1), size=cfg["size"]),
        "noise": generate_noise(subseed(args.seed, "data") + 2, n=n, size=cfg["size"]),
    }
    secrets = {
        "flat": generate_flat(subseed(args.seed, "steg"), n=n, size=cfg["size"]),
        "natural": generate_textures(subseed(args.seed, "steg") + 1,
                                     per_class=max(n // 10, 1), size=cfg["size"]),
        "noise": generate_noise(subseed(args.seed, "steg") + 2, n=n, size=cfg["size"]),
    }
    rows = three_type_matrix(encoder, decoder, covers, secrets,
                             n_pairs=cfg["n_pairs"], seed=subseed(args.seed, "pairing"))
    write_csv(out / "table3.csv", ["cover", "flat", "natural", "noise"],
              [[r["cover"], f"{r['flat']:.4f}", f"{r['natural']:.4f}",
                f"{r['noise']:.4f}"] for r in rows])
    for r in rows:
        print(f"cover={r['cover']} flat {r['flat']:.1f} natural {r['natural']:.1f} "
              f"noise {r['noise']:.1f}")
    return 0


def cmd_scale_hiding(args, cfg) -> int:
    out = _out_dir(args)
    covers = _build_dataset(cfg, args.seed).images
    secrets = generate_textures(subseed(args.seed, "steg"), per_class=cfg["per_class"],
                                size=cfg["size"], background_amp=0.0,
                                texture_amp=(cfg["secret_amp_lo"], cfg["secret_amp_hi"]),
                                cue_amp=None).images
    sc = StegConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                    seed=subseed(args.seed, "steg"))
    decoder = build_decoder(seed=subseed(args.seed, "init"))
    n_val = max(len(covers) // 10, 1)
    res = scale_hiding_experiment(covers[n_val:], secrets[n_val:], sc, decoder,
                                  scale=cfg["scale"], eval_covers=covers[:n_val],
                                  eval_secrets=secrets[:n_val], n_eval=cfg["n_eval"])
    save_model(out / "decoder.ckpt", decoder)
    write_csv(out / "scale.csv", ["metric", "value"],
              [[k, f"{v:.6f}"] for k, v in res.items()])
    print(f"apd_with_cover {res['apd_with_cover']:.2f} "
          f"apd_without_cover {res['apd_without_cover']:.2f} "
          f"ratio {res['ratio']:.3f}")
    return 0


def cmd_usap(args, cfg) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    covers, secrets = _steg_corpora(cfg, args.seed)
    n_val = max(len(covers) // 10, 1)
    eval_ds = _build_dataset(cfg, args.seed, seed_name="eval")
    rows = []
    for label, gamma in (("usap", cfg["gamma"]), ("control", 0.0)):
        sc = StegConfig(beta=cfg["beta"], gamma=gamma, eps_attack=cfg["eps_attack"],
                        eps_hide=cfg["eps_hide"], epochs=cfg["epochs"],
                        batch_size=cfg["batch_size"], lr=cfg["lr"],
                        warmup_frac=cfg["warmup_frac"],
                        seed=subseed(args.seed, "steg"))
        enc, dec = build_steg_nets(cfg["eps_hide"], seed=subseed(args.seed, "init"))
        train_usp(enc, dec, covers[n_val:], secrets[n_val:], sc,
                  model=model if gamma > 0 else None)
        save_model(out / f"encoder_{label}.ckpt", enc)
        save_model(out / f"decoder_{label}.ckpt", dec)
        m = evaluate_usap(enc, dec, model, eval_ds, sc,
                          seed=subseed(args.seed, "pairing"))
        rows.append([label, _format_value(gamma), f"{m['fooling']:.6f}",
                     f"{m['sapd']:.6f}", f"{m['capd']:.6f}"])
        print(f"{label} gamma={_format_value(gamma)} fooling {m['fooling']:.4f} "
              f"sapd {m['sapd']:.2f} capd {m['capd']:.2f}")
    write_csv(out / "usap.csv", ["setting", "gamma", "fooling", "sapd", "capd"], rows)
    return 0


def _read_run_config(run: Path) -> dict[str, str]:
    cfg_path = run / "config.txt"
    if not cfg_path.is_file():
        raise DataError(f"report: {run}: missing config.txt")
    out = {}
    for line in cfg_path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _report_uap_run(run: Path, out: Path, n_samples: int, threads: int) -> list[list]:
    raw = _read_run_config(run)
    seed = int(raw["seed"])
    cfg = dict(_SCHEMAS["gen-uap"])
    for k in cfg:
        if k in raw:
            cfg[k] = _cast(k, raw[k], cfg[k])
    _, val = _train_val(cfg, seed)
    pert = load_perturbation(run / "uap.ckpt")
    v = pert.filtered()
    peak = max(float(np.abs(v).max()), 1e-12)
    amplified = np.clip(0.5 + v * (0.5 / peak), 0.0, 1.0)
    rows = []

    def render(i: int) -> list:
        clean = val.images[i]
        adv = apply_perturbation(clean[None], pert)[0]
        stem = f"sample{i}"
        write_ppm(out / f"{stem}_clean.ppm", clean)
        write_ppm(out / f"{stem}_pert.ppm", amplified)
        write_ppm(out / f"{stem}_adv.ppm", adv)
        write_ppm(out / f"{stem}_fourier_clean.ppm", fourier_image(clean))
        write_ppm(out / f"{stem}_fourier_pert.ppm", fourier_image(amplified))
        write_ppm(out / f"{stem}_fourier_adv.ppm", fourier_image(adv))
        return [stem, f"{entropy(clean):.6f}", f"{entropy(adv):.6f}",
                f"{entropy(amplified):.6f}"]

    idx = range(min(n_samples, val.n))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(render, idx))
    else:
        rows = [render(i) for i in idx]
    return rows


def cmd_report(args, cfg) -> int:
    out = _out_dir(args)
    all_rows = []
    for run_name in args.run:
        run = Path(run_name)
        if not (run / "manifest.csv").is_file():
            raise DataError(f"report: {run}: missing manifest.csv")
        if (run / "uap.ckpt").is_file():
            all_rows += _report_uap_run(run, out, cfg["n_samples"], args.threads)
        else:
            raise DataError(f"report: {run}: no reportable artifacts (expected uap.ckpt)")
    write_csv(out / "report.csv",
              ["sample", "entropy_clean", "entropy_adv", "entropy_pert"], all_rows)
    print(f"{len(all_rows)} samples reported")
    return 0


_HANDLERS = {
    "train-classifier": cmd_train_classifier,
    "train-steg": cmd_train_steg,
    "gen-uap": cmd_gen_uap,
    "gen-idp": cmd_gen_idp,
    "eval-attack": cmd_eval_attack,
    "sweep-freq": cmd_sweep_freq,
    "sweep-reg": cmd_sweep_reg,
    "hide": cmd_hide,
    "reveal": cmd_reveal,
    "entropy": cmd_entropy,
    "filter": cmd_filter,
    "hybrid": cmd_hybrid,
    "analyze-layers": cmd_analyze_layers,
    "rank-classes": cmd_rank_classes,
    "table3": cmd_table3,
    "scale-hiding": cmd_scale_hiding,
    "usap": cmd_usap,
    "report": cmd_report,
}

# commands whose artifacts stay wherever their explicit flags point; no run dir
_NO_RUN_DIR = {"entropy", "filter"}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freqlens",
                                     description="frequency-domain attack and "
                                                 "hiding experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, **path_flags) -> argparse.ArgumentParser:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=1)
        for flag, (required, help_text) in path_flags.items():
            p.add_argument(flag, required=required, default=None, help=help_text)
        return p

    add("train-classifier")
    add("train-steg", **{"--model": (False, "classifier checkpoint (for gamma > 0)")})
    add("gen-uap", **{"--model": (True, "classifier checkpoint")})
    add("gen-idp", **{"--model": (True, "classifier checkpoint")})
    add("eval-attack", **{"--model": (True, "classifier checkpoint"),
                          "--pert": (True, "perturbation checkpoint")})
    add("sweep-freq", **{"--model": (True, "classifier checkpoint")})
    add("sweep-reg", **{"--model": (True, "classifier checkpoint")})
    add("hide", **{"--encoder": (True, "encoder checkpoint"),
                   "--secret": (True, "secret PPM"), "--cover": (True, "cover PPM")})
    add("reveal", **{"--decoder": (True, "decoder checkpoint"),
                     "--container": (True, "container PPM")})
    p_e = add("entropy")
    p_e.add_argument("--in", dest="infile", required=True, help="input PPM")
    p_f = add("filter")
    p_f.add_argument("--in", dest="infile", required=True, help="input PPM")
    p_f.add_argument("--kind", required=True)
    p_f.add_argument("--bw", type=int, required=True)
    p_f.add_argument("--out-img", dest="out_img", required=True)
    add("hybrid", **{"--model": (True, "classifier checkpoint")})
    add("analyze-layers", **{"--model": (True, "classifier checkpoint"),
                             "--uap": (True, "perturbation checkpoint")})
    add("rank-classes", **{"--model": (True, "classifier checkpoint"),
                           "--encoder": (True, "encoder checkpoint"),
                           "--decoder": (True, "decoder checkpoint")})
    add("table3", **{"--encoder": (True, "encoder checkpoint"),
                     "--decoder": (True, "decoder checkpoint")})
    add("scale-hiding")
    p_u = add("usap", **{"--model": (True, "classifier checkpoint")})
    del p_u
    p_r = add("report")
    p_r.add_argument("--run", action="append", required=True,
                     help="completed run directory (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems and 0 on --help
        return 0 if exc.code == 0 else 1
    try:
        cfg = _load_config(args.command, args.config, args.overrides)
        code = _HANDLERS[args.command](args, cfg)
        if code == 0 and args.command not in _NO_RUN_DIR:
            _finish_run(_out_dir(args), args.command, cfg, args.seed)
        elif code == 0 and args.command in _NO_RUN_DIR and args.out:
            _finish_run(_out_dir(args), args.command, cfg, args.seed)
        return code
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
