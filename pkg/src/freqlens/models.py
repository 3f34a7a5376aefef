"""Fixed CNN architectures and the training loop.

Three architectures, all stride-1 3x3 convs with same padding on 32x32 inputs:

* ``classifier32``: conv(3->16)+relu [conv1] -> conv(16->32)+relu+pool [conv2]
  -> conv(32->64)+relu+pool [conv3] -> dense(4096->128)+relu [fc1]
  -> dense(128->K) [logits]. Bracketed names are activation taps.
* ``encoder32``: conv 3->32->32->32->3, relu between, output eps_hide * tanh
  (so the secret perturbation is hard-bounded in amplitude).
* ``decoder32``: conv 3->32->32->32->32->3, relu between, sigmoid output.

Weights and biases init uniform(-s, s) with s = sqrt(1 / fan_in), seeded.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericalError, Tensor, adam_step, backward, no_grad
from .data import DataError, Dataset, read_checkpoint, write_checkpoint


class Conv:
    def __init__(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator):
        s = float(np.sqrt(1.0 / (cin * k * k)))
        self.name = name
        self.w = Tensor(rng.uniform(-s, s, size=(cout, cin, k, k)), requires_grad=True)
        self.b = Tensor(rng.uniform(-s, s, size=(cout,)), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b)


class Dense:
    def __init__(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
        s = float(np.sqrt(1.0 / fan_in))
        self.name = name
        self.w = Tensor(rng.uniform(-s, s, size=(fan_in, fan_out)), requires_grad=True)
        self.b = Tensor(rng.uniform(-s, s, size=(fan_out,)), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dense(x, self.w, self.b)


class _Stateless:
    def params(self) -> dict[str, Tensor]:
        return {}


class ReLU(_Stateless):
    def __call__(self, x):
        return ad.relu(x)


class Sigmoid(_Stateless):
    def __call__(self, x):
        return ad.sigmoid(x)


class ScaledTanh(_Stateless):
    def __init__(self, scale: float):
        self.scale = float(scale)

    def __call__(self, x):
        return ad.mul(ad.tanh(x), self.scale)


class AvgPool2(_Stateless):
    def __call__(self, x):
        return ad.avgpool2(x)


class Model:
    """An ordered layer pipeline with named activation taps."""

    def __init__(self, arch: str, steps: list[tuple[object, str | None]], meta: dict[str, str]):
        self.arch = arch
        self.steps = steps
        self.meta = dict(meta)

    @property
    def taps(self) -> list[str]:
        return [name for _, name in self.steps if name is not None]

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer, _ in self.steps:
            out.update(layer.params())
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def forward(self, x: Tensor) -> Tensor:
        for layer, _ in self.steps:
            x = layer(x)
        return x

    def forward_taps(self, x: Tensor) -> dict[str, Tensor]:
        taps: dict[str, Tensor] = {}
        for layer, name in self.steps:
            x = layer(x)
            if name is not None:
                taps[name] = x
        return taps

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params().values():
            p.requires_grad = flag

    def freeze(self):
        self.set_requires_grad(False)
        return self

    def unfreeze(self):
        self.set_requires_grad(True)
        return self


def build_classifier(num_classes: int = 10, seed: int = 0, size: int = 32) -> Model:
    if size % 4 != 0:
        raise DataError(f"build_classifier: size must be divisible by 4, got {size}")
    rng = np.random.default_rng(seed)
    conv1 = Conv("conv1", 3, 16, 3, rng)
    conv2 = Conv("conv2", 16, 32, 3, rng)
    conv3 = Conv("conv3", 32, 64, 3, rng)
    fc1 = Dense("fc1", 64 * (size // 4) ** 2, 128, rng)
    fc2 = Dense("fc2", 128, num_classes, rng)
    steps = [
        (conv1, None), (ReLU(), "conv1"),
        (conv2, None), (ReLU(), None), (AvgPool2(), "conv2"),
        (conv3, None), (ReLU(), None), (AvgPool2(), "conv3"),
        (fc1, None), (ReLU(), "fc1"),
        (fc2, "logits"),
    ]
    return Model("classifier32", steps,
                 {"arch": "classifier32", "num_classes": str(num_classes), "size": str(size)})


def build_encoder(eps_hide: float = 0.06, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    steps = [
        (Conv("e1", 3, 32, 3, rng), None), (ReLU(), None),
        (Conv("e2", 32, 32, 3, rng), None), (ReLU(), None),
        (Conv("e3", 32, 32, 3, rng), None), (ReLU(), None),
        (Conv("e4", 32, 3, 3, rng), None), (ScaledTanh(eps_hide), "out"),
    ]
    return Model("encoder32", steps, {"arch": "encoder32", "eps_hide": f"{eps_hide:.10g}"})


def build_decoder(seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    steps = [
        (Conv("d1", 3, 32, 3, rng), None), (ReLU(), None),
        (Conv("d2", 32, 32, 3, rng), None), (ReLU(), None),
        (Conv("d3", 32, 32, 3, rng), None), (ReLU(), None),
        (Conv("d4", 32, 32, 3, rng), None), (ReLU(), None),
        (Conv("d5", 32, 3, 3, rng), None), (Sigmoid(), "out"),
    ]
    return Model("decoder32", steps, {"arch": "decoder32"})


def build_steg_nets(eps_hide: float = 0.06, seed: int = 0) -> tuple[Model, Model]:
    return build_encoder(eps_hide, seed), build_decoder(seed + 1)


# ---------------------------------------------------------------------------
# inference helpers (no tape)
# ---------------------------------------------------------------------------

def model_logits(model: Model, images: np.ndarray, batch: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    outs = []
    with no_grad():
        for start in range(0, len(images), batch):
            outs.append(model.forward(Tensor(images[start:start + batch])).data.copy())
    return np.concatenate(outs, axis=0) if outs else np.zeros((0,))


def predict(model: Model, images: np.ndarray, batch: int = 256) -> np.ndarray:
    return np.argmax(model_logits(model, images, batch), axis=1)


def accuracy(model: Model, ds: Dataset, batch: int = 256) -> float:
    if ds.n == 0:
        raise DataError("accuracy: empty dataset")
    return float(np.mean(predict(model, ds.images, batch) == ds.labels))


def forward_with_taps(model: Model, images: np.ndarray, batch: int = 256) -> dict[str, np.ndarray]:
    """Activations at every tap for a batch of images, without building a tape."""
    images = np.asarray(images, dtype=np.float32)
    acc: dict[str, list[np.ndarray]] = {name: [] for name in model.taps}
    with no_grad():
        for start in range(0, len(images), batch):
            taps = model.forward_taps(Tensor(images[start:start + batch]))
            for name, t in taps.items():
                acc[name].append(t.data.copy())
    return {name: np.concatenate(chunks, axis=0) for name, chunks in acc.items()}


def run_model(model: Model, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Plain forward pass (used for encoder/decoder nets); returns the output array."""
    images = np.asarray(images, dtype=np.float32)
    outs = []
    with no_grad():
        for start in range(0, len(images), batch):
            outs.append(model.forward(Tensor(images[start:start + batch])).data.copy())
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

from dataclasses import dataclass


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError(f"TrainConfig: bad values {self}")


def train_classifier(model: Model, train: Dataset, val: Dataset, cfg: TrainConfig) -> list[dict]:
    """Adam on softmax cross-entropy; returns per-epoch rows
    (epoch, train_loss, val_acc). Zero epochs touches nothing."""
    params = model.params()
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(train.n)
        losses = []
        for step, start in enumerate(range(0, train.n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            x = Tensor(train.images[idx])
            loss = ad.softmax_cross_entropy(model.forward(x), train.labels[idx])
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise NumericalError(f"train_classifier: non-finite loss at epoch {epoch} step {step}")
            grads = backward(loss, params)
            if cfg.weight_decay > 0.0:
                for name, p in params.items():
                    grads[name] = grads[name] + cfg.weight_decay * p.data
            adam_step(state, grads, params)
            losses.append(lv)
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_acc": accuracy(model, val),
        })
    return history


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(path, model: Model, extra_meta: dict[str, str] | None = None) -> None:
    tensors = {name: p.data for name, p in model.params().items()}
    meta = dict(model.meta)
    if extra_meta:
        meta.update({k: str(v) for k, v in extra_meta.items()})
    write_checkpoint(path, tensors, meta)


def load_model(path) -> Model:
    tensors, meta = read_checkpoint(path)
    arch = meta.get("arch", "")
    if arch == "classifier32":
        model = build_classifier(int(meta["num_classes"]), seed=0, size=int(meta.get("size", "32")))
    elif arch == "encoder32":
        model = build_encoder(float(meta["eps_hide"]), seed=0)
    elif arch == "decoder32":
        model = build_decoder(seed=0)
    else:
        raise DataError(f"load_model: {path}: unknown architecture {arch!r}")
    params = model.params()
    for name, p in params.items():
        if name not in tensors:
            raise DataError(f"load_model: {path}: missing tensor {name!r}")
        if tensors[name].shape != p.data.shape:
            raise DataError(f"load_model: {path}: tensor {name!r} has shape "
                            f"{tensors[name].shape}, expected {p.data.shape}")
        p.data = tensors[name].astype(p.data.dtype)
    model.meta = meta
    return model
