"""Deterministic training: optimizers, adversarial steps, binary checkpoints.

Everything that consumes randomness draws from PCG64 streams derived from the
config seed, and the data-shuffling stream is separate from the attack stream,
so a standard run and an adversarial run see identical batch orders. Training
state (parameters, optimizer slots, RNG state, counters) round-trips through
a single self-describing checkpoint file bit-for-bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor, Tape
from .attacks import AttackSpec, pgd
from .structures import Model, StructureSpec
from .util import atomic_write_bytes, derive_seed

OPTIMIZERS = ("sgd", "adam")

CHECKPOINT_MAGIC = b"RGCK"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    """The forward pass produced a NaN or infinite loss."""


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    adversarial: AttackSpec | None = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "optimizer", "lr", "momentum", "beta1", "beta2", "adam_eps",
            "epochs", "batch_size", "seed",
        )}
        d["adversarial"] = self.adversarial.to_dict() if self.adversarial else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        adv = d.pop("adversarial", None)
        return cls(adversarial=AttackSpec.from_dict(adv) if adv else None, **d)


class SGD:
    """Stochastic gradient descent with classical momentum."""

    kind = "sgd"

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"vel:{name}": v.copy() for name, v in self.velocity.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.velocity:
            self.velocity[name] = arrays[f"vel:{name}"].copy()

    def export_scalars(self) -> dict:
        return {}

    def load_scalars(self, d: dict) -> None:
        pass


class Adam:
    kind = "adam"

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params, self.lr = params, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam_m:{name}": a.copy() for name, a in self.m.items()}
        out.update({f"adam_v:{name}": a.copy() for name, a in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.m:
            self.m[name] = arrays[f"adam_m:{name}"].copy()
            self.v[name] = arrays[f"adam_v:{name}"].copy()

    def export_scalars(self) -> dict:
        return {"t": self.t}

    def load_scalars(self, d: dict) -> None:
        self.t = int(d["t"])


def _make_optimizer(config: TrainConfig, params: dict[str, Tensor]):
    if config.optimizer == "sgd":
        return SGD(params, lr=config.lr, momentum=config.momentum)
    return Adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                eps=config.adam_eps)


@dataclass
class TrainResult:
    history: list[float]
    completed_epochs: int
    aborted: bool = False
    reason: str = ""

    @property
    def final_loss(self) -> float:
        return self.history[-1] if self.history else float("nan")


class Trainer:
    """Owns the optimizer, RNG streams, and step/epoch counters for one model."""

    def __init__(self, model: Model, config: TrainConfig):
        self.model = model
        self.config = config
        self.optimizer = _make_optimizer(config, model.params)
        self.rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "shuffle")))
        self.epoch = 0
        self.steps = 0
        self.history: list[float] = []

    def train_step(self, images: np.ndarray, labels: np.ndarray) -> float:
        """One optimizer update on the batch; returns the training loss.

        With an adversarial config the batch is replaced by its PGD maximizer
        before the update (the inner maximization runs with parameters frozen
        and uses an attack RNG stream keyed by the step counter, so the data
        order is untouched). Raises :class:`NonFiniteLossError`, before any
        update, if the loss is NaN or infinite.
        """
        x = np.asarray(images, dtype=np.float64)
        y = np.asarray(labels)
        adv = self.config.adversarial
        if adv is not None and adv.epsilon > 0:
            attack_seed = derive_seed(self.config.seed, f"attack:{self.steps}")
            x = pgd(self.model, x, y, adv, seed=attack_seed)
        self.model.zero_grad()
        with Tape() as tape:
            loss = T.cross_entropy(self.model.forward(x), y)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(f"loss became {value} at step {self.steps}")
            tape.backward(loss)
        self.optimizer.step()
        self.steps += 1
        self.history.append(value)
        return value

    def fit(self, images: np.ndarray, labels: np.ndarray) -> TrainResult:
        """Epoch loop with per-epoch reshuffling and non-finite rollback.

        If a step produces a non-finite loss, parameters and optimizer state
        are restored to the latest epoch boundary and the result is marked
        aborted; the model stays usable.
        """
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels)
        n = images.shape[0]
        if n == 0 or labels.shape != (n,):
            raise ValueError(f"bad dataset: {images.shape} images, labels {labels.shape}")
        bs = self.config.batch_size
        for _ in range(self.config.epochs):
            snapshot = (
                self.model.state_arrays(),
                self.optimizer.state_arrays(),
                self.optimizer.export_scalars(),
            )
            order = self.rng.permutation(n)
            try:
                for lo in range(0, n, bs):
                    idx = order[lo : lo + bs]
                    self.train_step(images[idx], labels[idx])
            except NonFiniteLossError as exc:
                self.model.load_state(snapshot[0])
                self.optimizer.load_state_arrays(snapshot[1])
                self.optimizer.load_scalars(snapshot[2])
                return TrainResult(
                    history=list(self.history),
                    completed_epochs=self.epoch,
                    aborted=True,
                    reason=str(exc),
                )
            self.epoch += 1
        return TrainResult(history=list(self.history), completed_epochs=self.epoch)


def fit(model: Model, images, labels, config: TrainConfig) -> tuple[Trainer, TrainResult]:
    """Convenience wrapper: build a :class:`Trainer` and run its epoch loop."""
    trainer = Trainer(model, config)
    return trainer, trainer.fit(images, labels)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: magic, u32 version, u64 header length, UTF-8 JSON header, then the
# raw little-endian float64 array payloads in the order the header lists them.


def _array_payload(arrays: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    directory = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        directory.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.astype("<f8", copy=False).tobytes())
    return directory, b"".join(chunks)


def save_checkpoint(path, model: Model, trainer: Trainer | None = None,
                    extra: dict | None = None) -> None:
    arrays = dict(model.state_arrays())
    header: dict = {
        "version": CHECKPOINT_VERSION,
        "structure": model.spec.to_dict(),
        "model_seed": model.seed,
        "normalization": None,
        "trainer": None,
        "extra": extra or {},
    }
    if model.normalization is not None:
        mean, std = model.normalization
        header["normalization"] = {"mean": mean.tolist(), "std": std.tolist()}
    if trainer is not None:
        arrays.update(trainer.optimizer.state_arrays())
        header["trainer"] = {
            "config": trainer.config.to_dict(),
            "epoch": trainer.epoch,
            "steps": trainer.steps,
            "history": trainer.history,
            "optimizer_scalars": trainer.optimizer.export_scalars(),
            "rng_state": _encode_rng_state(trainer.rng),
        }
    directory, payload = _array_payload(arrays)
    header["arrays"] = directory
    blob = json.dumps(header, sort_keys=True).encode()
    out = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<Q", len(blob)),
        blob,
        payload,
    ])
    atomic_write_bytes(path, out)


def load_checkpoint(path) -> tuple[Model, Trainer | None, dict]:
    """Rebuild the model (and trainer, if one was saved) bit-for-bit."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    offset = 16 + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += count * 8
    spec = StructureSpec.from_dict(header["structure"])
    model = Model(spec, seed=int(header.get("model_seed", 0)))
    model.load_state({name: arr for name, arr in arrays.items() if name in model.params})
    if header["normalization"] is not None:
        model.set_normalization(header["normalization"]["mean"], header["normalization"]["std"])
    trainer = None
    if header["trainer"] is not None:
        tinfo = header["trainer"]
        trainer = Trainer(model, TrainConfig.from_dict(tinfo["config"]))
        trainer.epoch = int(tinfo["epoch"])
        trainer.steps = int(tinfo["steps"])
        trainer.history = [float(v) for v in tinfo["history"]]
        trainer.optimizer.load_state_arrays(arrays)
        trainer.optimizer.load_scalars(tinfo["optimizer_scalars"])
        _restore_rng_state(trainer.rng, tinfo["rng_state"])
    return model, trainer, header.get("extra", {})


def _encode_rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def _restore_rng_state(rng: np.random.Generator, encoded: dict) -> None:
    if encoded["bit_generator"] != "PCG64":
        raise ValueError(f"unexpected bit generator {encoded['bit_generator']!r}")
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(encoded["state"]), "inc": int(encoded["inc"])},
        "has_uint32": int(encoded["has_uint32"]),
        "uinteger": int(encoded["uinteger"]),
    }
