"""Adversarial attacks in raw pixel space.

All attacks take images in [0, 1], perturb within an l-infinity ball of radius
``epsilon`` around the ORIGINAL input, and re-clip to [0, 1]. Projection order
is fixed (ball first, then pixel range) so paired-execution identities between
the attacks hold bit-for-bit. ``sign(0) = 0`` everywhere.

The iterative attacks are best-iterate: they return, per sample, the visited
point with the highest loss rather than the last one. With ``init="clean"``
the clean input is one of the candidates, so the returned loss can never be
below the clean loss.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, Tape, per_sample_cross_entropy
from .util import derive_seed, rng_for

INITS = ("clean", "uniform")


@dataclass(frozen=True)
class AttackSpec:
    """Shared l-infinity attack configuration."""

    epsilon: float
    steps: int = 10
    step_size: float = 0.01
    restarts: int = 1
    init: str = "clean"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.steps and self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(**d)


def _check_pixel_batch(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if not np.isfinite(images).all():
        raise ValueError("attack inputs must be finite")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("attack inputs must lie in [0, 1] pixel space")
    return images


def _project(origin: np.ndarray, candidate: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip into the epsilon-ball around the origin, then into [0, 1]."""
    out = np.clip(candidate, origin - epsilon, origin + epsilon)
    np.clip(out, 0.0, 1.0, out=out)
    return out


def loss_and_input_grad(model, images: np.ndarray, labels: np.ndarray):
    """Per-sample losses and the input gradient of the mean loss.

    Model parameters are frozen for the duration, so nothing accumulates into
    their ``grad`` slots.
    """
    xt = Tensor(images, requires_grad=True)
    with model.frozen():
        with Tape() as tape:
            logits = model.forward(xt)
            loss = T.cross_entropy(logits, np.asarray(labels))
        tape.backward(loss)
    per = per_sample_cross_entropy(logits.data, labels)
    return per, xt.grad, logits.data


def fgsm(model, images, labels, epsilon: float) -> np.ndarray:
    """One signed-gradient step of size epsilon."""
    x0 = _check_pixel_batch(images)
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    _, grad, _ = loss_and_input_grad(model, x0, labels)
    return _project(x0, x0 + epsilon * np.sign(grad), epsilon)


def pgd(model, images, labels, spec: AttackSpec, seed: int = 0) -> np.ndarray:
    """Multi-restart projected gradient descent, best iterate per sample."""
    x0 = _check_pixel_batch(images)
    labels = np.asarray(labels)
    n = x0.shape[0]
    best = x0.copy()
    best_loss = np.full(n, -np.inf)

    def consider(x, per):
        nonlocal best, best_loss
        better = per > best_loss
        if better.any():
            best[better] = x[better]
            best_loss[better] = per[better]

    # Anchor the unperturbed input so the returned best iterate can never be
    # worse than doing nothing, regardless of the init scheme.
    consider(x0, per_sample_cross_entropy(model.forward(x0).data, labels))

    for restart in range(spec.restarts):
        if spec.init == "uniform":
            rng = rng_for(seed, f"pgd-restart:{restart}")
            x = _project(x0, x0 + rng.uniform(-spec.epsilon, spec.epsilon, x0.shape), spec.epsilon)
        else:
            x = x0.copy()
        for _ in range(spec.steps):
            per, grad, _ = loss_and_input_grad(model, x, labels)
            consider(x, per)
            x = _project(x0, x + spec.step_size * np.sign(grad), spec.epsilon)
        logits = model.forward(x).data
        consider(x, per_sample_cross_entropy(logits, labels))
    return best


def square_lite(model, images, labels, spec: AttackSpec, queries: int = 200,
                seed: int = 0) -> np.ndarray:
    """Black-box random-square search; forward evaluations only.

    Each query proposes, per sample, one axis-aligned square whose pixels are
    set to original +/- epsilon (one sign per channel), accepted only if the
    sample's loss strictly increases. The square side shrinks on a fixed
    schedule over the query budget.
    """
    x0 = _check_pixel_batch(images)
    labels = np.asarray(labels)
    if queries < 0:
        raise ValueError(f"queries must be >= 0, got {queries}")
    n, c, h, w = x0.shape
    rng = rng_for(seed, "square")
    adv = x0.copy()
    cur = per_sample_cross_entropy(model.forward(adv).data, labels)
    if queries == 0 or spec.epsilon == 0:
        return adv
    # fraction of the image area covered by one square, decayed at fixed
    # milestones of the budget (coarse first, fine later)
    p0 = 0.25
    milestones = (0.1, 0.25, 0.5, 0.75)
    for q in range(queries):
        done = q / queries
        p = p0 * (0.5 ** sum(done >= m for m in milestones))
        side = max(1, min(h, int(round(np.sqrt(p * h * w)))))
        rows = rng.integers(0, h - side + 1, size=n)
        cols = rng.integers(0, w - side + 1, size=n)
        signs = rng.choice((-1.0, 1.0), size=(n, c))
        prop = adv.copy()
        for i in range(n):
            r0, c0 = rows[i], cols[i]
            patch = x0[i, :, r0 : r0 + side, c0 : c0 + side]
            fill = patch + spec.epsilon * signs[i, :, None, None]
            prop[i, :, r0 : r0 + side, c0 : c0 + side] = np.clip(fill, 0.0, 1.0)
        per = per_sample_cross_entropy(model.forward(prop).data, labels)
        better = per > cur
        if better.any():
            adv[better] = prop[better]
            cur[better] = per[better]
    return adv


@dataclass(frozen=True)
class EvalAttack:
    """A named attack to run during evaluation."""

    name: str
    method: str  # "fgsm" | "pgd" | "square"
    spec: AttackSpec
    queries: int = 200

    def __post_init__(self):
        if self.method not in ("fgsm", "pgd", "square"):
            raise ValueError(f"unknown attack method {self.method!r}")

    def run(self, model, images, labels, seed: int = 0) -> np.ndarray:
        if self.method == "fgsm":
            return fgsm(model, images, labels, self.spec.epsilon)
        if self.method == "pgd":
            return pgd(model, images, labels, self.spec, seed=seed)
        return square_lite(model, images, labels, self.spec, queries=self.queries, seed=seed)


@dataclass
class RobustReport:
    clean_accuracy: float
    per_attack: dict[str, float]
    worst_accuracy: float


def robust_accuracy(model, images, labels, attacks: list[EvalAttack], seed: int = 0,
                    batch_size: int = 128) -> RobustReport:
    """Accuracy under each attack plus the worst case over all of them.

    Worst case is pointwise: a sample counts as robust only if every attack
    leaves it correctly classified, so the ensemble accuracy can never exceed
    the weakest single-attack accuracy.
    """
    images = _check_pixel_batch(images)
    labels = np.asarray(labels)
    names = [a.name for a in attacks]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate attack names in {names}")
    n = images.shape[0]
    clean_ok = np.zeros(n, dtype=bool)
    ok = {a.name: np.zeros(n, dtype=bool) for a in attacks}
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        x, y = images[lo:hi], labels[lo:hi]
        clean_ok[lo:hi] = model.forward(x).data.argmax(axis=1) == y
        for atk in attacks:
            batch_seed = derive_seed(seed, f"{atk.name}:batch:{lo}")
            adv = atk.run(model, x, y, seed=batch_seed)
            ok[atk.name][lo:hi] = model.forward(adv).data.argmax(axis=1) == y
    worst = clean_ok.copy()
    for flags in ok.values():
        worst &= flags
    return RobustReport(
        clean_accuracy=float(clean_ok.mean()),
        per_attack={name: float(flags.mean()) for name, flags in ok.items()},
        worst_accuracy=float(worst.mean()),
    )
