"""Robustness diagnostics: frequency sensitivity, local Lipschitz estimates,
token rank collapse, and small signal-processing helpers.

These probes explain *why* a structure is (non-)robust rather than just
scoring it: the Fourier heatmap shows which frequency bands flip predictions,
the Lipschitz lower bound tracks local sensitivity, and the rank-1 residual
measures how fast skipless attention stacks collapse all tokens onto one
direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, Tape
from .structures import SelfAttention, _Registry
from .util import atomic_write_bytes, derive_seed, rng_for


# ---------------------------------------------------------------------------
# Fourier sensitivity


def fourier_basis(i: int, j: int, n: int, norm: float = 4.0) -> np.ndarray:
    """Real cosine basis image of frequency (i, j) on an n x n grid.

    Entry (m, p) is cos(2*pi*(i*m + j*p)/n), rescaled so the l2 norm of the
    whole image equals ``norm``. Its 2-D DFT is supported on exactly the bins
    (i, j) and (-i, -j) mod n (which coincide for the self-conjugate
    frequencies such as DC).
    """
    if n < 1:
        raise ValueError(f"grid side must be positive, got {n}")
    if not 0 <= i < n or not 0 <= j < n:
        raise ValueError(f"frequency ({i}, {j}) outside the {n} x {n} grid")
    m = np.arange(n)
    phase = 2.0 * np.pi * (i * m[:, None] + j * m[None, :]) / n
    img = np.cos(phase)
    return img * (norm / np.linalg.norm(img))


@dataclass
class HeatmapResult:
    errors: np.ndarray  # (n, n) error rate per frequency cell
    norm: float
    samples: int

    @property
    def mean_error(self) -> float:
        return float(self.errors.mean())

    def high_frequency_mean(self) -> float:
        """Mean error over the quadrant where both folded frequencies are high.

        The folded frequency of index i on an n-grid is min(i, n - i); a cell
        counts as high-frequency when both are >= n/4, i.e. the quarter of the
        spectrum farthest from DC under conjugate symmetry.
        """
        n = self.errors.shape[0]
        folded = np.minimum(np.arange(n), n - np.arange(n))
        hi = folded >= n / 4
        mask = hi[:, None] & hi[None, :]
        return float(self.errors[mask].mean())


def fourier_heatmap(model, images, labels, norm: float = 4.0, seed: int = 0,
                    sample_limit: int = 256) -> HeatmapResult:
    """Error rate of the model under each single-frequency perturbation.

    For every frequency cell the basis image (scaled to l2 norm ``norm``) is
    added to each evaluation image with an independent random sign, identically
    across channels. Perturbed images are NOT re-clipped to [0, 1]: this is a
    sensitivity probe, not an attack, and clipping would silently shrink the
    probe where pixels saturate. The per-cell RNG stream is derived from
    (seed, i, j) so any cell can be recomputed independently.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if sample_limit is not None:
        images, labels = images[:sample_limit], labels[:sample_limit]
    b, _, h, w = images.shape
    if h != w:
        raise ValueError(f"heatmap needs square images, got {h}x{w}")
    errors = np.empty((h, h))
    for i in range(h):
        for j in range(h):
            basis = fourier_basis(i, j, h, norm)
            signs = rng_for(seed, f"cell:{i}:{j}").choice((-1.0, 1.0), size=b)
            perturbed = images + signs[:, None, None, None] * basis
            preds = model.forward(perturbed).data.argmax(axis=1)
            errors[i, j] = float((preds != labels).mean())
    return HeatmapResult(errors=errors, norm=float(norm), samples=b)


# ---------------------------------------------------------------------------
# local Lipschitz lower bound


def local_lipschitz(model, images, epsilon: float = 8.0 / 255.0, steps: int = 50,
                    restarts: int = 3, step_size: float | None = None,
                    seed: int = 0) -> np.ndarray:
    """Per-sample lower bound on the local Lipschitz constant.

    Gradient ascent on ||f(x') - f(x)||_1 with x' kept in the epsilon ball
    around x (no [0, 1] re-clip: the probe measures the function, not the data
    domain), tracking the best ratio ||f(x')-f(x)||_1 / ||x'-x||_inf seen at
    any iterate. Step size defaults to epsilon/10; starts are uniform in the
    ball and scale with epsilon, so for a linear model the estimate is
    independent of epsilon up to rounding.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if step_size is None:
        step_size = epsilon / 10.0
    x0 = np.asarray(images, dtype=np.float64)
    n = x0.shape[0]
    f0 = model.forward(x0).data
    f0t = Tensor(f0)
    flat = tuple(range(1, x0.ndim))
    best = np.zeros(n)

    def consider(x, fx):
        nonlocal best
        num = np.abs(fx - f0).sum(axis=1)
        den = np.abs(x - x0).max(axis=flat)
        live = den > 0
        ratio = np.where(live, num / np.where(live, den, 1.0), 0.0)
        best = np.maximum(best, ratio)

    for r in range(restarts):
        rng = rng_for(seed, f"lipschitz-restart:{r}")
        x = x0 + epsilon * rng.uniform(-1.0, 1.0, size=x0.shape)
        for _ in range(steps):
            xt = Tensor(x, requires_grad=True)
            with model.frozen():
                with Tape() as tape:
                    fx = model.forward(xt)
                    obj = T.reduce_sum(T.abs_val(T.sub(fx, f0t)))
                tape.backward(obj)
            consider(x, fx.data)
            x = np.clip(x + step_size * np.sign(xt.grad), x0 - epsilon, x0 + epsilon)
        consider(x, model.forward(x).data)
    return best


def lipschitz_bruteforce_linear(weight: np.ndarray) -> float:
    """Exact max of ||W d||_1 / ||d||_inf by enumerating the sign vertices.

    The objective is convex in d, so the maximum over the l-inf ball is
    attained at a vertex; for a single-row W it collapses to the l1 norm.
    Intended for small maps (2^in_dim enumeration).
    """
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {w.shape}")
    n = w.shape[1]
    if n > 20:
        raise ValueError(f"refusing to enumerate 2^{n} vertices")
    best = 0.0
    for bits in range(2 ** n):
        s = np.array([1.0 if bits >> k & 1 else -1.0 for k in range(n)])
        best = max(best, float(np.abs(w @ s).sum()))
    return best


# ---------------------------------------------------------------------------
# token rank collapse


def rank1_residual(z: np.ndarray) -> float:
    """Distance of a token matrix from its best rank-1 approximation 1 c^T.

    Returns ||Z - 1 c^T||_F / ||Z||_F with c the column-wise mean (the least
    squares minimizer). 0 means every token is identical; the identity matrix
    in 2-D gives 1/sqrt(2).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"expected a token matrix, got shape {z.shape}")
    denom = np.linalg.norm(z)
    if denom == 0:
        return 0.0
    centered = z - z.mean(axis=0, keepdims=True)
    return float(np.linalg.norm(centered) / denom)


def attention_collapse_profile(depth: int = 8, tokens: int = 16, dim: int = 32,
                               heads: int = 4, skip: bool = False, seed: int = 0,
                               init_std: float = 1.0) -> list[float]:
    """Rank-1 residual of a random token matrix after each of ``depth``
    freshly initialized self-attention layers, with or without residuals.

    Without skips, softmax mixing averages tokens toward a common direction
    and the residual decays with depth; with skips the identity path keeps it
    bounded away from zero. ``init_std`` is deliberately larger than the
    training default so the attention maps are non-degenerate.
    """
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "collapse")))
    reg = _Registry(rng)
    layers = [
        SelfAttention(reg, f"layer{i}", dim, heads, std=init_std) for i in range(depth)
    ]
    z = Tensor(rng.normal(size=(1, tokens, dim)))
    out = []
    for layer in layers:
        a = layer(z, side=0)
        z = T.add(z, a) if skip else a
        out.append(rank1_residual(z.data[0]))
    return out


# ---------------------------------------------------------------------------
# small signal helpers


def idft(spectrum: np.ndarray, n: int | None = None) -> np.ndarray:
    """Inverse DFT along the last axis by the direct formula.

    x[m] = (1/N) * sum_k X[k] * exp(+2j*pi*k*m/N), evaluated as a matrix
    product; matches numpy's ifft to rounding.
    """
    x = np.asarray(spectrum, dtype=np.complex128)
    size = x.shape[-1] if n is None else int(n)
    if size < 1:
        raise ValueError(f"transform length must be positive, got {size}")
    if x.shape[-1] != size:
        raise ValueError(f"spectrum length {x.shape[-1]} != transform length {size}")
    k = np.arange(size)
    basis = np.exp(2j * np.pi * np.outer(k, k) / size)
    return (x @ basis) / size


def standard_sigmoid(x):
    """The logistic function 1/(1+exp(-x)), computed stably on both tails."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def binary_cross_entropy(p, y):
    """Elementwise -(y log p + (1-y) log(1-p)); p must lie strictly in (0,1)."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if (p <= 0).any() or (p >= 1).any():
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def loss_value_range(x_lo: float, x_hi: float) -> tuple[float, float]:
    """Attainable binary cross-entropy range over inputs in [x_lo, x_hi].

    Considers both labels. The loss is monotone in the input for each label,
    so the extrema sit at the interval ends: larger-magnitude inputs widen the
    range, which is why saturating pre-activations make the loss landscape
    steep.
    """
    if x_hi < x_lo:
        raise ValueError(f"empty interval [{x_lo}, {x_hi}]")
    ends = standard_sigmoid(np.array([x_lo, x_hi]))
    candidates = np.concatenate([
        binary_cross_entropy(ends, np.ones(2)),
        binary_cross_entropy(ends, np.zeros(2)),
    ])
    return float(candidates.min()), float(candidates.max())


# ---------------------------------------------------------------------------
# heatmap rendering

# viridis-like palette: 8 anchor colors, linearly interpolated to 256 entries
_PALETTE_ANCHORS = np.array([
    (68, 1, 84), (70, 50, 127), (54, 92, 141), (39, 127, 142),
    (31, 161, 135), (74, 194, 109), (159, 218, 58), (253, 231, 37),
], dtype=np.float64)


def _build_palette() -> np.ndarray:
    xs = np.linspace(0.0, 1.0, len(_PALETTE_ANCHORS))
    grid = np.linspace(0.0, 1.0, 256)
    chans = [np.interp(grid, xs, _PALETTE_ANCHORS[:, c]) for c in range(3)]
    return np.stack(chans, axis=1).round().astype(np.uint8)


PALETTE = _build_palette()


def render_heatmap_ppm(matrix: np.ndarray, scale: int = 1, comment: str = "") -> bytes:
    """Encode a matrix as a binary P6 pixmap.

    Values are min-max scaled to [0, 1] (a constant matrix maps to palette
    index 0) and looked up in the fixed 256-entry palette; ``scale`` replicates
    each cell into a scale x scale pixel block. Bytes are row-major RGB
    triples, top row first, maxval 255.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    lo, hi = m.min(), m.max()
    unit = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    idx = np.minimum((unit * 256).astype(int), 255)
    rgb = PALETTE[idx]
    rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    h, w = rgb.shape[:2]
    head = f"P6\n{'# ' + comment + chr(10) if comment else ''}{w} {h}\n255\n"
    return head.encode() + rgb.tobytes()


def write_heatmap_ppm(matrix: np.ndarray, path, scale: int = 1, comment: str = "") -> None:
    atomic_write_bytes(path, render_heatmap_ppm(matrix, scale=scale, comment=comment))


def write_heatmap_csv(matrix: np.ndarray, path, comment: str = "") -> None:
    """Raw heatmap values, full precision, deterministic bytes."""
    m = np.asarray(matrix, dtype=np.float64)
    lines = [f"# {comment}"] if comment else []
    lines += [",".join(repr(v) for v in row) for row in m.tolist()]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())
