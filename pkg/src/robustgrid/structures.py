"""Composable vision-model structure grid.

A model structure is described by six categorical axes plus desk-scale
dimensions:

* ``family``       - "vit" (self-attention) or "vmlp" (token-mixing MLP)
* ``embedding``    - "ori" (patchify + linear), "conv" (small conv stem first),
                     "pconv" (strided patch convolution)
* ``token_mixer``  - "ori" (global), "window" (shifted local windows),
                     "conv" (3x3 conv projections / conv mixer)
* ``cmlp``         - classifier head after average pooling: "ori" (linear MLP),
                     "conv" (1-D conv MLP), "none" (single linear readout)
* ``norm``         - "layernorm" or "none", applied pre-mixer and pre-FFN
* ``skip``         - "residual" or "none" around both sub-blocks
* ``stacking``     - "orivit" (single stage), "cnn", "swin", "imagepy"
                     (three flavours of stage hierarchy; transitions double the
                     width and halve the grid side)

Every block computes ``Z' = Skip(TM(Norm(Z)))`` then
``Z_next = Skip(FFN(Norm(Z')))``. Activations travel as token matrices
(B, N, d) with a known square grid side; convolutional pieces reshape to
(B, d, s, s) internally and back.

``validate_structure`` rejects the combinations that cannot exist, each with a
stable rule name. ``structure_from_preset`` builds the named rows of the
structure tables, "(a)".."(n)" and "(1)".."(24)".
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

FAMILIES = ("vit", "vmlp")
EMBEDDINGS = ("ori", "conv", "pconv")
TOKEN_MIXERS = ("ori", "window", "conv")
CMLPS = ("ori", "conv", "none")
NORMS = ("layernorm", "none")
SKIPS = ("residual", "none")
STACKINGS = ("orivit", "cnn", "swin", "imagepy")

INIT_STD = 0.02
LN_EPS = 1e-5
WINDOW_SIZE = 4
CONV_STEM_WIDTH = 16
HEAD_CONV_CHANNELS = 8


class StructureError(ValueError):
    """An impossible axis combination; ``rule`` names the violated constraint."""

    def __init__(self, rule: str, message: str):
        super().__init__(f"[{rule}] {message}")
        self.rule = rule


@dataclass(frozen=True)
class StructureSpec:
    family: str = "vit"
    embedding: str = "ori"
    token_mixer: str = "ori"
    cmlp: str = "ori"
    norm: str = "layernorm"
    skip: str = "residual"
    stacking: str = "orivit"
    stage_layers: tuple[int, ...] = (12,)
    image: tuple[int, int, int] = (3, 32, 32)  # channels, height, width
    patch: int = 4
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "stage_layers", tuple(int(n) for n in self.stage_layers))
        object.__setattr__(self, "image", tuple(int(n) for n in self.image))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "embedding": self.embedding,
            "token_mixer": self.token_mixer,
            "cmlp": self.cmlp,
            "norm": self.norm,
            "skip": self.skip,
            "stacking": self.stacking,
            "stage_layers": list(self.stage_layers),
            "image": list(self.image),
            "patch": self.patch,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StructureSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise StructureError("unknown-field", f"unknown structure fields {sorted(unknown)}")
        return cls(**d)


def _stage_sides(spec: StructureSpec) -> list[int]:
    side0 = spec.image[1] // spec.patch
    return [max(side0 // (2 ** i), 0) for i in range(len(spec.stage_layers))]


def validate_structure(spec: StructureSpec) -> None:
    """Raise :class:`StructureError` if the structure cannot be instantiated."""
    checks = (
        ("family", spec.family, FAMILIES),
        ("embedding", spec.embedding, EMBEDDINGS),
        ("token_mixer", spec.token_mixer, TOKEN_MIXERS),
        ("cmlp", spec.cmlp, CMLPS),
        ("norm", spec.norm, NORMS),
        ("skip", spec.skip, SKIPS),
        ("stacking", spec.stacking, STACKINGS),
    )
    for name, value, allowed in checks:
        if value not in allowed:
            raise StructureError("unknown-value", f"{name}={value!r} not in {allowed}")

    c, h, w = spec.image
    if c < 1 or h < 1 or w < 1:
        raise StructureError("image-shape", f"image {spec.image} has a non-positive extent")
    if h != w:
        raise StructureError("square-image", f"image must be square, got {h}x{w}")
    if spec.patch < 1 or h % spec.patch:
        raise StructureError(
            "patch-divisibility", f"patch {spec.patch} does not tile side {h}"
        )
    if spec.embed_dim < 1:
        raise StructureError("embed-dim", f"embed_dim must be positive, got {spec.embed_dim}")
    if spec.classes < 2:
        raise StructureError("class-count", f"need at least 2 classes, got {spec.classes}")
    if spec.mlp_ratio <= 0:
        raise StructureError("mlp-ratio", f"mlp_ratio must be positive, got {spec.mlp_ratio}")
    if not spec.stage_layers or any(n < 1 for n in spec.stage_layers):
        raise StructureError(
            "stage-count", f"stage_layers must be positive, got {spec.stage_layers}"
        )

    if spec.family == "vit" and spec.embed_dim % spec.heads:
        raise StructureError(
            "head-divisibility", f"embed_dim {spec.embed_dim} not divisible by {spec.heads} heads"
        )

    if spec.stacking == "orivit":
        # the flat stacking has no notion of a 2-D grid: no strided patch
        # convolution, no convolutional mixing, exactly one stage
        if spec.embedding == "pconv" or spec.token_mixer == "conv":
            raise StructureError(
                "oriViT-dimension",
                "the flat stacking keeps a 1-D token sequence; pconv embeddings "
                "and conv token mixers need a 2-D grid",
            )
        if len(spec.stage_layers) != 1:
            raise StructureError(
                "orivit-single-stage",
                f"the flat stacking is single-stage, got {len(spec.stage_layers)} stages",
            )
    if spec.stacking == "cnn" and not (spec.embedding == "pconv" and spec.token_mixer == "conv"):
        raise StructureError(
            "cnn-fixed-components",
            "the CNN-style stacking requires a pconv embedding and a conv token mixer",
        )
    if spec.stacking == "swin" and spec.token_mixer == "conv":
        raise StructureError(
            "swin-conv-tm", "the shifted-window stacking does not take a conv token mixer"
        )
    if spec.stacking == "imagepy" and spec.embedding != "pconv":
        raise StructureError(
            "imagepy-pconv-embedding",
            "the image-pyramid stacking requires a pconv embedding",
        )

    sides = _stage_sides(spec)
    for i, side in enumerate(sides):
        if side < 1:
            raise StructureError(
                "spatial-divisibility",
                f"stage {i} grid side collapses to {side} (start side {sides[0]})",
            )
        if i + 1 < len(sides) and side % 2:
            raise StructureError(
                "spatial-divisibility",
                f"stage {i} side {side} is odd and cannot be halved",
            )
        if spec.token_mixer == "window":
            window = min(WINDOW_SIZE, side)
            if side % window:
                raise StructureError(
                    "window-divisibility",
                    f"stage {i} side {side} not divisible by window {window}",
                )


_STAGE_LAYERS = {
    "orivit": (12,),
    "cnn": (1, 2, 9),
    "swin": (2, 2, 6, 2),
    "imagepy": (2, 2, 8),
}

_MAIN_PRESETS = {
    "(a)": ("ori", "ori", "ori", "none", "orivit"),
    "(b)": ("ori", "ori", "ori", "layernorm", "orivit"),
    "(c)": ("ori", "ori", "conv", "none", "orivit"),
    "(d)": ("ori", "ori", "conv", "layernorm", "orivit"),
    "(e)": ("conv", "ori", "ori", "none", "orivit"),
    "(f)": ("conv", "ori", "ori", "layernorm", "orivit"),
    "(g)": ("conv", "ori", "conv", "none", "orivit"),
    "(h)": ("conv", "ori", "conv", "layernorm", "orivit"),
    "(i)": ("pconv", "conv", "ori", "layernorm", "cnn"),
    "(j)": ("pconv", "conv", "conv", "layernorm", "cnn"),
    "(k)": ("ori", "window", "ori", "layernorm", "swin"),
    "(l)": ("pconv", "window", "conv", "layernorm", "swin"),
    "(m)": ("pconv", "ori", "ori", "layernorm", "imagepy"),
    "(n)": ("pconv", "conv", "conv", "layernorm", "imagepy"),
}

# the 24 single-stage ablation rows: six (embedding, cmlp) groups, each cycled
# through (norm, skip) = (LN,res), (LN,none), (none,res), (none,none)
_ABLATION_GROUPS = [
    ("ori", "ori"), ("ori", "none"), ("ori", "conv"),
    ("conv", "ori"), ("conv", "none"), ("conv", "conv"),
]
_NORM_SKIP_CYCLE = [
    ("layernorm", "residual"), ("layernorm", "none"),
    ("none", "residual"), ("none", "none"),
]

PRESET_IDS = tuple(_MAIN_PRESETS) + tuple(f"({i})" for i in range(1, 25))


def structure_from_preset(preset: str, family: str = "vit", **overrides) -> StructureSpec:
    """Build the named table row; dimension fields may be overridden."""
    if family not in FAMILIES:
        raise StructureError("unknown-value", f"family={family!r} not in {FAMILIES}")
    if preset in _MAIN_PRESETS:
        emb, tm, cmlp, norm, stacking = _MAIN_PRESETS[preset]
        skip = "residual"
    else:
        try:
            idx = int(preset.strip("()")) - 1
        except ValueError:
            idx = -1
        if not (preset.startswith("(") and preset.endswith(")") and 0 <= idx < 24):
            raise StructureError("unknown-preset", f"no preset named {preset!r}")
        emb, cmlp = _ABLATION_GROUPS[idx // 4]
        norm, skip = _NORM_SKIP_CYCLE[idx % 4]
        tm, stacking = "ori", "orivit"
    fields = dict(
        family=family, embedding=emb, token_mixer=tm, cmlp=cmlp,
        norm=norm, skip=skip, stacking=stacking,
        stage_layers=_STAGE_LAYERS[stacking],
    )
    allowed = {"image", "patch", "embed_dim", "heads", "mlp_ratio", "classes", "stage_layers"}
    bad = set(overrides) - allowed
    if bad:
        raise StructureError("unknown-field", f"cannot override {sorted(bad)}")
    fields.update(overrides)
    return StructureSpec(**fields)


# ---------------------------------------------------------------------------
# token / grid movement


def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, N, P*P*C) tokens, patches enumerated row-major.

    Each token is the channel-major (C, P, P) flattening of its patch.
    """
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise T.ShapeError(f"patchify: patch {patch} does not tile ({h},{w})")
    sh, sw = h // patch, w // patch
    t = T.reshape(x, (b, c, sh, patch, sw, patch))
    t = T.transpose(t, (0, 2, 4, 1, 3, 5))
    return T.reshape(t, (b, sh * sw, c * patch * patch))


def tokens_to_map(t: Tensor, side: int) -> Tensor:
    b, n, d = t.shape
    if n != side * side:
        raise T.ShapeError(f"tokens_to_map: {n} tokens do not form a {side}x{side} grid")
    g = T.reshape(t, (b, side, side, d))
    return T.transpose(g, (0, 3, 1, 2))


def map_to_tokens(m: Tensor) -> Tensor:
    b, d, side, _ = m.shape
    g = T.transpose(m, (0, 2, 3, 1))
    return T.reshape(g, (b, side * side, d))


def window_partition(t: Tensor, side: int, window: int, shift: int = 0) -> Tensor:
    """(B, N, d) tokens -> (B*nw, window*window, d) groups.

    A positive ``shift`` cyclically rolls the grid up-left before cutting, the
    usual trick for letting alternating blocks mix across window borders.
    """
    b, n, d = t.shape
    if n != side * side:
        raise T.ShapeError(f"window_partition: {n} tokens do not form side {side}")
    if side % window:
        raise T.ShapeError(f"window_partition: side {side} not divisible by window {window}")
    g = T.reshape(t, (b, side, side, d))
    if shift:
        g = T.roll(g, (-shift, -shift), axes=(1, 2))
    nw = side // window
    g = T.reshape(g, (b, nw, window, nw, window, d))
    g = T.transpose(g, (0, 1, 3, 2, 4, 5))
    return T.reshape(g, (b * nw * nw, window * window, d))


def window_unpartition(wins: Tensor, side: int, window: int, shift: int = 0) -> Tensor:
    """Inverse of :func:`window_partition`."""
    nw = side // window
    groups, wsq, d = wins.shape
    if wsq != window * window or groups % (nw * nw):
        raise T.ShapeError(
            f"window_unpartition: got {wins.shape}, expected (B*{nw * nw}, {window * window}, d)"
        )
    b = groups // (nw * nw)
    g = T.reshape(wins, (b, nw, nw, window, window, d))
    g = T.transpose(g, (0, 1, 3, 2, 4, 5))
    g = T.reshape(g, (b, side, side, d))
    if shift:
        g = T.roll(g, (shift, shift), axes=(1, 2))
    return T.reshape(g, (b, side * side, d))


# ---------------------------------------------------------------------------
# parameters


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std; matches the usual init."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


class _Registry:
    """Creates and names every parameter in deterministic construction order."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}
        self.kinds: dict[str, str] = {}

    def _add(self, name: str, arr: np.ndarray, kind: str) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(arr, requires_grad=True)
        self.params[name] = t
        self.kinds[name] = kind
        return t

    def weight(self, name: str, shape, std: float = INIT_STD) -> Tensor:
        return self._add(name, truncated_normal(self.rng, shape, std), "weight")

    def bias(self, name: str, shape) -> Tensor:
        return self._add(name, np.zeros(shape), "bias")

    def norm_gain(self, name: str, dim: int) -> Tensor:
        return self._add(name, np.ones(dim), "norm")

    def norm_bias(self, name: str, dim: int) -> Tensor:
        return self._add(name, np.zeros(dim), "norm")

    def pos(self, name: str, shape, std: float = INIT_STD) -> Tensor:
        return self._add(name, self.rng.normal(0.0, std, size=shape), "pos")


class Linear:
    def __init__(self, reg: _Registry, name: str, d_in: int, d_out: int, std: float = INIT_STD):
        self.w = reg.weight(f"{name}.weight", (d_in, d_out), std)
        self.b = reg.bias(f"{name}.bias", (d_out,))

    def __call__(self, t: Tensor) -> Tensor:
        return T.add(T.matmul(t, self.w), self.b)


class Conv2dLayer:
    def __init__(self, reg, name, c_in, c_out, k, stride=1, padding=0, std: float = INIT_STD):
        self.w = reg.weight(f"{name}.weight", (c_out, c_in, k, k), std)
        self.b = reg.bias(f"{name}.bias", (c_out,))
        self.stride, self.padding = stride, padding

    def __call__(self, m: Tensor) -> Tensor:
        return T.conv2d(m, self.w, self.b, stride=self.stride, padding=self.padding)


class Conv1dLayer:
    def __init__(self, reg, name, c_in, c_out, k, stride=1, padding=0, std: float = INIT_STD):
        self.w = reg.weight(f"{name}.weight", (c_out, c_in, k), std)
        self.b = reg.bias(f"{name}.bias", (c_out,))
        self.stride, self.padding = stride, padding

    def __call__(self, m: Tensor) -> Tensor:
        return T.conv1d(m, self.w, self.b, stride=self.stride, padding=self.padding)


class NormLayer:
    def __init__(self, reg, name, dim):
        self.gain = reg.norm_gain(f"{name}.gain", dim)
        self.bias = reg.norm_bias(f"{name}.bias", dim)

    def __call__(self, t: Tensor) -> Tensor:
        return T.layer_norm(t, self.gain, self.bias, eps=LN_EPS)


# ---------------------------------------------------------------------------
# mixers


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head softmax attention over (B, n, d) projections."""
    b, n, d = q.shape
    dh = d // heads

    def split(t):
        return T.transpose(T.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    qs, ks, vs = split(q), split(k), split(v)
    scores = T.scale(T.matmul(qs, T.transpose(ks, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = T.matmul(T.softmax(scores), vs)
    return T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))


class SelfAttention:
    """Global multi-head self-attention with linear projections."""

    def __init__(self, reg, name, dim, heads, std: float = INIT_STD):
        self.heads = heads
        self.q = Linear(reg, f"{name}.q", dim, dim, std)
        self.k = Linear(reg, f"{name}.k", dim, dim, std)
        self.v = Linear(reg, f"{name}.v", dim, dim, std)
        self.out = Linear(reg, f"{name}.out", dim, dim, std)

    def __call__(self, t: Tensor, side: int) -> Tensor:
        ctx = scaled_attention(self.q(t), self.k(t), self.v(t), self.heads)
        return self.out(ctx)


class WindowAttention:
    """Self-attention within fixed windows; odd blocks use a cyclic shift."""

    def __init__(self, reg, name, dim, heads, window, shift):
        self.heads, self.window, self.shift = heads, window, shift
        self.q = Linear(reg, f"{name}.q", dim, dim)
        self.k = Linear(reg, f"{name}.k", dim, dim)
        self.v = Linear(reg, f"{name}.v", dim, dim)
        self.out = Linear(reg, f"{name}.out", dim, dim)

    def __call__(self, t: Tensor, side: int) -> Tensor:
        wins = window_partition(t, side, self.window, self.shift)
        ctx = scaled_attention(self.q(wins), self.k(wins), self.v(wins), self.heads)
        ctx = self.out(ctx)
        return window_unpartition(ctx, side, self.window, self.shift)


class ConvAttention:
    """Attention whose q/k/v/out projections are 3x3 convs on the token grid."""

    def __init__(self, reg, name, dim, heads):
        self.heads = heads
        self.q = Conv2dLayer(reg, f"{name}.q", dim, dim, 3, padding=1)
        self.k = Conv2dLayer(reg, f"{name}.k", dim, dim, 3, padding=1)
        self.v = Conv2dLayer(reg, f"{name}.v", dim, dim, 3, padding=1)
        self.out = Conv2dLayer(reg, f"{name}.out", dim, dim, 3, padding=1)

    def __call__(self, t: Tensor, side: int) -> Tensor:
        m = tokens_to_map(t, side)
        q, k, v = map_to_tokens(self.q(m)), map_to_tokens(self.k(m)), map_to_tokens(self.v(m))
        ctx = scaled_attention(q, k, v, self.heads)
        return map_to_tokens(self.out(tokens_to_map(ctx, side)))


class TokenMixMLP:
    """MLP across the token axis (transpose, mix, transpose back)."""

    def __init__(self, reg, name, n_tokens, std: float = INIT_STD):
        hidden = max(1, n_tokens // 2)
        self.fc1 = Linear(reg, f"{name}.fc1", n_tokens, hidden, std)
        self.fc2 = Linear(reg, f"{name}.fc2", hidden, n_tokens, std)

    def mix(self, t: Tensor) -> Tensor:
        x = T.transpose(t, (0, 2, 1))
        x = self.fc2(T.gelu(self.fc1(x)))
        return T.transpose(x, (0, 2, 1))

    def __call__(self, t: Tensor, side: int) -> Tensor:
        return self.mix(t)


class WindowTokenMix:
    """Token-mixing MLP applied within (optionally shifted) windows."""

    def __init__(self, reg, name, window, shift):
        self.window, self.shift = window, shift
        self.mlp = TokenMixMLP(reg, name, window * window)

    def __call__(self, t: Tensor, side: int) -> Tensor:
        wins = window_partition(t, side, self.window, self.shift)
        mixed = self.mlp.mix(wins)
        return window_unpartition(mixed, side, self.window, self.shift)


class ConvMixer:
    """Spatial mixing by a pair of 3x3 convs on the token grid."""

    def __init__(self, reg, name, dim):
        self.c1 = Conv2dLayer(reg, f"{name}.c1", dim, dim, 3, padding=1)
        self.c2 = Conv2dLayer(reg, f"{name}.c2", dim, dim, 3, padding=1)

    def __call__(self, t: Tensor, side: int) -> Tensor:
        m = tokens_to_map(t, side)
        return map_to_tokens(self.c2(T.gelu(self.c1(m))))


class FeedForward:
    """Per-token channel MLP, d -> ratio*d -> d."""

    def __init__(self, reg, name, dim, ratio):
        hidden = max(1, int(round(dim * ratio)))
        self.fc1 = Linear(reg, f"{name}.fc1", dim, hidden)
        self.fc2 = Linear(reg, f"{name}.fc2", hidden, dim)

    def __call__(self, t: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(t)))


def _make_mixer(reg, name, spec: StructureSpec, dim, n_tokens, side, block_index):
    window = min(WINDOW_SIZE, side)
    shift = (window // 2) if (block_index % 2 and window > 1) else 0
    if spec.family == "vit":
        if spec.token_mixer == "ori":
            return SelfAttention(reg, name, dim, spec.heads)
        if spec.token_mixer == "window":
            return WindowAttention(reg, name, dim, spec.heads, window, shift)
        return ConvAttention(reg, name, dim, spec.heads)
    if spec.token_mixer == "ori":
        return TokenMixMLP(reg, name, n_tokens)
    if spec.token_mixer == "window":
        return WindowTokenMix(reg, name, window, shift)
    return ConvMixer(reg, name, dim)


class Block:
    """One mixer + FFN block with the norm and skip toggles applied."""

    def __init__(self, reg, name, spec, dim, n_tokens, side, block_index):
        self.skip = spec.skip == "residual"
        self.norm1 = NormLayer(reg, f"{name}.norm1", dim) if spec.norm == "layernorm" else None
        self.norm2 = NormLayer(reg, f"{name}.norm2", dim) if spec.norm == "layernorm" else None
        self.mixer = _make_mixer(reg, f"{name}.tm", spec, dim, n_tokens, side, block_index)
        self.ffn = FeedForward(reg, f"{name}.ffn", dim, spec.mlp_ratio)

    def __call__(self, t: Tensor, side: int) -> Tensor:
        u = self.norm1(t) if self.norm1 is not None else t
        a = self.mixer(u, side)
        t = T.add(t, a) if self.skip else a
        u = self.norm2(t) if self.norm2 is not None else t
        b = self.ffn(u)
        return T.add(t, b) if self.skip else b


# ---------------------------------------------------------------------------
# embeddings, transitions, head


class _Embedding:
    """Image -> (tokens, side), positional term added here and only here."""

    def __init__(self, reg, spec: StructureSpec):
        c, h, _ = spec.image
        self.kind = spec.embedding
        self.patch = spec.patch
        side = h // spec.patch
        n = side * side
        self.side = side
        if self.kind == "conv":
            self.stem0 = Conv2dLayer(reg, "embed.stem0", c, CONV_STEM_WIDTH, 3, padding=1)
            self.stem1 = Conv2dLayer(reg, "embed.stem1", CONV_STEM_WIDTH, c, 3, padding=1)
        if self.kind == "pconv":
            self.proj = Conv2dLayer(
                reg, "embed.proj", c, spec.embed_dim, spec.patch, stride=spec.patch
            )
        else:
            self.proj = Linear(reg, "embed.proj", c * spec.patch * spec.patch, spec.embed_dim)
        self.pos = reg.pos("embed.pos", (n, spec.embed_dim))

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "conv":
            x = T.gelu(self.stem1(T.gelu(self.stem0(x))))
        if self.kind == "pconv":
            t = map_to_tokens(self.proj(x))
        else:
            t = self.proj(patchify(x, self.patch))
        return T.add(t, self.pos)


class ConvTransition:
    """CNN-style stage change: 2x2 stride-2 conv, d -> 2d."""

    def __init__(self, reg, name, dim):
        self.conv = Conv2dLayer(reg, f"{name}.conv", dim, 2 * dim, 2, stride=2)

    def __call__(self, t: Tensor, side: int) -> Tensor:
        return map_to_tokens(self.conv(tokens_to_map(t, side)))


class MergeTransition:
    """Patch-merge stage change: concat 2x2 neighbours, norm, linear 4d -> 2d."""

    def __init__(self, reg, name, dim, norm_on: bool):
        self.norm = NormLayer(reg, f"{name}.norm", 4 * dim) if norm_on else None
        self.proj = Linear(reg, f"{name}.proj", 4 * dim, 2 * dim)

    def __call__(self, t: Tensor, side: int) -> Tensor:
        b, n, d = t.shape
        half = side // 2
        g = T.reshape(t, (b, half, 2, half, 2, d))
        g = T.transpose(g, (0, 1, 3, 2, 4, 5))
        merged = T.reshape(g, (b, half * half, 4 * d))
        if self.norm is not None:
            merged = self.norm(merged)
        return self.proj(merged)


class AggregateTransition:
    """Pyramid stage change: 3x3 conv d -> 2d, norm, then 2x2 max pool."""

    def __init__(self, reg, name, dim, norm_on: bool):
        self.conv = Conv2dLayer(reg, f"{name}.conv", dim, 2 * dim, 3, padding=1)
        self.norm = NormLayer(reg, f"{name}.norm", 2 * dim) if norm_on else None

    def __call__(self, t: Tensor, side: int) -> Tensor:
        m = self.conv(tokens_to_map(t, side))
        if self.norm is not None:
            m = tokens_to_map(self.norm(map_to_tokens(m)), side)
        return map_to_tokens(T.max_pool2d(m, 2))


class _Head:
    """Average-pooled feature -> logits, with the classifier-MLP variants."""

    def __init__(self, reg, spec: StructureSpec, dim: int):
        self.kind = spec.cmlp
        self.skip = spec.skip == "residual"
        self.norm = None
        if self.kind != "none" and spec.norm == "layernorm":
            self.norm = NormLayer(reg, "head.norm", dim)
        if self.kind == "ori":
            self.fc = Linear(reg, "head.fc", dim, dim)
        elif self.kind == "conv":
            self.c0 = Conv1dLayer(reg, "head.conv0", 1, HEAD_CONV_CHANNELS, 3, padding=1)
            self.c1 = Conv1dLayer(reg, "head.conv1", HEAD_CONV_CHANNELS, 1, 3, padding=1)
        self.out = Linear(reg, "head.out", dim, spec.classes)

    def __call__(self, v: Tensor) -> Tensor:
        if self.kind == "none":
            return self.out(v)
        u = self.norm(v) if self.norm is not None else v
        if self.kind == "ori":
            h = T.gelu(self.fc(u))
        else:
            b, d = u.shape
            h = T.reshape(u, (b, 1, d))
            h = self.c1(T.gelu(self.c0(h)))
            h = T.reshape(h, (b, d))
        t = T.add(v, h) if self.skip else h
        return self.out(t)


# ---------------------------------------------------------------------------
# the model


class Model:
    """A concrete network built from a validated :class:`StructureSpec`.

    Construction is deterministic in (spec, seed): parameters are created in a
    fixed order from one PCG64 stream, so identical inputs give bit-identical
    models. ``normalization`` optionally holds per-channel (mean, std) applied
    as the first step of ``forward`` so attacks stay in raw pixel space.
    """

    def __init__(self, spec: StructureSpec, seed: int = 0):
        validate_structure(spec)
        self.spec = spec
        self.seed = int(seed)
        reg = _Registry(np.random.Generator(np.random.PCG64(self.seed)))
        self.embedding = _Embedding(reg, spec)
        norm_on = spec.norm == "layernorm"

        self.stages: list[list[Block]] = []
        self.transitions: list = []
        side = self.embedding.side
        dim = spec.embed_dim
        for i, depth in enumerate(spec.stage_layers):
            blocks = [
                Block(reg, f"stage{i}.block{j}", spec, dim, side * side, side, j)
                for j in range(depth)
            ]
            self.stages.append(blocks)
            if i + 1 < len(spec.stage_layers):
                name = f"stage{i + 1}.merge"
                if spec.stacking == "cnn":
                    self.transitions.append(ConvTransition(reg, name, dim))
                elif spec.stacking == "swin":
                    self.transitions.append(MergeTransition(reg, name, dim, norm_on))
                else:
                    self.transitions.append(AggregateTransition(reg, name, dim, norm_on))
                dim *= 2
                side //= 2
        self.final_dim = dim
        self.head = _Head(reg, spec, dim)
        self.params = reg.params
        self.kinds = reg.kinds
        self.normalization: tuple[np.ndarray, np.ndarray] | None = None
        self._norm_tensors: tuple[Tensor, Tensor] | None = None

    def set_normalization(self, mean, std) -> None:
        c = self.spec.image[0]
        mean = np.asarray(mean, dtype=np.float64).reshape(c)
        std = np.asarray(std, dtype=np.float64).reshape(c)
        if (std <= 0).any():
            raise ValueError("normalization std must be positive")
        self.normalization = (mean, std)
        self._norm_tensors = (
            Tensor(mean.reshape(1, c, 1, 1)),
            Tensor((1.0 / std).reshape(1, c, 1, 1)),
        )

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        c, h, w = self.spec.image
        if x.ndim != 4 or x.shape[1:] != (c, h, w):
            raise T.ShapeError(f"expected (B, {c}, {h}, {w}) input, got {x.shape}")
        if self._norm_tensors is not None:
            mu, inv = self._norm_tensors
            x = T.mul(T.sub(x, mu), inv)
        t = self.embedding(x)
        side = self.embedding.side
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                t = block(t, side)
            if i < len(self.transitions):
                t = self.transitions[i](t, side)
                side //= 2
        v = T.mean(t, axes=1)
        return self.head(v)

    __call__ = forward

    # -- parameter bookkeeping -------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def nonzero_count(self) -> int:
        return int(sum(np.count_nonzero(p.data) for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @contextmanager
    def frozen(self):
        """Temporarily stop recording gradients for all parameters."""
        saved = {name: p.requires_grad for name, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for name, p in self.params.items():
                p.requires_grad = saved[name]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(
                f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}"
            )
        for name, p in self.params.items():
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError(f"state {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def copy(self) -> "Model":
        dup = Model(self.spec, seed=self.seed)
        dup.load_state({name: p.data for name, p in self.params.items()})
        if self.normalization is not None:
            dup.set_normalization(*self.normalization)
        return dup


def build_model(spec: StructureSpec, seed: int = 0) -> Model:
    return Model(spec, seed=seed)


class LinearPixelModel:
    """Flattened-pixel linear classifier.

    The smallest thing that satisfies the model interface (forward / frozen /
    state round-trip / parameter kinds). Useful as a sanity baseline and as an
    analytically tractable subject for attack and Lipschitz oracles.
    """

    def __init__(self, image: tuple[int, int, int] = (1, 4, 4), classes: int = 2,
                 seed: int = 0, std: float = 0.1):
        self.image = tuple(int(v) for v in image)
        self.classes = int(classes)
        self.seed = int(seed)
        c, h, w = self.image
        d = c * h * w
        rng = np.random.Generator(np.random.PCG64(self.seed))
        self.params = {
            "w": Tensor(rng.normal(0.0, std, size=(d, self.classes)), requires_grad=True),
            "b": Tensor(np.zeros(self.classes), requires_grad=True),
        }
        self.kinds = {"w": "weight", "b": "bias"}
        self.normalization = None

    @property
    def weight(self) -> np.ndarray:
        return self.params["w"].data

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        c, h, w = self.image
        if x.ndim != 4 or x.shape[1:] != (c, h, w):
            raise T.ShapeError(f"expected (B, {c}, {h}, {w}) input, got {x.shape}")
        flat = T.reshape(x, (x.shape[0], c * h * w))
        return T.add(T.matmul(flat, self.params["w"]), self.params["b"])

    __call__ = forward

    def named_parameters(self):
        return iter(self.params.items())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def nonzero_count(self) -> int:
        return int(sum(np.count_nonzero(p.data) for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @contextmanager
    def frozen(self):
        saved = {name: p.requires_grad for name, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for name, p in self.params.items():
                p.requires_grad = saved[name]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError(f"state {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def copy(self) -> "LinearPixelModel":
        dup = LinearPixelModel(self.image, self.classes, seed=self.seed)
        dup.load_state({name: p.data for name, p in self.params.items()})
        return dup


# ---------------------------------------------------------------------------
# tape-free evaluation helpers


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward in evaluation mode (no tape), batched over the first axis."""
    images = np.asarray(images, dtype=np.float64)
    chunks = [
        model.forward(images[i : i + batch_size]).data
        for i in range(0, images.shape[0], batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    preds = predict_logits(model, images, batch_size).argmax(axis=1)
    return float((preds == np.asarray(labels)).mean())
