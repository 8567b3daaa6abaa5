"""Spherical U-Net, its comparison variants, and the vertex-wise linear baseline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .layers import (
    BatchNorm,
    DiNeConv,
    InterpUpsample,
    MaxUnpool,
    Module,
    Pool,
    RePaConv,
    TransposedConv,
    VertexwiseLinear,
)
from .neighborhood import Hierarchy

__all__ = [
    "VARIANTS",
    "CONV_KINDS",
    "ModelSpec",
    "ConvBlock",
    "SphericalUNet",
    "SegNet",
    "NaiveDiNe",
    "build",
    "param_count",
    "conv_layer_count",
    "model_state",
    "load_model_state",
    "save_model",
    "load_model",
    "linear_baseline_fit",
    "linear_baseline_predict",
]

VARIANTS = ("unet", "unet18_dine", "unet18_repa", "naive_dine", "segnet_basic", "segnet_inter")
CONV_KINDS = ("dine_conv", "repa_conv", "transposed_conv", "vertexwise")

_DEFAULT_DEPTH = {
    "unet": 5,
    "unet18_dine": 4,
    "unet18_repa": 4,
    "segnet_basic": 5,
    "segnet_inter": 5,
}
_DEFAULT_POOLING = {
    "unet": "mean",
    "unet18_dine": "mean",
    "unet18_repa": "mean",
    "segnet_basic": "max",
    "segnet_inter": "mean",
}
NAIVE_BLOCKS = 16


@dataclass
class ModelSpec:
    """Declarative architecture description.

    ``depth`` is the number of resolution steps (pooling layers + 1); it
    defaults per variant. ``base_channels`` is C1; the U-Net18 variants
    halve it.
    """

    variant: str
    in_channels: int
    out_channels: int
    top_level: int
    base_channels: int = 64
    pooling: str | None = None
    depth: int | None = None
    repa_shape: tuple[int, int] = (3, 3)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        self.repa_shape = tuple(self.repa_shape)
        if self.variant == "naive_dine":
            self.depth = 1
            self.pooling = None
            return
        if self.depth is None:
            self.depth = _DEFAULT_DEPTH[self.variant]
        if self.pooling is None:
            self.pooling = _DEFAULT_POOLING[self.variant]
        if self.pooling not in ("mean", "max"):
            raise ValueError(f"unknown pooling mode {self.pooling!r}")
        if self.variant == "segnet_basic" and self.pooling != "max":
            raise ValueError("segnet_basic needs max pooling for its unpooling indices")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.top_level < self.depth - 1:
            raise ValueError(
                f"{self.variant} with depth {self.depth} needs top_level >= {self.depth - 1}, got {self.top_level}"
            )

    @property
    def channel_plan(self) -> list[int]:
        c1 = self.base_channels
        if self.variant.startswith("unet18"):
            c1 = max(1, c1 // 2)
        return [c1 * 2**i for i in range(self.depth)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls(**json.loads(text))


class ConvBlock(Module):
    """conv -> batch norm -> ReLU."""

    kind = "block"

    def __init__(self, conv: Module, channels: int):
        self.conv = conv
        self.bn = BatchNorm(channels)

    def __call__(self, x):
        return ad.relu(self.bn(self.conv(x)))


def _as_input(x) -> ad.Value:
    if isinstance(x, ad.Value):
        return x
    return ad.Value(np.asarray(x, dtype=ad.get_default_dtype()), requires_grad=False)


class _Net(Module):
    """Shared plumbing: leaf-layer listing and fixed per-channel input/output affine maps.

    The affine maps default to identity. Training may set them from the
    training set (standardized inputs, de-standardized regression output);
    they are stored with the checkpoint as buffers.
    """

    spec: ModelSpec
    _buffer_names = ("input_mean", "input_std", "output_mean", "output_std")

    def _init_normalization(self):
        dt = ad.get_default_dtype()
        self.input_mean = np.zeros(self.spec.in_channels, dtype=dt)
        self.input_std = np.ones(self.spec.in_channels, dtype=dt)
        self.output_mean = np.zeros(self.spec.out_channels, dtype=dt)
        self.output_std = np.ones(self.spec.out_channels, dtype=dt)

    def set_normalization(self, input_mean=None, input_std=None, output_mean=None, output_std=None):
        for name, val in zip(self._buffer_names, (input_mean, input_std, output_mean, output_std)):
            if val is not None:
                buf = getattr(self, name)
                buf[...] = np.asarray(val, dtype=buf.dtype).reshape(buf.shape)
        if np.any(self.input_std <= 0) or np.any(self.output_std <= 0):
            raise ValueError("normalization scales must be positive")

    def _affine(self, x, scale, shift):
        dt = x.dtype
        return ad.add_bias(ad.matmul(x, ad.Value(np.diag(scale).astype(dt))), ad.Value(shift.astype(dt)))

    def __call__(self, x):
        x = _as_input(x)
        if x.shape[-1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, got {x.shape[-1]}")
        inv = 1.0 / self.input_std
        x = self._affine(x, inv, -self.input_mean * inv)
        return self._affine(self.forward(x), self.output_std, self.output_mean)

    def layers(self):
        """Ordered ``(name, module)`` pairs of all leaf layers."""
        out = []

        def walk(mod, prefix):
            kids = list(mod.children())
            if not kids and mod is not self:
                out.append((prefix.rstrip("."), mod))
            for name, child in kids:
                walk(child, f"{prefix}{name}.")

        walk(self, "")
        return out


class SphericalUNet(_Net):
    """Encoder/decoder with transposed-conv upsampling and skip concatenation."""

    def __init__(self, spec: ModelSpec, hierarchy: Hierarchy, rng: np.random.Generator):
        self.spec = spec
        chans = spec.channel_plan
        levels = [spec.top_level - i for i in range(spec.depth)]
        use_repa = spec.variant == "unet18_repa"

        def conv(cin, cout, level):
            if use_repa:
                return RePaConv(cin, cout, hierarchy.sampler(level), rng)
            return DiNeConv(cin, cout, hierarchy.table(level), rng)

        self.pools = [Pool(hierarchy.table(levels[i - 1]), spec.pooling) for i in range(1, spec.depth)]
        self.encoder = []
        cin = spec.in_channels
        for i, (c, lvl) in enumerate(zip(chans, levels)):
            self.encoder.append([ConvBlock(conv(cin, c, lvl), c), ConvBlock(conv(c, c, lvl), c)])
            cin = c
        self.ups = []
        self.decoder = []
        for i in range(spec.depth - 2, -1, -1):
            c, lvl = chans[i], levels[i]
            self.ups.append(TransposedConv(chans[i + 1], c, hierarchy.table(lvl), rng))
            self.decoder.append([ConvBlock(conv(2 * c, c, lvl), c), ConvBlock(conv(c, c, lvl), c)])
        self.final = VertexwiseLinear(chans[0], spec.out_channels, rng)

    def forward(self, x):
        skips = []
        for i, (b1, b2) in enumerate(self.encoder):
            if i > 0:
                x, _ = self.pools[i - 1](x)
            x = b2(b1(x))
            skips.append(x)
        for up, (b1, b2), skip in zip(self.ups, self.decoder, reversed(skips[:-1])):
            x = ad.concat([up(x), skip], axis=-1)
            x = b2(b1(x))
        return self.final(x)


class SegNet(_Net):
    """Encoder/decoder without skips; non-learned upsampling.

    ``segnet_basic`` restores values at the memorized max-pooling slots,
    ``segnet_inter`` interpolates new vertices from their edge parents.
    The last conv of the bottleneck and of each decoder step halves the
    channels so that unpooling sees the channel count it was pooled with.
    """

    def __init__(self, spec: ModelSpec, hierarchy: Hierarchy, rng: np.random.Generator):
        self.spec = spec
        chans = spec.channel_plan
        levels = [spec.top_level - i for i in range(spec.depth)]
        d = spec.depth

        def conv(cin, cout, level):
            return DiNeConv(cin, cout, hierarchy.table(level), rng)

        self.pools = [Pool(hierarchy.table(levels[i - 1]), spec.pooling) for i in range(1, d)]
        self.encoder = []
        cin = spec.in_channels
        for i in range(d):
            c, lvl = chans[i], levels[i]
            last = chans[i - 1] if (i == d - 1 and d > 1) else c
            self.encoder.append([ConvBlock(conv(cin, c, lvl), c), ConvBlock(conv(c, last, lvl), last)])
            cin = c
        self.ups = []
        self.decoder = []
        for i in range(d - 2, -1, -1):
            c, lvl = chans[i], levels[i]
            out = chans[i - 1] if i > 0 else c
            if spec.variant == "segnet_basic":
                self.ups.append(MaxUnpool(hierarchy.table(lvl)))
            else:
                self.ups.append(InterpUpsample(hierarchy.parents(lvl)))
            self.decoder.append([ConvBlock(conv(c, c, lvl), c), ConvBlock(conv(c, out, lvl), out)])
        self.final = VertexwiseLinear(chans[0], spec.out_channels, rng)

    def forward(self, x):
        indices = []
        for i, (b1, b2) in enumerate(self.encoder):
            if i > 0:
                x, idx = self.pools[i - 1](x)
                indices.append(idx)
            x = b2(b1(x))
        for up, (b1, b2), idx in zip(self.ups, self.decoder, reversed(indices)):
            x = up(x, idx) if isinstance(up, MaxUnpool) else up(x)
            x = b2(b1(x))
        return self.final(x)


class NaiveDiNe(_Net):
    """16 (DiNe conv -> BN -> ReLU) blocks at a single level, then a vertex-wise head."""

    def __init__(self, spec: ModelSpec, hierarchy: Hierarchy, rng: np.random.Generator):
        self.spec = spec
        table = hierarchy.table(spec.top_level)
        c = spec.base_channels
        self.blocks = [ConvBlock(DiNeConv(spec.in_channels if i == 0 else c, c, table, rng), c) for i in range(NAIVE_BLOCKS)]
        self.final = VertexwiseLinear(c, spec.out_channels, rng)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.final(x)


def build(spec: ModelSpec, hierarchy: Hierarchy | None = None, dtype=None) -> _Net:
    """Instantiate ``spec`` with weights drawn from ``spec.seed``."""
    hierarchy = hierarchy or Hierarchy(spec.repa_shape)
    rng = np.random.default_rng(spec.seed)
    cls = {"naive_dine": NaiveDiNe, "segnet_basic": SegNet, "segnet_inter": SegNet}.get(spec.variant, SphericalUNet)
    with ad.precision(dtype or ad.get_default_dtype()):
        model = cls(spec, hierarchy, rng)
        model._init_normalization()
    return model


def _layer_formula(mod) -> int:
    kind = mod.kind
    if kind == "dine_conv":
        return 7 * mod.in_ch * mod.out_ch + mod.out_ch
    if kind == "repa_conv":
        return mod.sampler.n_points * mod.in_ch * mod.out_ch + mod.out_ch
    if kind == "vertexwise":
        return mod.in_ch * mod.out_ch + mod.out_ch
    if kind == "transposed_conv":
        return 7 * mod.out_ch * mod.in_ch
    if kind == "batch_norm":
        return 2 * mod.channels
    return 0


def param_count(model: _Net) -> dict:
    """Parameter totals by closed-form layer formulas and by walking array shapes."""
    per_layer = [(name, mod.kind, _layer_formula(mod)) for name, mod in model.layers()]
    return {
        "total": int(np.sum([c for _, _, c in per_layer])),
        "shape_walk": int(np.sum([p.size for p in model.parameters()])),
        "per_layer": per_layer,
    }


def conv_layer_count(model: _Net) -> dict:
    """Counts of convolution-class layers, DiNe/RePa convs and conv blocks."""
    kinds = [mod.kind for _, mod in model.layers()]
    return {
        "convolution_class": sum(k in CONV_KINDS for k in kinds),
        "dine_conv": kinds.count("dine_conv"),
        "repa_conv": kinds.count("repa_conv"),
        "transposed_conv": kinds.count("transposed_conv"),
        "vertexwise": kinds.count("vertexwise"),
        "conv_blocks": sum(isinstance(m, ConvBlock) for m in model.modules()),
        "pool": kinds.count("pool"),
    }


def model_state(model: _Net) -> dict[str, np.ndarray]:
    state = {f"param.{n}": p.data for n, p in model.named_parameters()}
    state.update({f"buffer.{n}": b for n, b in model.named_buffers()})
    return state


def load_model_state(model: _Net, state: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = {f"param.{n}" for n in params} | {f"buffer.{n}" for n in buffers}
    if set(state) != expected:
        missing = sorted(expected - set(state))
        extra = sorted(set(state) - expected)
        raise ad.CheckpointError(f"checkpoint does not match model (missing {missing[:3]}, unexpected {extra[:3]})")
    for n, p in params.items():
        arr = state[f"param.{n}"]
        if arr.shape != p.shape:
            raise ad.CheckpointError(f"shape mismatch for {n}: {arr.shape} vs {p.shape}")
        p.data = arr.astype(p.dtype)
    for n, b in buffers.items():
        b[...] = state[f"buffer.{n}"]


def save_model(path, model: _Net) -> None:
    """Write ``path`` (SUNW arrays) plus ``path.json`` holding the ModelSpec."""
    ad.save_arrays(path, model_state(model))
    with open(f"{path}.json", "w") as fh:
        fh.write(model.spec.to_json())


def load_model(path, hierarchy: Hierarchy | None = None) -> _Net:
    with open(f"{path}.json") as fh:
        spec = ModelSpec.from_json(fh.read())
    model = build(spec, hierarchy)
    load_model_state(model, ad.load_arrays(path))
    return model


# ---------------------------------------------------------------------------
# vertex-wise linear regression baseline

RIDGE = 1e-6


def linear_baseline_fit(inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-vertex least squares ``target ~ inputs @ w + c``.

    ``inputs`` is ``(S, N, F)`` and ``targets`` ``(S, N)`` or ``(S, N, 1)``
    over ``S`` subjects. Returns ``(N, F + 1)`` coefficients with the
    intercept last. Singular systems get a ``1e-6`` ridge.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(x.shape[0], x.shape[1])
    s, n, f = x.shape
    if s < 3:
        raise ValueError("need at least 3 training subjects per vertex")
    design = np.concatenate([x, np.ones((s, n, 1))], axis=2).transpose(1, 0, 2)  # (N, S, F+1)
    gram = design.transpose(0, 2, 1) @ design
    rhs = design.transpose(0, 2, 1) @ y.T[:, :, None]
    singular = np.linalg.cond(gram) > 1e12
    gram[singular] += RIDGE * np.eye(f + 1)
    return np.linalg.solve(gram, rhs)[:, :, 0]


def linear_baseline_predict(coeffs: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Apply per-vertex coefficients to ``(..., N, F)`` inputs, returning ``(..., N, 1)``."""
    x = np.asarray(inputs, dtype=np.float64)
    return (np.einsum("...nf,nf->...n", x, coeffs[:, :-1]) + coeffs[:, -1])[..., None]
