"""ILGNet assembly: stem, inception modules, local/global feature taps.

Pipeline at width 1.0 and 224-pixel input::

    3x224x224 -> stem -> 192x28x28 -> inc_a -> 256x28x28 -> inc_b -> 480x28x28
      -> pool3 -> 480x14x14 -> inc_c -> 512x14x14
    inc_a -> gap -> proj_local1 (256)  \\
    inc_b -> gap -> proj_local2 (256)   -> concat (1024) -> output (2)
    inc_c -> gap -> proj_global (512)  /

Tap labels: (1) stem, (2)-(4) inception outputs,
(5)/(6) local feature vectors, (7) global feature vector.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from ilgnet import engine as E
from ilgnet.engine import ConvSpec, Layer, Parameter


class Variant(str, enum.Enum):
    ILGNET = "ilgnet-inc-v1-bn"
    THIRD_GOOGLENET = "third-googlenet-v1-bn"
    WITHOUT_INC = "ilgnet-without-inc"

    @classmethod
    def parse(cls, name: str) -> "Variant":
        key = name.strip().lower().replace("_", "-").replace(".", "-")
        aliases = {
            "ilgnet": cls.ILGNET,
            "ilgnet-inc-v1-bn": cls.ILGNET,
            "third-googlenet-v1-bn": cls.THIRD_GOOGLENET,
            "1/3-googlenetv1-bn": cls.THIRD_GOOGLENET,
            "googlenet-third": cls.THIRD_GOOGLENET,
            "ilgnet-without-inc": cls.WITHOUT_INC,
        }
        if key not in aliases:
            raise ValueError(f"unknown variant {name!r}; choose from {', '.join(v.value for v in cls)}")
        return aliases[key]


@dataclass(frozen=True)
class InceptionSpec:
    c1x1: int
    c3x3_reduce: int
    c3x3: int
    c5x5_reduce: int
    c5x5: int
    pool_proj: int

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if int(v) < 1:
                raise ValueError(f"inception width {k} must be >= 1, got {v}")

    @property
    def out_channels(self) -> int:
        return self.c1x1 + self.c3x3 + self.c5x5 + self.pool_proj

    def scaled(self, mult: float) -> "InceptionSpec":
        return InceptionSpec(*(scale_width(v, mult) for v in self.__dict__.values()))


# GoogLeNet v1 inception(3a), (3b), (4a)
INCEPTION_A = InceptionSpec(64, 96, 128, 16, 32, 32)
INCEPTION_B = InceptionSpec(128, 128, 192, 32, 96, 64)
INCEPTION_C = InceptionSpec(192, 96, 208, 16, 48, 64)
STEM_WIDTHS = (64, 64, 192)
LOCAL_DIM = 256
GLOBAL_DIM = 512
NUM_CLASSES = 2

TAP_LABELS = ("1", "2", "3", "4", "5", "6", "7")


def scale_width(c: int, mult: float) -> int:
    return max(1, math.ceil(c * mult - 1e-9))


@dataclass(frozen=True)
class ArchVariant:
    variant: Variant = Variant.ILGNET
    width_multiplier: float = 1.0
    input_side: int = 224

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant) if isinstance(self.variant, str) else self.variant)
        if not 0 < self.width_multiplier <= 1:
            raise ValueError(f"width_multiplier must lie in (0, 1], got {self.width_multiplier}")
        if self.input_side < 1:
            raise ValueError("input_side must be positive")

    def describe(self) -> dict:
        return {"variant": self.variant.value, "width_multiplier": self.width_multiplier, "input_side": self.input_side}


def conv_bn_relu(name: str, cin: int, cout: int, k: int, stride: int, pad: int, rng, dtype) -> E.Sequential:
    spec = ConvSpec(cin, cout, k, stride, pad)
    return E.Sequential(name, [E.Conv2d(name, spec, rng, dtype), E.BatchNorm2d(f"{name}.bn", cout, dtype), E.ReLU()])


def build_stem(width_multiplier: float = 1.0, rng=0, dtype=E.DEFAULT_DTYPE) -> E.Sequential:
    """Pre-treatment layers: 7x7/2 conv, pool, 1x1 conv, 3x3 conv, pool."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    c1, c2, c3 = (scale_width(c, width_multiplier) for c in STEM_WIDTHS)
    return E.Sequential(
        "stem",
        [
            conv_bn_relu("stem.conv1", 3, c1, 7, 2, 3, rng, dtype),
            E.MaxPool2d("stem.pool1", 3, 2, ceil_mode=True),
            conv_bn_relu("stem.conv2", c1, c2, 1, 1, 0, rng, dtype),
            conv_bn_relu("stem.conv3", c2, c3, 3, 1, 1, rng, dtype),
            E.MaxPool2d("stem.pool2", 3, 2, ceil_mode=True),
        ],
    )


class Inception(Layer):
    """Four parallel branches concatenated along channels; spatial size kept."""

    param_depth = 2

    def __init__(self, name: str, spec: InceptionSpec, in_channels: int, rng, dtype=E.DEFAULT_DTYPE):
        self.name = name
        self.spec = spec
        self.in_channels = in_channels
        self.out_channels = spec.out_channels
        s = spec
        self.branches = [
            E.Sequential(f"{name}.b1", [conv_bn_relu(f"{name}.1x1", in_channels, s.c1x1, 1, 1, 0, rng, dtype)]),
            E.Sequential(
                f"{name}.b2",
                [
                    conv_bn_relu(f"{name}.3x3_reduce", in_channels, s.c3x3_reduce, 1, 1, 0, rng, dtype),
                    conv_bn_relu(f"{name}.3x3", s.c3x3_reduce, s.c3x3, 3, 1, 1, rng, dtype),
                ],
            ),
            E.Sequential(
                f"{name}.b3",
                [
                    conv_bn_relu(f"{name}.5x5_reduce", in_channels, s.c5x5_reduce, 1, 1, 0, rng, dtype),
                    conv_bn_relu(f"{name}.5x5", s.c5x5_reduce, s.c5x5, 5, 1, 2, rng, dtype),
                ],
            ),
            E.Sequential(
                f"{name}.b4",
                [
                    E.MaxPool2d(f"{name}.pool", 3, 1, pad=1, ceil_mode=False),
                    conv_bn_relu(f"{name}.pool_proj", in_channels, s.pool_proj, 1, 1, 0, rng, dtype),
                ],
            ),
        ]
        self._sizes = None

    def parameters(self):
        return [p for b in self.branches for p in b.parameters()]

    def forward(self, x, train=False):
        if x.shape[1] != self.in_channels:
            raise E.ShapeError(f"{self.name}: expected {self.in_channels} input channels, got {x.shape[1]}")
        outs = [b.forward(x, train) for b in self.branches]
        y, cache = E.concat_forward(outs, axis=1)
        self._sizes = cache if train else None
        return y

    def backward(self, dy):
        parts = E.concat_backward(dy, self._sizes)
        dx = None
        for b, d in zip(self.branches, parts):
            g = b.backward(d)
            dx = g if dx is None else dx + g
        return dx


def build_inception(name: str, spec: InceptionSpec, in_channels: int, rng=0, dtype=E.DEFAULT_DTYPE) -> Inception:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return Inception(name, spec, in_channels, rng, dtype)


class PlainStage(E.Sequential):
    """Single 3x3 conv stage standing in for an inception module."""

    param_depth = 1

    def __init__(self, name, in_channels, out_channels, rng, dtype):
        super().__init__(name, [conv_bn_relu(f"{name}.conv", in_channels, out_channels, 3, 1, 1, rng, dtype)])
        self.in_channels, self.out_channels = in_channels, out_channels


@dataclass
class LayerEntry:
    name: str
    kind: str
    counts_as: str  # "parameter", "pooling" or "uncounted"
    weight: int = 1
    note: str = ""


@dataclass
class LayerCountReport:
    parameter_layers: int
    pooling_layers: int
    listing: list[LayerEntry] = field(default_factory=list)
    convention: str = (
        "inception counts its conv depth (2); batchnorm not counted; "
        "feature-tap average pools on local taps not counted"
    )


class TapUnavailable(KeyError):
    pass


class NetworkGraph:
    """An assembled variant with its parameter registry.

    ``forward`` returns ``(logits, taps)``; in train mode it also records what
    ``backward`` needs. Inference passes keep no state on the layers, so a
    network used only for inference can serve concurrent callers.
    """

    def __init__(self, arch: ArchVariant, seed: int = 0, dtype=E.DEFAULT_DTYPE):
        self.arch = arch
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.channel_means = (0.0, 0.0, 0.0)
        rng = np.random.default_rng(seed)
        w = arch.width_multiplier
        v = arch.variant

        self.stem = build_stem(w, rng, dtype)
        stem_out = scale_width(STEM_WIDTHS[2], w)
        specs = [s.scaled(w) for s in (INCEPTION_A, INCEPTION_B, INCEPTION_C)]
        stages = []
        cin = stem_out
        for name, spec in zip(("inc_a", "inc_b", "inc_c"), specs):
            if v is Variant.WITHOUT_INC:
                stages.append(PlainStage(name, cin, spec.out_channels, rng, dtype))
            else:
                stages.append(Inception(name, spec, cin, rng, dtype))
            cin = spec.out_channels
        self.inc_a, self.inc_b, self.inc_c = stages
        self.pool3 = E.MaxPool2d("pool3", 3, 2, ceil_mode=True)
        self.gap_c = E.GlobalAvgPool("gap_global")

        self.local_dim = scale_width(LOCAL_DIM, w)
        self.global_dim = scale_width(GLOBAL_DIM, w)
        if v is Variant.THIRD_GOOGLENET:
            self.has_local = False
            self.proj_global = None
            self.feature_dim = self.inc_c.out_channels
        else:
            self.has_local = True
            self.gap_a = E.GlobalAvgPool("gap_local1")
            self.gap_b = E.GlobalAvgPool("gap_local2")
            self.proj_local1 = E.Sequential(
                "proj_local1", [E.Linear("proj_local1", self.inc_a.out_channels, self.local_dim, rng, dtype), E.ReLU()]
            )
            self.proj_local2 = E.Sequential(
                "proj_local2", [E.Linear("proj_local2", self.inc_b.out_channels, self.local_dim, rng, dtype), E.ReLU()]
            )
            self.proj_global = E.Sequential(
                "proj_global", [E.Linear("proj_global", self.inc_c.out_channels, self.global_dim, rng, dtype), E.ReLU()]
            )
            self.feature_dim = 2 * self.local_dim + self.global_dim
        self.output = E.Linear("output", self.feature_dim, NUM_CLASSES, rng, dtype)
        self._concat_cache = None

    # -- registry ---------------------------------------------------------

    def modules(self) -> list[Layer]:
        mods = [self.stem, self.inc_a, self.inc_b, self.inc_c]
        if self.has_local:
            mods += [self.proj_local1, self.proj_local2, self.proj_global]
        mods.append(self.output)
        return mods

    def parameters(self) -> list[Parameter]:
        return [p for m in self.modules() for p in m.parameters()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def batchnorms(self) -> list[E.BatchNorm2d]:
        found = []

        def walk(layer):
            if isinstance(layer, E.BatchNorm2d):
                found.append(layer)
            for child in getattr(layer, "layers", []) + getattr(layer, "branches", []):
                walk(child)

        for m in self.modules():
            walk(m)
        return found

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for bn in self.batchnorms():
            out.update(bn.buffers())
        return out

    # -- passes -----------------------------------------------------------

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=self.dtype)
        s = self.arch.input_side
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise E.ShapeError(f"expected input of shape (N, 3, {s}, {s}), got {x.shape}")
        taps = {}
        taps["1"] = h = self.stem.forward(x, train)
        taps["2"] = a = self.inc_a.forward(h, train)
        taps["3"] = b = self.inc_b.forward(a, train)
        c = self.inc_c.forward(self.pool3.forward(b, train), train)
        taps["4"] = c
        gc = self.gap_c.forward(c, train)
        if self.has_local:
            taps["5"] = f5 = self.proj_local1.forward(self.gap_a.forward(a, train), train)
            taps["6"] = f6 = self.proj_local2.forward(self.gap_b.forward(b, train), train)
            taps["7"] = f7 = self.proj_global.forward(gc, train)
            feat, cache = E.concat_forward([f5, f6, f7], axis=1)
            taps["concat"] = feat
            self._concat_cache = cache if train else None
        else:
            taps["7"] = feat = gc
        logits = self.output.forward(feat, train)
        return logits, taps

    def backward(self, dlogits):
        """Backpropagate from logits; gradients accumulate on parameters."""
        dfeat = self.output.backward(dlogits)
        if self.has_local:
            d5, d6, d7 = E.concat_backward(dfeat, self._concat_cache)
            dgc = self.proj_global.backward(d7)
            da_tap = self.gap_a.backward(self.proj_local1.backward(d5))
            db_tap = self.gap_b.backward(self.proj_local2.backward(d6))
        else:
            dgc = dfeat
            da_tap = db_tap = 0
        dc = self.gap_c.backward(dgc)
        db = self.pool3.backward(self.inc_c.backward(dc)) + db_tap
        da = self.inc_b.backward(db) + da_tap
        return self.stem.backward(self.inc_a.backward(da))

    # -- structure --------------------------------------------------------

    def stage_shapes(self, batch: int = 1) -> dict[str, tuple[int, ...]]:
        x = np.zeros((batch, 3, self.arch.input_side, self.arch.input_side), dtype=self.dtype)
        _, taps = self.forward(x)
        return {k: v.shape for k, v in taps.items()}

    def layer_listing(self) -> list[LayerEntry]:
        entries = [
            LayerEntry("stem.conv1", "conv7x7/2", "parameter"),
            LayerEntry("stem.pool1", "maxpool3x3/2", "pooling"),
            LayerEntry("stem.conv2", "conv1x1", "parameter"),
            LayerEntry("stem.conv3", "conv3x3", "parameter"),
            LayerEntry("stem.pool2", "maxpool3x3/2", "pooling"),
        ]
        for stage in (self.inc_a, self.inc_b, self.inc_c):
            kind = "inception" if isinstance(stage, Inception) else "conv3x3"
            entries.append(LayerEntry(stage.name, kind, "parameter", stage.param_depth))
            if stage is self.inc_b:
                entries.append(LayerEntry("pool3", "maxpool3x3/2", "pooling"))
        if self.has_local:
            entries += [
                LayerEntry("gap_local1", "avgpool", "uncounted", 0, "feature tap"),
                LayerEntry("gap_local2", "avgpool", "uncounted", 0, "feature tap"),
            ]
        entries.append(LayerEntry("gap_global", "avgpool", "pooling"))
        if self.has_local:
            entries += [
                LayerEntry("proj_local1", "linear", "parameter"),
                LayerEntry("proj_local2", "linear", "parameter"),
                LayerEntry("proj_global", "linear", "parameter"),
            ]
        entries.append(LayerEntry("output", "linear", "parameter"))
        return entries


def assemble(variant: ArchVariant | str = ArchVariant(), seed: int = 0, dtype=E.DEFAULT_DTYPE) -> NetworkGraph:
    if isinstance(variant, (str, Variant)):
        variant = ArchVariant(Variant.parse(variant) if isinstance(variant, str) else variant)
    return NetworkGraph(variant, seed, dtype)


def classify(net: NetworkGraph, batch) -> np.ndarray:
    """Inference-mode class probabilities; column 0 = bad, column 1 = good."""
    logits, _ = net.forward(batch, train=False)
    return E.softmax(logits.astype(np.float64)).astype(net.dtype)


def tap_features(net: NetworkGraph, image, taps=None) -> tuple[dict[str, np.ndarray], float]:
    """Activations at the requested tap labels (default: all seven plus
    ``"concat"``) for a single image, and the fraction of strictly positive
    concat entries."""
    image = np.asarray(image)
    if image.ndim != 4 or image.shape[0] != 1:
        raise E.ShapeError(f"tap_features expects a single image (1, 3, S, S), got {image.shape}")
    wanted = list(taps) if taps is not None else [*TAP_LABELS, "concat"]
    _, all_taps = net.forward(image, train=False)
    missing = [t for t in wanted if t not in all_taps]
    if missing:
        raise TapUnavailable(f"variant {net.arch.variant.value} has no tap(s) {', '.join(missing)}")
    out = {t: all_taps[t][0] for t in wanted}
    feat = all_taps.get("concat", all_taps["7"])
    density = float(np.count_nonzero(feat > 0)) / feat.size
    return out, density


def count_layers(net: NetworkGraph) -> LayerCountReport:
    listing = net.layer_listing()
    params = sum(e.weight for e in listing if e.counts_as == "parameter")
    pools = sum(e.weight for e in listing if e.counts_as == "pooling")
    return LayerCountReport(params, pools, listing)
