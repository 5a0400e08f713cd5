"""Baselines and neural models behind one prediction interface.

Every model maps an assembled input stack ``(N, C, h, w)`` to a change in
water depth ``(N, 1, h, w)``. Models whose horizon is one step are rolled
out autoregressively to reach longer horizons.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, conv2d, relu
from .features import Batch, FeatureRangeError, FeatureSpec, Sample

FAMILIES = ("no_change", "linear_extrap", "ar_1x1", "ar_5x5", "fcn", "autoencoder", "unet", "graph")
PARAMETRIC = ("ar_1x1", "ar_5x5", "fcn", "autoencoder", "unet", "graph")
DEFAULT_WIDTHS = {
    "fcn": (64, 64),
    "autoencoder": (32, 64, 128),
    "unet": (32, 64, 128),
    "graph": (32, 32),
}
EDGE_FEATURES = 8
# neighbour offsets (row, col) for the dD channel order left, right, down, up
NEIGHBOURS = ((0, -1), (0, 1), (-1, 0), (1, 0))


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: str
    T: int = 5
    H: int = 12
    widths: tuple[int, ...] = ()
    seed: int = 0
    zero_final: bool = False
    skips: bool = True
    label: str = ""

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ModelConfigError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        widths = tuple(int(w) for w in self.widths) or DEFAULT_WIDTHS.get(self.family, ())
        object.__setattr__(self, "widths", widths)
        if not self.label:
            object.__setattr__(self, "label", self.family)

    @property
    def features(self) -> FeatureSpec:
        return FeatureSpec(T=self.T, H=self.H)

    @property
    def trainable(self) -> bool:
        return self.family in PARAMETRIC

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", ()))
        return cls(**d)


@dataclass
class Prediction:
    delta: np.ndarray
    current: np.ndarray

    @property
    def depth(self) -> np.ndarray:
        return np.maximum(self.current + self.delta, 0.0)


class Model:
    """Base class: parameters, input normalisation and the forward contract."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.fspec = spec.features
        self.slices = self.fspec.slices()
        self.params: dict[str, Tensor] = {}
        self.input_mean = np.zeros(self.fspec.n_channels)
        self.input_std = np.ones(self.fspec.n_channels)
        self._rng = np.random.default_rng(spec.seed)

    # -- parameters ----------------------------------------------------------
    def _conv(self, name: str, out_ch: int, in_ch: int, k: int | tuple[int, int] = 1, bias: bool = True,
              zero: bool = False) -> None:
        kh, kw = (k, k) if isinstance(k, int) else k
        shape = (out_ch, in_ch, kh, kw)
        self.params[f"{name}.w"] = ad.zeros(shape) if zero else ad.kaiming_uniform(shape, self._rng)
        if bias:
            self.params[f"{name}.b"] = ad.zeros((out_ch,))

    def _apply(self, name: str, x: Tensor, padding=0) -> Tensor:
        return conv2d(x, self.params[f"{name}.w"], self.params.get(f"{name}.b"), padding)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out["_input_mean"] = self.input_mean
        out["_input_std"] = self.input_std
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ad.ShapeError(f"checkpoint lacks parameter {name}")
            if arrays[name].shape != p.shape:
                raise ad.ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)
        if "_input_mean" in arrays:
            self.input_mean = np.array(arrays["_input_mean"])
            self.input_std = np.array(arrays["_input_std"])

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def fit_normalizer(self, stacks: np.ndarray) -> None:
        """Per-channel mean and standard deviation of training inputs."""
        self.input_mean = stacks.mean(axis=(0, 2, 3))
        std = stacks.std(axis=(0, 2, 3))
        self.input_std = np.where(std > 1e-8, std, 1.0)

    def normalize(self, x: Tensor) -> Tensor:
        mean = self.input_mean[None, :, None, None]
        scale = (1.0 / self.input_std)[None, :, None, None]
        return ad.mul(ad.sub(x, mean), scale)

    # -- forward -------------------------------------------------------------
    def check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4 or x.shape[1] != self.fspec.n_channels:
            raise ad.ShapeError(
                f"{self.spec.family}: expected (N, {self.fspec.n_channels}, h, w) input, got {x.shape}"
            )

    def latest_depth(self, x: Tensor) -> Tensor:
        w = self.slices["W"]
        return ad.channels(x, slice(w.stop - 1, w.stop))

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x)
        return self._forward(x)

    def _forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class NoChange(Model):
    def _forward(self, x):
        n, _, h, w = x.shape
        return Tensor(np.zeros((n, 1, h, w)))


class LinearExtrap(Model):
    def __init__(self, spec):
        if spec.T < 2:
            raise ModelConfigError("linear extrapolation needs T >= 2")
        super().__init__(spec)

    def _forward(self, x):
        w = self.slices["W"]
        previous = ad.channels(x, slice(w.stop - 2, w.stop - 1))
        return ad.sub(self.latest_depth(x), previous)


class AutoRegressive(Model):
    """Single convolution over the T depth channels predicting the next depth.

    Starts from the identity map (weight 1 on the centre tap of the latest
    frame) so an untrained model reproduces the no-change baseline.
    """

    def __init__(self, spec, identity_init: bool = True):
        super().__init__(spec)
        self.k = 1 if spec.family == "ar_1x1" else 5
        self._conv("ar", 1, spec.T, self.k, zero=True)
        if identity_init:
            self.params["ar.w"].data[0, -1, self.k // 2, self.k // 2] = 1.0

    def _forward(self, x):
        depths = ad.channels(x, self.slices["W"])
        nxt = self._apply("ar", depths, padding=self.k // 2)
        return ad.sub(nxt, self.latest_depth(x))


class FCN(Model):
    """Three 5x5 convolutions with same-size zero padding."""

    def __init__(self, spec):
        super().__init__(spec)
        w1, w2 = spec.widths
        c = self.fspec.n_channels
        self._conv("c1", w1, c, 5)
        self._conv("c2", w2, w1, 5)
        self._conv("c3", 1, w2, 5, zero=spec.zero_final)

    def _forward(self, x):
        h = relu(self._apply("c1", self.normalize(x), 2))
        h = relu(self._apply("c2", h, 2))
        return self._apply("c3", h, 2)


def _check_divisible(x: Tensor, depth: int, family: str) -> None:
    h, w = x.shape[-2:]
    if h % 2**depth or w % 2**depth:
        raise ad.ShapeError(f"{family}: spatial dims {h}x{w} not divisible by {2**depth}")


class AutoEncoder(Model):
    """Conv+pool encoder, transposed-conv decoder, no skip connections."""

    def __init__(self, spec):
        super().__init__(spec)
        widths = spec.widths
        c = self.fspec.n_channels
        for i, w in enumerate(widths):
            self._conv(f"enc{i}", w, c if i == 0 else widths[i - 1], 3)
        dec_widths = list(reversed(widths[:-1])) + [widths[0]]
        prev = widths[-1]
        for i, w in enumerate(dec_widths):
            self._conv(f"dec{i}", w, prev, 2)
            prev = w
        self._conv("head", 1, prev, 1, zero=spec.zero_final)

    @property
    def depth(self) -> int:
        return len(self.spec.widths)

    def _forward(self, x):
        _check_divisible(x, self.depth, "autoencoder")
        h = self.normalize(x)
        for i in range(self.depth):
            h = ad.pool2x2(relu(self._apply(f"enc{i}", h, 1)))
        for i in range(self.depth):
            h = relu(ad.transposed_conv2x2(h, self.params[f"dec{i}.w"], self.params[f"dec{i}.b"]))
        return self._apply("head", h)

    def bottleneck_shape(self, h: int, w: int) -> tuple[int, int]:
        return h // 2**self.depth, w // 2**self.depth


class UNet(Model):
    """Encoder-decoder with concatenated skips and bilinear upsampling.

    With ``spec.skips`` false the skip tensors are replaced by zeros, which
    keeps parameter shapes identical for ablations.
    """

    def __init__(self, spec):
        super().__init__(spec)
        widths = spec.widths
        c = self.fspec.n_channels
        for i, w in enumerate(widths):
            self._conv(f"enc{i}", w, c if i == 0 else widths[i - 1], 3)
        self._conv("mid", widths[-1], widths[-1], 3)
        prev = widths[-1]
        for i in reversed(range(len(widths))):
            out = widths[i - 1] if i > 0 else widths[0]
            self._conv(f"dec{i}", out, prev + widths[i], 3)
            prev = out
        self._conv("head", 1, prev, 1, zero=spec.zero_final)

    def _forward(self, x):
        depth = len(self.spec.widths)
        _check_divisible(x, depth, "unet")
        h = self.normalize(x)
        skips = []
        for i in range(depth):
            h = relu(self._apply(f"enc{i}", h, 1))
            skips.append(h)
            h = ad.pool2x2(h)
        h = relu(self._apply("mid", h, 1))
        for i in reversed(range(depth)):
            h = ad.upsample_bilinear2x(h)
            skip = skips[i] if self.spec.skips else Tensor(np.zeros(skips[i].shape))
            h = relu(self._apply(f"dec{i}", ad.concat_channels([h, skip]), 1))
        return self._apply("head", h)


class GraphModel(Model):
    """Grid-graph flow model: every pixel is a node with four edges.

    The edge block maps each edge's elevation difference to a few "water
    acceleration" features. The node block combines them with the node's
    inputs and the water on both ends of the edge into one outgoing flow per
    edge. Water retained on a node is its current water minus its outgoing
    flows plus a learned source term (rain, infiltration); new water is the
    retained water plus the four flows arriving from the neighbours. Flows
    across the raster edge are zero. Both blocks are 1x1 convolutions with
    weights shared between the four directions, and the output heads start
    near zero so an untrained model is close to the no-change baseline.
    """

    HEAD_SCALE = 0.01

    def __init__(self, spec):
        super().__init__(spec)
        h0, h1 = spec.widths
        c = self.fspec.n_channels
        if self.slices["dD"].stop - self.slices["dD"].start != 4:
            raise ModelConfigError("graph model needs the four dD channels")
        self._conv("edge1", h0, 1)
        self._conv("edge2", h1, h0)
        self._conv("edge3", EDGE_FEATURES, h1)
        self._conv("node1", h0, c)
        self._conv("node1_edge", h0, EDGE_FEATURES + 2, bias=False)
        self._conv("node2", h1, h0)
        self._conv("flow", 1, h1, zero=spec.zero_final)
        self._conv("keep1", h0, c)
        self._conv("keep2", h1, h0)
        self._conv("keep", 1, h1, zero=spec.zero_final)
        for head in ("flow.w", "keep.w"):
            self.params[head].data *= self.HEAD_SCALE

    def edge_block(self, ddem_k: Tensor) -> Tensor:
        e = relu(self._apply("edge1", ddem_k))
        e = relu(self._apply("edge2", e))
        return self._apply("edge3", e)

    def outgoing_flows(self, x: Tensor) -> list[Tensor]:
        """One (N,1,h,w) flow per direction, zero where the edge leaves the raster."""
        xn = self.normalize(x)
        ddem = ad.channels(x, self.slices["dD"])
        water = self.latest_depth(x)
        node = self._apply("node1", xn)
        ones = np.ones((1, 1) + x.shape[2:])
        flows = []
        for k, (dr, dc) in enumerate(NEIGHBOURS):
            edge = self.edge_block(ad.channels(ddem, slice(k, k + 1)))
            pair = ad.concat_channels([edge, water, ad.shift(water, dr, dc)])
            h = relu(ad.add(node, self._apply("node1_edge", pair)))
            h = relu(self._apply("node2", h))
            has_neighbour = ad.shift(Tensor(ones), dr, dc).data
            flows.append(ad.mul(self._apply("flow", h), has_neighbour))
        return flows

    def retained(self, x: Tensor, flows: Sequence[Tensor]) -> Tensor:
        h = relu(self._apply("keep1", self.normalize(x)))
        h = relu(self._apply("keep2", h))
        kept = ad.add(self.latest_depth(x), self._apply("keep", h))
        for flow in flows:
            kept = ad.sub(kept, flow)
        return kept

    def _forward(self, x):
        flows = self.outgoing_flows(x)
        new = self.retained(x, flows)
        for k, (dr, dc) in enumerate(NEIGHBOURS):
            # neighbour k sends towards this node along the opposite direction
            new = ad.add(new, ad.shift(flows[k ^ 1], dr, dc))
        return ad.sub(new, self.latest_depth(x))


_CLASSES = {
    "no_change": NoChange,
    "linear_extrap": LinearExtrap,
    "ar_1x1": AutoRegressive,
    "ar_5x5": AutoRegressive,
    "fcn": FCN,
    "autoencoder": AutoEncoder,
    "unet": UNet,
    "graph": GraphModel,
}


def build_model(spec: ModelSpec) -> Model:
    return _CLASSES[spec.family](spec)


def one_step(spec: ModelSpec) -> bool:
    return spec.H == 1


# --------------------------------------------------------------------------- #
# Assembly in tensor form and rollout
# --------------------------------------------------------------------------- #

def feature_tensor(static: np.ndarray, rain: np.ndarray, depths: Sequence[Tensor], spec: FeatureSpec) -> Tensor:
    """Differentiable counterpart of :func:`features.build_stack`.

    ``depths`` are (N, 1, h, w) tensors, oldest first, so predicted depths can
    be fed back with gradients attached.
    """
    n, _, h, w = static.shape
    parts: list[Tensor] = [Tensor(static[:, :1])]
    if spec.include_delta_dem:
        parts.append(Tensor(static[:, 1:5]))
    parts.append(Tensor(np.broadcast_to(rain[:, :, None, None], (n, rain.shape[1], h, w))))
    parts.extend(depths)
    if spec.include_delta_wd:
        parts.extend(ad.sub(depths[i + 1], depths[i]) for i in range(len(depths) - 1))
    return ad.concat_channels(parts)


def rollout_tensor(
    model: Model,
    static: np.ndarray,
    rain: np.ndarray,
    depths: Sequence[Tensor],
    steps: int,
    clamp_last: bool = True,
) -> list[Tensor]:
    """Chain one-step predictions, feeding each clamped output back in.

    The newest prediction replaces the oldest frame of the window. Returns
    the predicted depth after every step. With ``clamp_last`` false the final
    step is returned unclamped, so a one-step chain equals the plain forward.
    """
    T = model.fspec.T
    if model.fspec.H != 1:
        raise ModelConfigError(f"rollout needs a one-step model, got H={model.fspec.H}")
    if rain.shape[1] < steps + T - 1:
        raise FeatureRangeError(f"rollout of {steps} steps needs {steps + T - 1} rain steps, got {rain.shape[1]}")
    window = list(depths)[-T:]
    out = []
    for k in range(steps):
        x = feature_tensor(static, rain[:, k:k + T], window, model.fspec)
        raw = ad.add(window[-1], model(x))
        nxt = relu(raw)
        out.append(raw if k == steps - 1 and not clamp_last else nxt)
        window = window[1:] + [nxt]
    return out


def predict_arrays(model: Model, static: np.ndarray, rain: np.ndarray, depths: np.ndarray, horizon: int) -> np.ndarray:
    """Delta over ``horizon`` steps for a batch, without recording a graph."""
    with ad.no_grad():
        if model.fspec.H == horizon:
            frames = [Tensor(depths[:, i:i + 1]) for i in range(depths.shape[1])]
            x = feature_tensor(static, rain, frames, model.fspec)
            return model(x).data[:, 0]
        if model.fspec.H == 1:
            frames = [Tensor(depths[:, i:i + 1]) for i in range(depths.shape[1])]
            final = rollout_tensor(model, static, rain, frames, horizon)[-1]
            return final.data[:, 0] - depths[:, -1]
    raise ModelConfigError(f"model horizon {model.fspec.H} cannot produce horizon {horizon}")


def predict(model: Model, sample: Sample) -> Prediction:
    """Prediction for one sample at the sample's own horizon."""
    batch = Batch.from_samples([sample])
    delta = predict_arrays(model, batch.static, batch.rain, batch.depths, sample.spec.H)[0]
    return Prediction(delta=delta, current=sample.current_depth)


def predict_no_change(sample: Sample) -> Prediction:
    return Prediction(delta=np.zeros(sample.shape), current=sample.current_depth)


def predict_linear_extrap(sample: Sample) -> Prediction:
    """One-step extrapolation ``W(t) - W(t-1)``."""
    if sample.spec.T < 2:
        raise ModelConfigError("linear extrapolation needs T >= 2")
    return Prediction(delta=sample.depths[-1] - sample.depths[-2], current=sample.current_depth)


def _predict_family(family: str, sample: Sample, arrays: dict[str, np.ndarray], **spec_kw) -> Prediction:
    model = build_model(ModelSpec(family=family, T=sample.spec.T, H=spec_kw.pop("H", sample.spec.H), **spec_kw))
    model.load_arrays(arrays)
    return predict(model, sample)


def predict_ar(sample: Sample, arrays: dict[str, np.ndarray], kernel: str = "1x1") -> Prediction:
    """Autoregressive baseline; ``arrays`` must hold an ``ar.w`` kernel of matching size."""
    if kernel not in ("1x1", "5x5"):
        raise ModelConfigError(f"kernel must be '1x1' or '5x5', got {kernel!r}")
    k = int(kernel[0])
    w = arrays.get("ar.w")
    if w is None or w.shape[-2:] != (k, k):
        raise ad.ShapeError(f"AR {kernel} needs an ar.w kernel of size {k}x{k}")
    return _predict_family(f"ar_{kernel}", sample, arrays, H=1)


def predict_fcn(sample: Sample, arrays: dict[str, np.ndarray], widths: Sequence[int] = DEFAULT_WIDTHS["fcn"]) -> Prediction:
    return _predict_family("fcn", sample, arrays, widths=tuple(widths))


def predict_autoencoder(sample: Sample, arrays: dict[str, np.ndarray],
                        widths: Sequence[int] = DEFAULT_WIDTHS["autoencoder"]) -> Prediction:
    return _predict_family("autoencoder", sample, arrays, widths=tuple(widths))


def predict_unet(sample: Sample, arrays: dict[str, np.ndarray], widths: Sequence[int] = DEFAULT_WIDTHS["unet"]) -> Prediction:
    return _predict_family("unet", sample, arrays, widths=tuple(widths))


def predict_graph(sample: Sample, arrays: dict[str, np.ndarray], widths: Sequence[int] = DEFAULT_WIDTHS["graph"]) -> Prediction:
    return _predict_family("graph", sample, arrays, widths=tuple(widths))
