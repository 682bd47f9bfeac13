"""Network specifications, builders, and the forward/backward engine.

A :class:`NetworkSpec` is a plain value (an ordered tuple of
:class:`LayerSpec`). :class:`Network` instantiates parameters for a spec and
runs hand-written forward and backward passes over it.

Layer kinds:

=========  ==========================================================
conv       real convolution (no bias; followed by BN)
bconv      binary convolution, latent weights, consumes a BitTensor
dense      real fully connected layer with bias
bdense     binary-weight fully connected layer
bn         batch normalization (per channel or per feature)
relu       rectifier
maxpool    non-overlapping max pooling
avgpool    non-overlapping average pooling
binact     binary activation; ``fault`` marks a write-channel site
flatten    (N, C, H, W) -> (N, C*H*W)
=========  ==========================================================
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_core as tc
from .binarization import BinarizeMode, BitTensor, binarize, clip_latent, ste_backward, xnor_conv2d, xnor_dense
from .fault_injection import FaultSchedule, apply_write_channel

KINDS = ("conv", "bconv", "dense", "bdense", "bn", "relu", "maxpool", "avgpool", "binact", "flatten")


class SpecError(ValueError):
    """Invalid network specification."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    out: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: int = 0
    window: int | None = None
    fault: bool = False

    @property
    def binarized(self) -> bool:
        return self.kind in ("bconv", "bdense", "binact")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple
    num_classes: int
    layers: tuple
    binarize_mode: str = BinarizeMode.DETERMINISTIC.value
    weight_scaling: bool = False

    @property
    def fault_sites(self) -> tuple:
        return tuple(l.name for l in self.layers if l.fault)

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def to_json(self) -> str:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        d = json.loads(text)
        d["input_shape"] = tuple(d["input_shape"])
        d["layers"] = tuple(LayerSpec(**l) for l in d["layers"])
        return cls(**d)

    def shapes(self) -> list:
        """Validate the spec and return the per-sample output shape of every layer."""
        return _infer_shapes(self)


def _infer_shapes(spec: NetworkSpec) -> list:
    if spec.num_classes < 2:
        raise SpecError("num_classes must be >= 2")
    BinarizeMode(spec.binarize_mode)
    names = [l.name for l in spec.layers]
    if len(set(names)) != len(names):
        raise SpecError("layer names must be unique")
    shape = tuple(spec.input_shape)
    binary = False
    out = []
    for l in spec.layers:
        if l.kind not in KINDS:
            raise SpecError(f"{l.name}: unknown layer kind {l.kind!r}")
        if l.fault and l.kind != "binact":
            raise SpecError(f"{l.name}: only binary activations can be fault-injected")
        if binary and l.kind not in ("bconv", "bdense"):
            raise SpecError(f"{l.name}: binary activations must feed a binary layer, not {l.kind!r}")
        if l.kind == "bconv" and not binary:
            raise SpecError(f"{l.name}: binary convolution requires a binary activation input")
        if l.kind in ("conv", "bconv"):
            if len(shape) != 3:
                raise SpecError(f"{l.name}: convolution needs (C, H, W) input, got {shape}")
            if l.kind == "bconv" and l.padding:
                raise SpecError(f"{l.name}: binary convolutions are pad-free")
            c, h, w = shape
            ho = tc.conv_output_size(h, l.kernel, l.stride, l.padding)
            wo = tc.conv_output_size(w, l.kernel, l.stride, l.padding)
            if ho < 1 or wo < 1:
                raise SpecError(f"{l.name}: kernel {l.kernel} too large for input {shape}")
            shape = (l.out, ho, wo)
        elif l.kind in ("dense", "bdense"):
            if len(shape) != 1:
                raise SpecError(f"{l.name}: dense layer needs flat input, got {shape}")
            shape = (l.out,)
        elif l.kind in ("maxpool", "avgpool"):
            c, h, w = shape
            if h % l.window or w % l.window:
                raise SpecError(f"{l.name}: extents {(h, w)} not divisible by window {l.window}")
            shape = (c, h // l.window, w // l.window)
        elif l.kind == "flatten":
            shape = (int(np.prod(shape)),)
        binary = l.kind == "binact"
        out.append(shape)
    if binary:
        raise SpecError("network cannot end with a binary activation")
    if shape != (spec.num_classes,):
        raise SpecError(f"network output shape {shape} does not match num_classes={spec.num_classes}")
    return out


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_lenet4_binary(num_classes: int = 10, *, input_shape=(1, 28, 28), conv1: int = 32, conv2: int = 64,
                        kernel: int = 5, hidden: int = 512, binary_fc_input: bool = True,
                        binarize_mode: str = BinarizeMode.DETERMINISTIC.value,
                        weight_scaling: bool = False) -> NetworkSpec:
    """Binarized LeNet-4.

    (I) real conv + BN + ReLU + max pool; (II) BN -> binary activation ->
    binary conv + max pool; (III) binary fully connected layer (its input is
    binarized when ``binary_fc_input``); (IV) BN -> dense classifier -> softmax.
    """
    if num_classes < 2:
        raise SpecError("num_classes must be >= 2")
    L = LayerSpec
    layers = [
        L("conv", "conv1", out=conv1, kernel=kernel),
        L("bn", "bn1"),
        L("relu", "relu1"),
        L("maxpool", "pool1", window=2),
        L("bn", "bn2"),
        L("binact", "act2", fault=True),
        L("bconv", "bconv2", out=conv2, kernel=kernel),
        L("maxpool", "pool2", window=2),
        L("flatten", "flatten"),
        L("bn", "bn3"),
    ]
    if binary_fc_input:
        layers.append(L("binact", "act3", fault=True))
    layers += [
        L("bdense", "fc3", out=hidden),
        L("bn", "bn4"),
        L("dense", "fc4", out=num_classes),
    ]
    spec = NetworkSpec("lenet4", tuple(input_shape), num_classes, tuple(layers), binarize_mode, weight_scaling)
    spec.shapes()
    return spec


NIN_WIDTHS = (192, 160, 96, 192, 192, 192, 192, 192)


def build_nin_binary(num_classes: int = 10, *, input_shape=(3, 32, 32), widths=NIN_WIDTHS,
                     binarize_mode: str = BinarizeMode.DETERMINISTIC.value,
                     weight_scaling: bool = False) -> NetworkSpec:
    """Binarized Network-in-Network for 32x32 inputs.

    Three stages of three convolutions (5-1-1, 5-1-1, 3-1-1 kernels, pad-free)
    followed by max, average and global average pooling. The first and the
    last convolution stay real; the seven in between are binary and each is
    preceded by BN and a fault-injected binary activation. ``widths`` gives the
    first eight conv widths; the ninth has ``num_classes`` channels.
    """
    if num_classes < 2:
        raise SpecError("num_classes must be >= 2")
    if len(widths) != 8:
        raise SpecError("widths must list 8 channel counts")
    kernels = (5, 1, 1, 5, 1, 1, 3, 1, 1)
    pools = {2: ("maxpool", 2), 5: ("avgpool", 2)}
    L = LayerSpec
    layers = [L("conv", "conv1", out=widths[0], kernel=5), L("bn", "bn1"), L("relu", "relu1")]
    for i in range(1, 9):
        idx = i + 1
        layers.append(L("bn", f"bn{idx}"))
        if i < 8:
            layers.append(L("binact", f"act{idx}", fault=True))
            layers.append(L("bconv", f"bconv{idx}", out=widths[i], kernel=kernels[i]))
        else:
            layers.append(L("conv", f"conv{idx}", out=num_classes, kernel=kernels[i]))
        if i in pools:
            kind, win = pools[i]
            layers.append(L(kind, f"pool{len([p for p in pools if p <= i])}", window=win))
    spec0 = NetworkSpec("nin", tuple(input_shape), num_classes, tuple(layers))
    # global average pool over whatever spatial extent the last stage leaves
    h = _infer_shapes_prefix(spec0)[-1][1]
    layers += [L("avgpool", "pool3", window=h), L("flatten", "flatten")]
    spec = NetworkSpec("nin", tuple(input_shape), num_classes, tuple(layers), binarize_mode, weight_scaling)
    spec.shapes()
    return spec


def _infer_shapes_prefix(spec: NetworkSpec) -> list:
    """Shapes of a spec that does not yet end in the classifier output."""
    shape = tuple(spec.input_shape)
    out = []
    for l in spec.layers:
        if l.kind in ("conv", "bconv"):
            shape = (l.out, tc.conv_output_size(shape[1], l.kernel, l.stride, l.padding),
                     tc.conv_output_size(shape[2], l.kernel, l.stride, l.padding))
        elif l.kind in ("maxpool", "avgpool"):
            shape = (shape[0], shape[1] // l.window, shape[2] // l.window)
        out.append(shape)
    return out


# ---------------------------------------------------------------------------
# network engine
# ---------------------------------------------------------------------------

def _fan(shape) -> tuple[int, int]:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


@dataclass
class Network:
    """Parameters, BN state and forward/backward passes for a :class:`NetworkSpec`.

    ``params`` maps ``"<layer>.<w|b|gamma|beta>"`` to float32 arrays that the
    optimizer updates in place. Binary layers keep real latent weights and
    binarize them with ``sign`` on every forward pass.
    """

    spec: NetworkSpec
    params: dict
    bn: dict
    channel_calls: int = 0
    _caches: list = field(default_factory=list, repr=False)

    @classmethod
    def init(cls, spec: NetworkSpec, rng: np.random.Generator) -> "Network":
        shapes = spec.shapes()
        params, bn = {}, {}
        in_shape = tuple(spec.input_shape)
        for l, out_shape in zip(spec.layers, shapes):
            if l.kind in ("conv", "bconv"):
                wshape = (l.out, in_shape[0], l.kernel, l.kernel)
            elif l.kind in ("dense", "bdense"):
                wshape = (l.out, in_shape[0])
            else:
                wshape = None
            if l.kind == "conv":
                fan_in, _ = _fan(wshape)
                params[f"{l.name}.w"] = (rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in)).astype(tc.DTYPE)
            elif l.kind in ("bconv", "bdense", "dense"):
                fan_in, fan_out = _fan(wshape)
                a = np.sqrt(6.0 / (fan_in + fan_out))
                params[f"{l.name}.w"] = rng.uniform(-a, a, wshape).astype(tc.DTYPE)
                if l.kind == "dense":
                    params[f"{l.name}.b"] = np.zeros(l.out, tc.DTYPE)
            elif l.kind == "bn":
                state = tc.BatchNormState.create(in_shape[0])
                params[f"{l.name}.gamma"] = state.gamma
                params[f"{l.name}.beta"] = state.beta
                bn[l.name] = state
            in_shape = out_shape
        return cls(spec, params, bn)

    # -- forward -----------------------------------------------------------

    def forward(self, x: np.ndarray, *, train: bool = False, schedule: FaultSchedule | None = None,
                rng: np.random.Generator | None = None, batch_stats: bool | None = None,
                kernel: str = "float") -> np.ndarray:
        """Logits for a batch.

        ``train=True`` records caches for :meth:`backward`, passes fault-flagged
        activations through ``schedule``'s write channel (drawing from ``rng``)
        and, unless ``batch_stats`` says otherwise, normalizes with batch
        statistics. ``train=False`` never touches the channel. ``kernel="xnor"``
        evaluates binary layers with the bit-packed kernels (inference only).
        """
        if batch_stats is None:
            batch_stats = train
        if train and kernel != "float":
            raise ValueError("training uses the float kernel path")
        mode = BinarizeMode(self.spec.binarize_mode) if train else BinarizeMode.DETERMINISTIC
        if (train and schedule is not None and not schedule.channel.is_identity) or mode is BinarizeMode.STOCHASTIC:
            if rng is None:
                raise ValueError("an rng is required for the write channel or stochastic binarization")
        caches = []
        h = np.asarray(x, dtype=tc.DTYPE)
        p = self.params
        for l in self.spec.layers:
            k = l.kind
            if k == "conv":
                h, c = tc.conv2d_forward(h, p[f"{l.name}.w"], l.stride, l.padding)
            elif k == "bconv":
                h, c = self._bconv_forward(l, h, kernel)
            elif k == "dense":
                c = h
                h = tc.dense(h, p[f"{l.name}.w"], p[f"{l.name}.b"])
            elif k == "bdense":
                h, c = self._bdense_forward(l, h, kernel)
            elif k == "bn":
                h, c = tc.batchnorm_forward(h, self.bn[l.name], batch_stats)
            elif k == "relu":
                c = h
                h = tc.relu(h)
            elif k == "maxpool":
                h, c = tc.maxpool2_forward(h, l.window)
            elif k == "avgpool":
                h, c = tc.avgpool_forward(h, l.window)
            elif k == "flatten":
                c = h.shape
                h = h.reshape(h.shape[0], -1)
            elif k == "binact":
                c = h
                bits = binarize(h, mode, rng)
                if train and schedule is not None and l.fault and schedule.applies_to(l.name):
                    bits = apply_write_channel(bits, schedule.channel, rng)
                    self.channel_calls += 1
                h = bits
            caches.append(c)
        self._caches = caches if train else []
        return h

    def _binary_weights(self, l: LayerSpec):
        w = self.params[f"{l.name}.w"]
        wb = np.where(w >= 0, w.dtype.type(1), w.dtype.type(-1))
        scale = None
        if self.spec.weight_scaling:
            scale = np.abs(w).reshape(w.shape[0], -1).mean(axis=1)
        return wb, scale

    def _bconv_forward(self, l, act, kernel):
        if not isinstance(act, BitTensor):
            raise TypeError(f"{l.name}: binary convolution requires a BitTensor input")
        wb, scale = self._binary_weights(l)
        if kernel == "xnor":
            out = xnor_conv2d(act, BitTensor.from_bits(wb > 0), l.stride).astype(wb.dtype)
            cache = None
        else:
            out, cache = tc.conv2d_forward(act.unpack(wb.dtype), wb, l.stride, 0)
        if scale is not None:
            out *= scale.reshape(1, -1, 1, 1)
        return out, (cache, scale)

    def _bdense_forward(self, l, act, kernel):
        wb, scale = self._binary_weights(l)
        if isinstance(act, BitTensor):
            if kernel == "xnor":
                out = xnor_dense(act, BitTensor.from_bits(wb > 0)).astype(wb.dtype)
                x = None
            else:
                x = act.unpack(wb.dtype)
                out = tc.dense(x, wb)
        else:
            x = act
            out = tc.dense(x, wb)
        if scale is not None:
            out *= scale
        return out, (x, wb, scale)

    # -- backward ----------------------------------------------------------

    def backward(self, dlogits: np.ndarray) -> dict:
        """Gradients of every parameter given d(loss)/d(logits) from the last train forward."""
        if not self._caches:
            raise RuntimeError("backward requires a preceding forward(train=True)")
        grads = {}
        g = dlogits.astype(tc.DTYPE, copy=False)
        layers = self.spec.layers
        for i in range(len(layers) - 1, -1, -1):
            l, c = layers[i], self._caches[i]
            k = l.kind
            first = i == 0
            if k == "conv":
                g, grads[f"{l.name}.w"] = tc.conv2d_backward(g, c, need_dx=not first)
            elif k == "bconv":
                cache, scale = c
                if scale is not None:
                    g = g * scale.reshape(1, -1, 1, 1)
                g, dwb = tc.conv2d_backward(g, cache)
                grads[f"{l.name}.w"] = ste_backward(dwb, self.params[f"{l.name}.w"])
            elif k == "dense":
                dx, dw, db = tc.dense_backward(g, c, self.params[f"{l.name}.w"])
                grads[f"{l.name}.w"], grads[f"{l.name}.b"] = dw, db
                g = dx
            elif k == "bdense":
                x, wb, scale = c
                if scale is not None:
                    g = g * scale
                dx, dwb, _ = tc.dense_backward(g, x, wb)
                grads[f"{l.name}.w"] = ste_backward(dwb, self.params[f"{l.name}.w"])
                g = dx
            elif k == "bn":
                g, grads[f"{l.name}.gamma"], grads[f"{l.name}.beta"] = tc.batchnorm_backward(g, c)
            elif k == "relu":
                g = tc.relu_backward(g, c)
            elif k == "maxpool":
                g = tc.maxpool2_backward(g, c)
            elif k == "avgpool":
                g = tc.avgpool_backward(g, c)
            elif k == "flatten":
                g = g.reshape(c)
            elif k == "binact":
                g = ste_backward(g, c)
            if first:
                break
        self._caches = []
        return grads

    def clip_latent(self) -> None:
        """Clamp binary layers' latent weights to [-1, 1]."""
        for l in self.spec.layers:
            if l.kind in ("bconv", "bdense"):
                clip_latent(self.params[f"{l.name}.w"])

    def predict(self, x: np.ndarray, batch_size: int = 500, kernel: str = "float") -> np.ndarray:
        """Error-free inference in chunks; returns logits."""
        out = [self.forward(x[s:s + batch_size], kernel=kernel) for s in range(0, len(x), batch_size)]
        return np.concatenate(out)
