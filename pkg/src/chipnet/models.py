"""Small CNNs whose post-batchnorm activations are scaled by channel masks.

A network is a topologically ordered list of nodes. A :class:`ConvUnit` is
conv -> batchnorm -> mask -> optional ReLU reading one source node; an
:class:`AddNode` sums several sources (residual join). The classifier head
global-average-pools the output node and applies a linear layer.

:func:`materialize` turns a hard mask into a slim network with the dropped
channels physically removed. Residual joins in the slim network keep the
union of their contributors' surviving channels and scatter each contributor
into it, so the slim forward equals the hard-masked parent forward.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad
from .budgets import INPUT, LayerSpec, NetworkShape
from .ndgrad import RunningStats, Tensor
from .projections import ContinuationState, MaskSet, heaviside, logistic

PRESETS = ("tiny-cnn", "tiny-resnet", "mlp-bn")


class ConfigError(ValueError):
    pass


class FatalPruningError(RuntimeError):
    def __init__(self, layers, names=None):
        self.layers = list(layers)
        label = ", ".join(names) if names else ", ".join(str(j) for j in self.layers)
        super().__init__(f"fatal pruning: no kept channels in mandatory layer(s) {label}")


@dataclass
class ConvUnit:
    name: str
    layer: int
    source: str
    weight: Tensor
    gamma: Tensor
    beta: Tensor
    stats: RunningStats
    stride: int = 1
    padding: int = 0
    relu: bool = True
    ids: np.ndarray | None = None  # surviving original channel ids (slim nets)

    @property
    def width(self) -> int:
        return self.weight.shape[0]


@dataclass
class AddNode:
    name: str
    sources: list[str]
    main: str
    relu: bool = True
    width: int = 0
    maps: dict[str, np.ndarray] | None = None  # slim nets: source -> positions in the union


@dataclass
class HardMask:
    """Binary keep (1) / drop (0) decision per prunable channel, flat in layer order."""

    bits: np.ndarray
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        self.bits = np.asarray(self.bits).astype(np.uint8).reshape(-1)
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if self.bits.size != sum(self.layer_sizes):
            raise ValueError(f"mask has {self.bits.size} bits for {sum(self.layer_sizes)} channels")
        if np.any(self.bits > 1):
            raise ValueError("hard mask values must be 0 or 1")

    @classmethod
    def ones(cls, layer_sizes) -> "HardMask":
        return cls(np.ones(sum(layer_sizes), dtype=np.uint8), layer_sizes)

    def per_layer(self) -> list[np.ndarray]:
        off = np.concatenate([[0], np.cumsum(self.layer_sizes)]).astype(int)
        return [self.bits[off[j]:off[j + 1]] for j in range(len(self.layer_sizes))]

    def kept_per_layer(self) -> list[int]:
        return [int(b.sum()) for b in self.per_layer()]

    def __eq__(self, other):
        return isinstance(other, HardMask) and self.layer_sizes == other.layer_sizes and np.array_equal(self.bits, other.bits)


@dataclass
class MaskedNet:
    nodes: list
    output: str
    head_weight: Tensor
    head_bias: Tensor
    input_shape: tuple[int, ...]
    num_classes: int
    shape: NetworkShape | None
    masks: MaskSet | None
    arch: dict = field(default_factory=dict)
    slim: bool = False

    # -- parameters -------------------------------------------------------

    def conv_units(self) -> list[ConvUnit]:
        return [n for n in self.nodes if isinstance(n, ConvUnit)]

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for u in self.conv_units():
            params[f"{u.name}.weight"] = u.weight
            params[f"{u.name}.bn_gamma"] = u.gamma
            params[f"{u.name}.bn_beta"] = u.beta
        params["head.weight"] = self.head_weight
        params["head.bias"] = self.head_bias
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        bufs = {}
        for u in self.conv_units():
            bufs[f"{u.name}.running_mean"] = u.stats.mean
            bufs[f"{u.name}.running_var"] = u.stats.var
        return bufs

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: v.data for k, v in self.parameters().items()}
        arrays.update(self.buffers())
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.parameters().items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"{k}: stored shape {arrays[k].shape} differs from {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float32)
        for k, buf in self.buffers().items():
            buf[...] = arrays[k]

    def count_parameters(self, include_head: bool = False) -> int:
        """Conv kernels plus batchnorm affine parameters (head optional)."""
        n = sum(u.weight.size + u.gamma.size + u.beta.size for u in self.conv_units())
        if include_head:
            n += self.head_weight.size + self.head_bias.size
        return n

    def count_flops(self) -> int:
        """Sliding-window multiply-accumulates plus one per conv output value."""
        total = 0
        for u, area in zip(self.conv_units(), self._feature_areas()):
            o, c, kh, kw = u.weight.shape
            total += (kh * kw * c + 1) * o * area
        return total

    def _feature_areas(self) -> list[int]:
        areas, spatial = [], {"input": self.input_shape[1:] if len(self.input_shape) == 3 else (1, 1)}
        for node in self.nodes:
            if isinstance(node, ConvUnit):
                h, w = spatial[node.source]
                k = node.weight.shape[2]
                ho = (h + 2 * node.padding - k) // node.stride + 1
                wo = (w + 2 * node.padding - k) // node.stride + 1
                spatial[node.name] = (ho, wo)
                areas.append(ho * wo)
            else:
                spatial[node.name] = spatial[node.sources[0]]
        return areas

    def copy(self) -> "MaskedNet":
        return copy.deepcopy(self)

    # -- forward ------------------------------------------------------------

    def forward(self, x, masks=None, mode: str = "train", bn_momentum: float = 0.1) -> Tensor:
        """Logits for input ``x``.

        ``masks`` is None (no masking) or one entry per prunable layer: an
        array or a Tensor of that layer's channel multipliers.
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        expected = tuple(self.input_shape)
        if x.shape[1:] != expected:
            raise ndgrad.ShapeError(f"input has per-sample shape {x.shape[1:]}, expected {expected}")
        if x.data.ndim == 2:
            x = ndgrad.reshape(x, x.shape + (1, 1))
        layer_masks = self._layer_masks(masks)
        values = {"input": x}
        for node in self.nodes:
            if isinstance(node, ConvUnit):
                h = ndgrad.conv2d(values[node.source], node.weight, node.stride, node.padding)
                h = ndgrad.batchnorm2d(h, node.gamma, node.beta, node.stats, mode=mode, momentum=bn_momentum)
                m = layer_masks.get(node.layer)
                if m is not None:
                    h = ndgrad.mul(h, ndgrad.reshape(m, (1, -1, 1, 1)))
                values[node.name] = ndgrad.relu(h) if node.relu else h
            else:
                if node.maps is None:
                    total = values[node.sources[0]]
                    for s in node.sources[1:]:
                        total = ndgrad.add(total, values[s])
                else:
                    parts = [ndgrad.scatter_channels(values[s], node.maps[s], node.width) for s in node.sources]
                    total = parts[0]
                    for p in parts[1:]:
                        total = ndgrad.add(total, p)
                values[node.name] = ndgrad.relu(total) if node.relu else total
        pooled = ndgrad.tmean(values[self.output], axis=(2, 3))
        return ndgrad.linear(pooled, self.head_weight, self.head_bias)

    def _layer_masks(self, masks) -> dict:
        if masks is None:
            return {}
        if self.shape is None:
            raise ValueError("slim networks are not masked")
        prunable = [l.index for l in self.shape.layers if l.prunable]
        if len(masks) != len(prunable):
            raise ValueError(f"got {len(masks)} layer masks for {len(prunable)} prunable layers")
        out = {}
        for j, m in zip(prunable, masks):
            if not isinstance(m, Tensor):
                m = Tensor(np.asarray(m, dtype=np.float32))
            if m.shape != (self.shape.layers[j].channels,):
                raise ValueError(f"layer {j} mask has shape {m.shape}, expected ({self.shape.layers[j].channels},)")
            out[j] = m
        return out

    def predict(self, x, batch_size: int = 256, masks=None) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch_size):
            out.append(self.forward(np.asarray(x[i:i + batch_size]), masks=masks, mode="eval").data)
        return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _conv_unit(name, layer, source, cin, cout, k, stride, rng, relu=True) -> ConvUnit:
    std = np.sqrt(2.0 / (cin * k * k))
    w = rng.normal(0.0, std, size=(cout, cin, k, k)).astype(np.float32)
    return ConvUnit(
        name=name,
        layer=layer,
        source=source,
        weight=Tensor(w, requires_grad=True),
        gamma=Tensor(np.ones(cout, np.float32), requires_grad=True),
        beta=Tensor(np.zeros(cout, np.float32), requires_grad=True),
        stats=RunningStats.fresh(cout),
        stride=stride,
        padding=k // 2,
        relu=relu,
    )


def _spatial_after(h, k, stride, padding):
    return (h + 2 * padding - k) // stride + 1


def build_model(
    preset: str = "tiny-cnn",
    widths=None,
    input_shape=(1, 28, 28),
    num_classes: int = 10,
    seed: int = 0,
    psi_init=(2.5, 3.5),
) -> MaskedNet:
    """Build a masked network from a named preset.

    tiny-cnn: four 3x3 conv layers (strides 1,2,1,2), default widths (16,16,32,32).
    tiny-resnet: stem conv then three residual blocks of two 3x3 convs (block
    strides 1,2,2); a block that changes width or resolution gets a 1x1
    downsample conv on its skip path. Widths are (stem, block1, block2, block3),
    default (8,8,16,32).
    mlp-bn: fully-connected layers with batchnorm on flat inputs, default widths (32,32).
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")
    defaults = {"tiny-cnn": (16, 16, 32, 32), "tiny-resnet": (8, 8, 16, 32), "mlp-bn": (32, 32)}
    widths = tuple(int(w) for w in (widths if widths is not None else defaults[preset]))
    if not widths or any(w < 1 for w in widths):
        raise ConfigError(f"widths must be positive, got {widths}")
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    input_shape = tuple(int(s) for s in input_shape)
    rng = np.random.default_rng(seed)

    nodes: list = []
    specs: list[LayerSpec] = []

    def add_conv(name, source, pred, cin, cout, k, stride, hw, relu=True):
        j = len(specs)
        unit = _conv_unit(name, j, source, cin, cout, k, stride, rng, relu)
        h = _spatial_after(hw[0], k, stride, unit.padding)
        w = _spatial_after(hw[1], k, stride, unit.padding)
        specs.append(LayerSpec(j, cout, h * w, k * k, pred, True, name))
        nodes.append(unit)
        return unit, (h, w)

    if preset == "tiny-cnn":
        if len(input_shape) != 3:
            raise ConfigError("tiny-cnn needs a (C, H, W) input shape")
        if len(widths) != 4:
            raise ConfigError("tiny-cnn takes 4 widths")
        cin, hw, src, pred = input_shape[0], input_shape[1:], "input", INPUT
        for i, (w, s) in enumerate(zip(widths, (1, 2, 1, 2))):
            unit, hw = add_conv(f"conv{i + 1}", src, pred, cin, w, 3, s, hw)
            cin, src, pred = w, unit.name, unit.layer
        output, feat = src, cin
    elif preset == "tiny-resnet":
        if len(input_shape) != 3:
            raise ConfigError("tiny-resnet needs a (C, H, W) input shape")
        if len(widths) != 4:
            raise ConfigError("tiny-resnet takes 4 widths (stem + 3 blocks)")
        stem, hw = add_conv("stem", "input", INPUT, input_shape[0], widths[0], 3, 1, input_shape[1:])
        src, cin, pred = stem.name, widths[0], stem.layer
        for b, (w, s) in enumerate(zip(widths[1:], (1, 2, 2)), start=1):
            a, hw_a = add_conv(f"block{b}.conv_a", src, pred, cin, w, 3, s, hw)
            c, hw_b = add_conv(f"block{b}.conv_b", a.name, a.layer, w, w, 3, 1, hw_a, relu=False)
            if s != 1 or w != cin:
                skip, _ = add_conv(f"block{b}.skip", src, pred, cin, w, 1, s, hw, relu=False)
                skip.padding = 0
                skip_src = skip.name
            else:
                skip_src = src
            join = AddNode(f"block{b}.add", [c.name, skip_src], main=c.name, relu=True, width=w)
            nodes.append(join)
            src, cin, pred, hw = join.name, w, c.layer, hw_b
        output, feat = src, cin
    else:
        if len(input_shape) != 1:
            raise ConfigError("mlp-bn needs a flat (D,) input shape")
        cin, src, pred = input_shape[0], "input", INPUT
        for i, w in enumerate(widths):
            unit, _ = add_conv(f"fc{i + 1}", src, pred, cin, w, 1, 1, (1, 1))
            unit.padding = 0
            cin, src, pred = w, unit.name, unit.layer
        output, feat = src, cin

    bound = 1.0 / np.sqrt(feat)
    head_w = Tensor(rng.uniform(-bound, bound, size=(num_classes, feat)).astype(np.float32), requires_grad=True)
    head_b = Tensor(rng.uniform(-bound, bound, size=num_classes).astype(np.float32), requires_grad=True)
    topology = [(n.name, "conv" if isinstance(n, ConvUnit) else "add",
                 (n.source,) if isinstance(n, ConvUnit) else tuple(n.sources)) for n in nodes]
    shape = NetworkShape(tuple(specs), input_shape[0], meta={"topology": topology, "output": output})
    masks = MaskSet.initialize(shape.mask_sizes, rng, *psi_init)
    arch = dict(preset=preset, widths=list(widths), input_shape=list(input_shape),
                num_classes=num_classes, seed=seed, psi_init=list(psi_init))
    return MaskedNet(nodes, output, head_w, head_b, input_shape, num_classes, shape, masks, arch)


# ---------------------------------------------------------------------------
# masked execution
# ---------------------------------------------------------------------------


def forward_masked(
    net: MaskedNet,
    x,
    continuation: ContinuationState | None = None,
    hard_mask: HardMask | None = None,
    mode: str = "train",
    psi0: float = 0.0,
    use_heaviside: bool = True,
) -> Tensor:
    """Soft forward (masks projected from psi) or, given ``hard_mask``, hard forward."""
    if hard_mask is not None:
        if hard_mask.layer_sizes != net.shape.mask_sizes:
            raise ValueError(f"hard mask layout {hard_mask.layer_sizes} != network {net.shape.mask_sizes}")
        return net.forward(x, masks=[b.astype(np.float32) for b in hard_mask.per_layer()], mode=mode)
    if continuation is None:
        raise ValueError("soft forward needs a continuation state")
    z_tilde = logistic(net.masks.psi, continuation.beta, psi0)
    z = heaviside(z_tilde, continuation.gamma) if use_heaviside else z_tilde
    return net.forward(x, masks=net.masks.split(z), mode=mode)


def _topology(shape: NetworkShape):
    """(nodes, output name, conv-node -> layer index) for a shape."""
    topo = shape.meta.get("topology") if shape.meta else None
    if topo:
        layer_of = {l.name: l.index for l in shape.layers}
        return [(n, k, tuple(s)) for n, k, s in topo], shape.meta["output"], layer_of
    # plain pred-wired shape: each layer reads its predecessor, the last layer feeds the head
    names = [f"L{l.index}" for l in shape.layers]
    topo = [(names[l.index], "conv", ("input" if l.pred == INPUT else names[l.pred],)) for l in shape.layers]
    return topo, names[-1], {n: j for j, n in enumerate(names)}


def validate_connectivity(shape: NetworkShape, mask: HardMask) -> list[int]:
    """Layers that are fully pruned and thereby cut the input from the output.

    Returns an empty list when the mask is materializable.
    """
    if mask.layer_sizes != shape.mask_sizes:
        raise ValueError(f"mask layout {mask.layer_sizes} != shape {shape.mask_sizes}")
    topo, output, layer_of = _topology(shape)
    kept = {}
    bits = iter(mask.per_layer())
    for l in shape.layers:
        kept[l.index] = int(next(bits).sum()) if l.prunable else l.channels

    def reachable(dead_ok: bool):
        alive = {"input": True}
        for name, kind, sources in topo:
            if kind == "conv":
                j = layer_of[name]
                alive[name] = alive[sources[0]] and (dead_ok or kept[j] > 0)
            else:
                alive[name] = any(alive[s] for s in sources)
        return alive

    if reachable(False)[output]:
        return []
    on_path = reachable(True)
    # layers on some input->output route whose masks are empty
    consumers: dict[str, list[str]] = {}
    for name, _, sources in topo:
        for s in sources:
            consumers.setdefault(s, []).append(name)
    leads_out = {output}
    for name, _, _ in reversed(topo):
        if any(c in leads_out for c in consumers.get(name, [])):
            leads_out.add(name)
    return sorted(layer_of[n] for n, kind, _ in topo
                  if kind == "conv" and kept[layer_of[n]] == 0 and on_path[n] and n in leads_out)


def materialize(net: MaskedNet, mask: HardMask) -> MaskedNet:
    """Slim copy of ``net`` without the channels ``mask`` drops."""
    if net.shape is None:
        raise ValueError("cannot materialize an already slim network")
    if mask.layer_sizes != net.shape.mask_sizes:
        raise ValueError(f"mask layout {mask.layer_sizes} != network {net.shape.mask_sizes}")
    fatal = validate_connectivity(net.shape, mask)
    if fatal:
        raise FatalPruningError(fatal, [net.shape.layers[j].name or str(j) for j in fatal])

    keep = {}
    bits = iter(mask.per_layer())
    for l in net.shape.layers:
        keep[l.index] = np.flatnonzero(next(bits)) if l.prunable else np.arange(l.channels)

    in_ch = net.input_shape[0]
    ids = {"input": np.arange(in_ch)}
    new_nodes = []
    for node in net.nodes:
        if isinstance(node, ConvUnit):
            out = keep[node.layer]
            src = ids[node.source]
            # zero-width units keep the spatial bookkeeping for live consumers
            w = node.weight.data[np.ix_(out, src)]
            unit = ConvUnit(
                name=node.name,
                layer=node.layer,
                source=node.source,
                weight=Tensor(np.ascontiguousarray(w), requires_grad=True),
                gamma=Tensor(node.gamma.data[out].copy(), requires_grad=True),
                beta=Tensor(node.beta.data[out].copy(), requires_grad=True),
                stats=RunningStats(node.stats.mean[out].copy(), node.stats.var[out].copy()),
                stride=node.stride,
                padding=node.padding,
                relu=node.relu,
                ids=out.copy(),
            )
            ids[node.name] = out
            new_nodes.append(unit)
        else:
            live = [s for s in node.sources if ids[s].size]
            union = np.unique(np.concatenate([ids[s] for s in live])) if live else np.array([], dtype=int)
            ids[node.name] = union
            if not live:
                continue
            maps = {s: np.searchsorted(union, ids[s]) for s in live}
            new_nodes.append(AddNode(node.name, live, node.main if node.main in live else live[0],
                                     node.relu, int(union.size), maps))
    new_nodes = _drop_unused_empty(new_nodes)
    final = ids[net.output]
    slim = MaskedNet(
        nodes=new_nodes,
        output=net.output,
        head_weight=Tensor(net.head_weight.data[:, final].copy(), requires_grad=True),
        head_bias=Tensor(net.head_bias.data.copy(), requires_grad=True),
        input_shape=net.input_shape,
        num_classes=net.num_classes,
        shape=None,
        masks=None,
        arch=dict(net.arch, slim=True, kept=mask.kept_per_layer()),
        slim=True,
    )
    return slim


def _drop_unused_empty(nodes: list) -> list:
    """Remove zero-width conv units that no remaining conv unit reads from."""
    while True:
        read = {n.source for n in nodes if isinstance(n, ConvUnit)}
        keep = [n for n in nodes if not (isinstance(n, ConvUnit) and n.width == 0 and n.name not in read)]
        if len(keep) == len(nodes):
            return keep
        nodes = keep
