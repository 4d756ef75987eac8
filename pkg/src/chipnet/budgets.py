"""Resource budgets of a masked network as fractions of the dense network.

A budget takes per-channel mask values for the prunable layers, flattened in
layer order, and a :class:`NetworkShape`. Masks may be numpy arrays (result is
a float) or :class:`~chipnet.ndgrad.Tensor` (result is a differentiable
scalar tensor). Non-prunable layers count as fully kept.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndgrad
from .ndgrad import Tensor

INPUT = -1


class BudgetKind(str, enum.Enum):
    CHANNEL = "channel"
    VOLUME = "volume"
    PARAMETER = "parameter"
    FLOPS = "flops"


@dataclass(frozen=True)
class LayerSpec:
    index: int
    channels: int
    feature_area: int
    kernel_area: int
    pred: int = INPUT
    prunable: bool = True
    name: str = ""

    def __post_init__(self):
        if self.channels < 1 or self.feature_area < 1 or self.kernel_area < 1:
            raise ValueError(f"layer {self.index}: channels, feature_area and kernel_area must be >= 1")


@dataclass(frozen=True)
class NetworkShape:
    layers: tuple[LayerSpec, ...]
    input_channels: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        for j, layer in enumerate(self.layers):
            if layer.index != j:
                raise ValueError(f"layer indices must be contiguous from 0; found {layer.index} at position {j}")
            if not (layer.pred == INPUT or 0 <= layer.pred < j):
                raise ValueError(f"layer {j} has predecessor {layer.pred}, which is not an earlier layer or the input")

    @property
    def prunable_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.prunable]

    @property
    def mask_sizes(self) -> tuple[int, ...]:
        return tuple(layer.channels for layer in self.prunable_layers)

    @property
    def total_channels(self) -> int:
        return sum(layer.channels for layer in self.layers)

    @property
    def mask_count(self) -> int:
        return sum(self.mask_sizes)

    def pred_channels(self, layer: LayerSpec) -> int:
        return self.input_channels if layer.pred == INPUT else self.layers[layer.pred].channels

    def dense_parameters(self) -> int:
        return sum(l.kernel_area * l.channels * self.pred_channels(l) + 2 * l.channels for l in self.layers)

    def dense_flops(self) -> int:
        return sum((l.kernel_area * self.pred_channels(l) + 1) * l.channels * l.feature_area for l in self.layers)

    # -- persistence --------------------------------------------------------

    def to_table(self) -> str:
        out = io.StringIO()
        out.write(f"# input_channels {self.input_channels}\n")
        out.write("j\tp_j\tA_j\tK_j\tpred\tprunable\tname\n")
        for l in self.layers:
            out.write(f"{l.index}\t{l.channels}\t{l.feature_area}\t{l.kernel_area}\t{l.pred}\t{int(l.prunable)}\t{l.name}\n")
        return out.getvalue()

    @classmethod
    def from_table(cls, text: str) -> "NetworkShape":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# input_channels"):
            raise ValueError("shape table must start with '# input_channels <n>'")
        p0 = int(lines[0].split()[-1])
        layers = []
        for ln in lines[2:]:
            parts = ln.split("\t")
            j, p, a, k, pred, prunable = (int(v) for v in parts[:6])
            layers.append(LayerSpec(j, p, a, k, pred, bool(prunable), parts[6] if len(parts) > 6 else ""))
        return cls(tuple(layers), p0)

    def to_dict(self) -> dict:
        return {"input_channels": self.input_channels, "layers": [asdict(l) for l in self.layers],
                "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkShape":
        return cls(tuple(LayerSpec(**l) for l in d["layers"]), int(d["input_channels"]), dict(d.get("meta") or {}))

    def fingerprint(self) -> str:
        """Hash of the layer table and wiring (independent of the classifier head)."""
        rows = [(l.channels, l.feature_area, l.kernel_area, l.pred, l.prunable) for l in self.layers]
        topo = [[kind, list(src)] for _, kind, src in (self.meta or {}).get("topology", [])]
        blob = json.dumps({"p0": self.input_channels, "layers": rows, "topology": topo}, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _layer_sums(z, shape: NetworkShape) -> list:
    """Per-layer kept-channel sums; floats for arrays, scalar Tensors for Tensors."""
    n = z.size if isinstance(z, Tensor) else np.asarray(z).size
    if n != shape.mask_count:
        raise ValueError(f"mask has {n} entries but the network has {shape.mask_count} prunable channels")
    if not isinstance(z, Tensor):
        z = np.asarray(z, dtype=np.float64).reshape(-1)
    sums, offset = [], 0
    for layer in shape.layers:
        if layer.prunable:
            piece = z[offset:offset + layer.channels]
            sums.append(ndgrad.tsum(piece) if isinstance(z, Tensor) else float(piece.sum()))
            offset += layer.channels
        else:
            sums.append(float(layer.channels))
    return sums


def _total(terms):
    total = 0.0
    for t in terms:
        total = t + total
    return total


def channel_budget(z_bar, shape: NetworkShape):
    sums = _layer_sums(z_bar, shape)
    return _total(sums) / float(shape.total_channels)


def volume_budget(z_bar, shape: NetworkShape):
    sums = _layer_sums(z_bar, shape)
    dense = sum(l.feature_area * l.channels for l in shape.layers)
    return _total(s * float(l.feature_area) for s, l in zip(sums, shape.layers)) / float(dense)


def parameter_budget(z_bar, shape: NetworkShape):
    """Conv kernels between kept channel pairs plus two batchnorm parameters per kept channel."""
    sums = _layer_sums(z_bar, shape)

    def src(l):
        return float(shape.input_channels) if l.pred == INPUT else sums[l.pred]

    terms = (s * src(l) * float(l.kernel_area) + s * 2.0 for s, l in zip(sums, shape.layers))
    return _total(terms) / float(shape.dense_parameters())


def flops_budget(z_bar, shape: NetworkShape):
    """Sliding-window multiply-accumulates (plus one per output) over kept channels."""
    sums = _layer_sums(z_bar, shape)

    def src(l):
        return float(shape.input_channels) if l.pred == INPUT else sums[l.pred]

    terms = ((src(l) * float(l.kernel_area) + 1.0) * s * float(l.feature_area) for s, l in zip(sums, shape.layers))
    return _total(terms) / float(shape.dense_flops())


BUDGETS = {
    BudgetKind.CHANNEL: channel_budget,
    BudgetKind.VOLUME: volume_budget,
    BudgetKind.PARAMETER: parameter_budget,
    BudgetKind.FLOPS: flops_budget,
}


def budget(kind, z_bar, shape: NetworkShape):
    return BUDGETS[BudgetKind(kind)](z_bar, shape)


def all_budgets(z_bar, shape: NetworkShape) -> dict[str, float]:
    return {kind.value: float(fn(np.asarray(z_bar, dtype=np.float64), shape)) for kind, fn in BUDGETS.items()}


def check_target(target: float) -> float:
    target = float(target)
    if not 0.0 < target <= 1.0:
        raise ValueError(f"budget target must lie in (0, 1], got {target}")
    return target


def budget_loss(value, target: float):
    """(value - target)^2."""
    target = check_target(target)
    d = value - target
    return d * d
