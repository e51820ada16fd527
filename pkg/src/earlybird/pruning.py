"""Channel masks drawn from BN scale factors, mask distances and channel surgery."""

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write, fmt_float
from .errors import ConfigError, InputError, MaskError
from .model import Network, build_network


@dataclass(eq=False)
class ChannelMask:
    """Binary keep (1) / prune (0) flag for every prunable channel."""

    bits: np.ndarray
    p: float
    source_epoch: int = 0
    layer_sizes: tuple = ()

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 1:
            raise InputError("mask bits must be a 1-D vector")
        if self.layer_sizes and sum(self.layer_sizes) != self.bits.size:
            raise InputError("layer sizes do not add up to the mask length")

    def __len__(self):
        return int(self.bits.size)

    def __eq__(self, other):
        if not isinstance(other, ChannelMask):
            return NotImplemented
        return self.p == other.p and np.array_equal(self.bits, other.bits)

    @property
    def num_pruned(self):
        return int(self.bits.size - np.count_nonzero(self.bits))

    def per_layer(self):
        """Split the bits into one array per BN layer."""
        if not self.layer_sizes:
            return [self.bits]
        return np.split(self.bits, np.cumsum(self.layer_sizes)[:-1])


@dataclass
class ChannelScores:
    """``|gamma|`` for every prunable channel in global index order."""

    index: np.ndarray
    layer: np.ndarray
    value: np.ndarray
    layer_sizes: tuple = ()

    def __len__(self):
        return int(self.value.size)

    def __iter__(self):
        return iter(zip(self.index.tolist(), self.value.tolist()))

    @classmethod
    def from_layers(cls, per_layer):
        """Build from a list of per-layer gamma vectors (absolute values taken)."""
        per_layer = [np.abs(np.asarray(g, dtype=np.float64).ravel()) for g in per_layer]
        sizes = tuple(int(g.size) for g in per_layer)
        value = np.concatenate(per_layer) if per_layer else np.zeros(0)
        layer = np.repeat(np.arange(len(sizes)), sizes)
        return cls(np.arange(value.size), layer, value, sizes)


def extract_gammas(network):
    """Absolute BN scale factor of every channel, layers concatenated in order."""
    per_layer = [network.params[name] for name in network.gamma_names]
    return ChannelScores.from_layers(per_layer)


def prune_count(p, total):
    return int(math.floor(p * total + 0.5))


def compute_mask(gammas, p, per_layer_floor=1, source_epoch=0):
    """Mask out the ``round(p * C)`` channels with the smallest ``|gamma|``, globally.

    Ties go to the smaller global index.  A channel whose layer already sits
    at ``per_layer_floor`` survivors is skipped and the next-smallest channel
    is pruned instead.
    """
    if not 0 < p < 1:
        raise ConfigError(f"pruning ratio must lie in (0, 1), got {p}")
    if not isinstance(gammas, ChannelScores):
        gammas = ChannelScores.from_layers(gammas)
    total = len(gammas)
    target = prune_count(p, total)
    bits = np.ones(total, dtype=np.uint8)
    sizes = gammas.layer_sizes or (total,)
    remaining = list(sizes)
    pruned = 0
    for c in np.lexsort((gammas.index, gammas.value)):
        if pruned == target:
            break
        layer = gammas.layer[c]
        if remaining[layer] > per_layer_floor:
            bits[c] = 0
            remaining[layer] -= 1
            pruned += 1
    return ChannelMask(bits, p, source_epoch, tuple(sizes) if gammas.layer_sizes else ())


def network_mask(network, p, source_epoch=0, per_layer_floor=1):
    """Virtual pruning: read the gammas of ``network`` without modifying it."""
    return compute_mask(extract_gammas(network), p, per_layer_floor, source_epoch)


def _check_pair(m1, m2):
    if len(m1) != len(m2):
        raise InputError(f"mask lengths differ: {len(m1)} vs {len(m2)}")
    if m1.p != m2.p:
        raise InputError(f"masks drawn at different ratios: {m1.p} vs {m2.p}")


def mask_distance(m1, m2):
    """Hamming distance divided by the number of channels."""
    _check_pair(m1, m2)
    if len(m1) == 0:
        return 0.0
    return np.count_nonzero(m1.bits != m2.bits) / len(m1)


# --------------------------------------------------------------------------
# Pairwise matrices
# --------------------------------------------------------------------------

@dataclass
class DistanceMatrix:
    values: np.ndarray
    labels: list = field(default_factory=list)

    MAGIC = b"EBDIST01"

    def to_csv(self):
        buf = io.StringIO()
        buf.write(",".join(str(lab) for lab in self.labels) + "\n")
        for row in self.values:
            buf.write(",".join(fmt_float(v) for v in row) + "\n")
        return buf.getvalue()

    def to_bytes(self):
        e = self.values.shape[0]
        payload = np.ascontiguousarray(self.values, dtype="<f4").tobytes()
        return self.MAGIC + struct.pack("<I", e) + payload

    def save(self, csv_path=None, bin_path=None):
        if csv_path is not None:
            atomic_write(csv_path, self.to_csv())
        if bin_path is not None:
            atomic_write(bin_path, self.to_bytes())

    @classmethod
    def from_bytes(cls, data, labels=None):
        if data[:8] != cls.MAGIC:
            raise InputError("not a distance matrix file (bad magic)")
        (e,) = struct.unpack("<I", data[8:12])
        expected = 12 + 4 * e * e
        if len(data) != expected:
            raise InputError(f"distance matrix payload has {len(data)} bytes, expected {expected}")
        values = np.frombuffer(data, dtype="<f4", offset=12).reshape(e, e).astype(np.float64)
        return cls(values, list(labels) if labels is not None else list(range(e)))

    @classmethod
    def from_csv(cls, text):
        lines = [ln for ln in text.splitlines() if ln]
        labels = [int(v) if v.lstrip("-").isdigit() else v for v in lines[0].split(",")]
        values = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        return cls(values, labels)


def distance_matrix(masks, normalize="per-pair", labels=None):
    """Pairwise mask distances.

    ``normalize="per-pair"`` keeps ``Hamming / C``; ``"matrix-minmax"``
    rescales the whole matrix linearly onto [0, 1] (for heatmaps only).
    """
    masks = list(masks)
    if len(masks) < 2:
        raise InputError("need at least two masks")
    for m in masks[1:]:
        _check_pair(masks[0], m)
    b = np.stack([m.bits for m in masks]).astype(np.int64)
    n = b.shape[1]
    diff = b @ (1 - b).T
    diff = diff + diff.T
    values = diff / n if n else np.zeros(diff.shape)
    if normalize == "matrix-minmax":
        lo, hi = values.min(), values.max()
        values = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    elif normalize != "per-pair":
        raise ConfigError(f"unknown normalisation {normalize!r}")
    if labels is None:
        labels = [m.source_epoch for m in masks]
    return DistanceMatrix(values, list(labels))


# --------------------------------------------------------------------------
# Channel surgery
# --------------------------------------------------------------------------

def apply_mask(network, mask, weight_mode="inherit", seed=0):
    """Physically remove the channels switched off by ``mask``.

    ``inherit`` slices the current parameters and BN running statistics of
    ``network``; ``reinit`` builds the smaller architecture from scratch
    with ``seed``.
    """
    if len(mask) != network.total_channels:
        raise InputError(f"mask has {len(mask)} channels, network has {network.total_channels}")
    if weight_mode not in ("inherit", "reinit"):
        raise ConfigError(f"unknown weight mode {weight_mode!r}")
    keep = {}
    for bn, offset, size in network.channel_table:
        kept = np.flatnonzero(mask.bits[offset : offset + size])
        if kept.size == 0:
            raise MaskError(f"mask removes every channel of {bn}")
        keep[bn] = kept
    spec = network.spec.with_conv_channels([keep[bn].size for bn, _, _ in network.channel_table])
    if weight_mode == "reinit":
        return build_network(spec, seed, dtype=next(iter(network.params.values())).dtype)

    params, buffers = {}, {}
    prev = None  # kept channel indices feeding the current layer
    for layer in network.layers:
        if layer.kind == "conv":
            i = layer.index
            out = keep[f"bn{i}"]
            w = network.params[f"conv{i}.weight"][out]
            if prev is not None:
                w = w[:, prev]
            params[f"conv{i}.weight"] = np.ascontiguousarray(w)
            for name in ("gamma", "beta"):
                params[f"bn{i}.{name}"] = network.params[f"bn{i}.{name}"][out].copy()
            for name in ("running_mean", "running_var"):
                buffers[f"bn{i}.{name}"] = network.buffers[f"bn{i}.{name}"][out].copy()
            prev = out
        elif layer.kind == "linear":
            i = layer.index
            w = network.params[f"fc{i}.weight"]
            if prev is not None:
                if len(layer.in_shape) == 3:
                    c, h, wd = layer.in_shape
                    cols = (prev[:, None] * (h * wd) + np.arange(h * wd)[None, :]).ravel()
                else:
                    cols = prev
                w = w[:, cols]
            params[f"fc{i}.weight"] = np.ascontiguousarray(w)
            params[f"fc{i}.bias"] = network.params[f"fc{i}.bias"].copy()
            prev = None
    return Network(spec, params, buffers)
