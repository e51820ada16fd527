"""Binary checkpoints: magic, metadata length, JSON metadata, raw float32 tensors.

Layout::

    b"EBCKPT01"
    uint32 little-endian   metadata length in bytes
    UTF-8 JSON             spec, epoch, tensor table, optimizer/detector/RNG state
    float32 little-endian  tensor payloads in the order of the tensor table
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .detector import EBDetector
from .errors import CheckpointError, EarlyBirdError
from .model import Network, NetworkSpec, plan_layers, tensor_shapes
from .optim import OptimizerState
from .pruning import ChannelMask

MAGIC = b"EBCKPT01"
FORMAT_VERSION = 1
GROUPS = ("param", "buffer", "momentum")


@dataclass
class Checkpoint:
    epoch: int
    spec: NetworkSpec
    params: dict
    buffers: dict
    momentum: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    detector: dict = None
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def network(self):
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.buffers.items()})


def _metadata(ckpt):
    tensors = []
    for group, store in zip(GROUPS, (ckpt.params, ckpt.buffers, ckpt.momentum)):
        for name, arr in store.items():
            tensors.append({"group": group, "name": name, "shape": list(arr.shape)})
    return {
        "format_version": ckpt.version,
        "epoch": ckpt.epoch,
        "spec": ckpt.spec.to_dict(),
        "tensors": tensors,
        "optimizer": ckpt.optimizer,
        "detector": ckpt.detector,
        "rng": ckpt.rng,
        "extra": ckpt.extra,
    }


def encode_checkpoint(ckpt):
    meta = json.dumps(_metadata(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(meta)), meta]
    for store in (ckpt.params, ckpt.buffers, ckpt.momentum):
        for arr in store.values():
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(data):
    if len(data) < 12 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (meta_len,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + meta_len:
        raise CheckpointError("checkpoint truncated inside metadata")
    try:
        meta = json.loads(data[12 : 12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
    try:
        spec = NetworkSpec.from_dict(meta["spec"])
        plan_layers(spec)
    except EarlyBirdError as exc:
        raise CheckpointError(f"checkpoint holds an invalid network spec: {exc}") from exc

    stores = {g: {} for g in GROUPS}
    offset = 12 + meta_len
    for t in meta["tensors"]:
        shape = tuple(t["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise CheckpointError(f"checkpoint truncated in tensor {t['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        stores[t["group"]][t["name"]] = arr.astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after tensor payload")

    ref_params, ref_buffers = tensor_shapes(spec)
    for group, ref in (("param", ref_params), ("buffer", ref_buffers)):
        got = stores[group]
        if list(got) != list(ref):
            raise CheckpointError(f"{group} tensors {list(got)} do not match the network layout {list(ref)}")
        for name, arr in got.items():
            if arr.shape != ref[name]:
                raise CheckpointError(f"tensor {name} has shape {arr.shape}, the network layout implies {ref[name]}")
    for name, arr in stores["momentum"].items():
        if arr.shape != ref_params.get(name):
            raise CheckpointError(f"momentum buffer {name} does not match any parameter")

    return Checkpoint(
        epoch=meta["epoch"], spec=spec,
        params=stores["param"], buffers=stores["buffer"], momentum=stores["momentum"],
        optimizer=meta["optimizer"], detector=meta["detector"], rng=meta["rng"],
        extra=meta["extra"], version=meta["format_version"],
    )


def save_checkpoint(path, ckpt):
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return decode_checkpoint(data)


# --------------------------------------------------------------------------
# Phase state <-> checkpoint
# --------------------------------------------------------------------------

def mask_to_str(mask):
    return "".join("1" if b else "0" for b in mask.bits)


def mask_from_str(bits, p, epoch, layer_sizes):
    return ChannelMask(np.frombuffer(bits.encode("ascii"), dtype=np.uint8) - ord("0"), p, epoch, tuple(layer_sizes))


def checkpoint_from_state(state, config):
    """Snapshot a :class:`~earlybird.train.PhaseState` after a completed epoch."""
    net = state.network
    opt = state.optimizer
    masks = [mask_to_str(m) for m in state.masks]
    extra = {
        "phase": state.phase,
        "epochs": state.epochs,
        "precision": state.precision,
        "metrics": state.metrics,
        "masks": masks,
        "mask_p": state.masks[0].p if state.masks else None,
        "layer_sizes": [size for _, _, size in net.channel_table],
        "flops": state.flops,
        "config": config.to_dict(),
    }
    return Checkpoint(
        epoch=state.epoch,
        spec=net.spec,
        params=net.params,
        buffers=net.buffers,
        momentum={k: opt.buffers[k] for k in net.params if k in opt.buffers},
        optimizer={"lr": opt.lr, "momentum": opt.momentum, "weight_decay": opt.weight_decay},
        detector=state.detector.state_dict() if state.detector is not None else None,
        rng={"algorithm": "PCG64", "seed": config.seed, "data_seed": config.data_seed,
             "stream": "per-epoch key (data_seed, crc32(phase), epoch)"},
        extra=extra,
    )


def state_from_checkpoint(ckpt):
    """Rebuild a PhaseState that continues exactly where the checkpoint stopped."""
    from .train import PhaseState

    x = ckpt.extra
    opt = OptimizerState(ckpt.optimizer["lr"], ckpt.optimizer["momentum"], ckpt.optimizer["weight_decay"],
                         {k: v.copy() for k, v in ckpt.momentum.items()})
    det = EBDetector.from_state_dict(ckpt.detector) if ckpt.detector is not None else None
    masks = [mask_from_str(b, x["mask_p"], i + 1, x["layer_sizes"]) for i, b in enumerate(x.get("masks", []))]
    if det is not None and det.prev_mask is not None and masks:
        det.prev_mask = masks[-1]
    return PhaseState(
        phase=x["phase"], network=ckpt.network(), optimizer=opt, epochs=x["epochs"],
        precision=x["precision"], epoch=ckpt.epoch, detector=det,
        metrics=[dict(r) for r in x["metrics"]], masks=masks, flops=x["flops"],
    )
