import json
import struct

import numpy as np
import pytest

from earlybird.checkpoint import (
    MAGIC, Checkpoint, checkpoint_from_state, decode_checkpoint, encode_checkpoint, load_checkpoint,
    save_checkpoint, state_from_checkpoint,
)
from earlybird.errors import CheckpointError
from earlybird.model import build_network, conv4
from earlybird.train import TrainConfig, new_phase, run_phase

from test_train import TINY, tiny_config


@pytest.fixture
def trained_state(blobs):
    cfg = tiny_config()
    state = new_phase("dense", build_network(TINY, 0), cfg, 3, detector=True)
    run_phase(state, blobs, cfg)
    return state, cfg


class TestFormat:
    def test_layout(self, trained_state):
        state, cfg = trained_state
        data = encode_checkpoint(checkpoint_from_state(state, cfg))
        assert data[:8] == MAGIC
        (n,) = struct.unpack("<I", data[8:12])
        meta = json.loads(data[12 : 12 + n])
        assert meta["epoch"] == 3 and meta["format_version"] == 1
        assert meta["rng"]["algorithm"] == "PCG64"
        groups = [t["group"] for t in meta["tensors"]]
        assert groups == sorted(groups, key=("param", "buffer", "momentum").index)
        floats = sum(int(np.prod(t["shape"])) for t in meta["tensors"])
        assert len(data) == 12 + n + 4 * floats

    def test_bitwise_round_trip(self, trained_state, tmp_path):
        state, cfg = trained_state
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, checkpoint_from_state(state, cfg))
        ckpt = load_checkpoint(path)
        for k, v in state.network.params.items():
            assert ckpt.params[k].tobytes() == v.tobytes()
        save_checkpoint(tmp_path / "b.ckpt", ckpt)
        assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_corrupt_magic(self, trained_state):
        data = bytearray(encode_checkpoint(checkpoint_from_state(*trained_state)))
        data[0:8] = b"XXCKPT01"
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(data))

    def test_truncated(self, trained_state):
        data = encode_checkpoint(checkpoint_from_state(*trained_state))
        for cut in (4, 20, len(data) - 3):
            with pytest.raises(CheckpointError):
                decode_checkpoint(data[:cut])

    def test_trailing_bytes(self, trained_state):
        with pytest.raises(CheckpointError):
            decode_checkpoint(encode_checkpoint(checkpoint_from_state(*trained_state)) + b"\0\0\0\0")

    def test_shape_mismatch(self):
        net = build_network(conv4())
        params = dict(net.params)
        params["conv1.weight"] = np.zeros((16, 7, 3, 3), np.float32)
        data = encode_checkpoint(Checkpoint(0, conv4(), params, net.buffers))
        with pytest.raises(CheckpointError):
            decode_checkpoint(data)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_atomic_write_leaves_no_temp(self, trained_state, tmp_path):
        save_checkpoint(tmp_path / "x.ckpt", checkpoint_from_state(*trained_state))
        assert [p.name for p in tmp_path.iterdir()] == ["x.ckpt"]


class TestResume:
    def test_resume_matches_uninterrupted(self, blobs, tmp_path):
        cfg = tiny_config()
        full = new_phase("dense", build_network(TINY, 0), cfg, 6, detector=True)
        saved = {}
        run_phase(full, blobs, cfg, on_epoch=lambda s: saved.setdefault(s.epoch, encode_checkpoint(checkpoint_from_state(s, cfg))))
        for k in (1, 3):
            resumed = state_from_checkpoint(decode_checkpoint(saved[k]))
            run_phase(resumed, blobs, cfg)
            assert resumed.metrics == full.metrics
            assert [m.bits.tolist() for m in resumed.masks] == [m.bits.tolist() for m in full.masks]
            for name, v in full.network.params.items():
                assert resumed.network.params[name].tobytes() == v.tobytes()
            assert resumed.detector.state_dict() == full.detector.state_dict()

    def test_offline_masks_match_online(self, blobs):
        from earlybird.pruning import network_mask

        cfg = tiny_config()
        state = new_phase("dense", build_network(TINY, 0), cfg, 4, detector=True)
        offline = []
        run_phase(state, blobs, cfg, on_epoch=lambda s: offline.append(
            network_mask(decode_checkpoint(encode_checkpoint(checkpoint_from_state(s, cfg))).network(), cfg.p, s.epoch)))
        assert offline == state.masks
