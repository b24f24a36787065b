"""Byte-stable binary containers for datasets and checkpoints.

Both formats share the same scheme: an eight-byte magic, a length-prefixed
UTF-8 JSON header (canonicalized with sorted keys), then length-prefixed
little-endian float64 tensors.  Identical inputs serialize to identical
bytes on every platform.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .models import ComponentParams
from .optim import AdamState
from .tensor import Tensor
from .world import (
    CHARS,
    Image,
    MultimodalExample,
    PartitionSpec,
    PartitionedDataset,
    SpeechSeq,
    TextSeq,
    WorldConfig,
)

DATASET_MAGIC = b"MMCDS001"
CKPT_MAGIC = b"MMCKPT01"

_PAIRING_CODES = {"paired": 0, "unpaired": 1, "speech_only": 2, "image_only": 3}
_PAIRING_NAMES = {v: k for k, v in _PAIRING_CODES.items()}

_PARTITION_ORDER = (
    "paired",
    "unpaired_speech",
    "unpaired_text",
    "unpaired_image",
    "speech_only",
    "image_only",
    "dev",
    "test",
)


def _write_json_block(fh, obj) -> None:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(struct.pack("<q", len(raw)))
    fh.write(raw)


def _read_json_block(fh) -> dict:
    (n,) = struct.unpack("<q", fh.read(8))
    return json.loads(fh.read(n).decode("utf-8"))


def _write_f64(fh, arr: np.ndarray) -> None:
    flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
    fh.write(struct.pack("<q", flat.size))
    fh.write(flat.tobytes())


def _read_f64(fh) -> np.ndarray:
    (n,) = struct.unpack("<q", fh.read(8))
    return np.frombuffer(fh.read(8 * n), dtype="<f8").copy()


def _write_example(fh, ex: MultimodalExample) -> None:
    mask = (ex.x is not None) | ((ex.y is not None) << 1) | ((ex.z is not None) << 2)
    speaker = -1 if ex.speaker is None else ex.speaker
    fh.write(struct.pack("<qqqq", ex.scene_id, speaker, _PAIRING_CODES[ex.pairing], mask))
    if ex.x is not None:
        fh.write(struct.pack("<q", ex.x.frames.shape[0]))
        _write_f64(fh, ex.x.frames)
        _write_f64(fh, ex.x.stop_flags.astype(np.float64))
    if ex.y is not None:
        _write_f64(fh, ex.y.tokens.astype(np.float64))
    if ex.z is not None:
        _write_f64(fh, ex.z.pixels)


def _read_example(fh, cfg: WorldConfig) -> MultimodalExample:
    scene_id, speaker, pairing, mask = struct.unpack("<qqqq", fh.read(32))
    x = y = z = None
    if mask & 1:
        (t,) = struct.unpack("<q", fh.read(8))
        frames = _read_f64(fh).reshape(t, cfg.frame_dim)
        stops = _read_f64(fh).astype(bool)
        x = SpeechSeq(frames=frames, stop_flags=stops, speaker=None if speaker < 0 else speaker)
    if mask & 2:
        y = TextSeq(tokens=_read_f64(fh).astype(np.int64))
    if mask & 4:
        z = Image(
            pixels=_read_f64(fh).reshape(cfg.image_size, cfg.image_size, cfg.image_channels)
        )
    return MultimodalExample(
        x=x, y=y, z=z,
        speaker=None if speaker < 0 else int(speaker),
        scene_id=int(scene_id),
        pairing=_PAIRING_NAMES[int(pairing)],
    )


def save_dataset(ds: PartitionedDataset, path, config_hash: str = "") -> None:
    path = Path(path)
    header = {
        "format": "mmchain-dataset",
        "version": 1,
        "world": dataclasses.asdict(ds.world_cfg),
        "partition_spec": dataclasses.asdict(ds.spec),
        "seed": ds.seed,
        "config_hash": config_hash,
        "counts": {name: len(getattr(ds, name)) for name in _PARTITION_ORDER},
        "vocabulary": {c: i for c, i in sorted(CHARS.items())},
    }
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        _write_json_block(fh, header)
        for name in _PARTITION_ORDER:
            for ex in getattr(ds, name):
                _write_example(fh, ex)


def load_dataset(path) -> PartitionedDataset:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != DATASET_MAGIC:
            raise DataError(f"{path} is not a dataset container (bad magic {magic!r})")
        header = _read_json_block(fh)
        cfg = WorldConfig(**header["world"])
        spec = PartitionSpec(**header["partition_spec"])
        ds = PartitionedDataset(world_cfg=cfg, spec=spec, seed=header["seed"])
        for name in _PARTITION_ORDER:
            bucket = getattr(ds, name)
            for _ in range(header["counts"][name]):
                bucket.append(_read_example(fh, cfg))
        trailing = fh.read(1)
        if trailing:
            raise DataError(f"{path} has trailing bytes; corrupt container")
    return ds


def dataset_header(path) -> dict:
    with open(Path(path), "rb") as fh:
        if fh.read(8) != DATASET_MAGIC:
            raise DataError(f"{path} is not a dataset container")
        return _read_json_block(fh)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path,
    params: ComponentParams,
    step_count: int = 0,
    config_hash: str = "",
    adam: AdamState | None = None,
) -> None:
    path = Path(path)
    names = sorted(params.tensors)
    header = {
        "format": "mmchain-checkpoint",
        "version": 1,
        "kind": params.kind,
        "shapes": {n: list(params.tensors[n].data.shape) for n in names},
        "step_count": step_count,
        "config_hash": config_hash,
        "adam": None
        if adam is None
        else {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t},
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        _write_json_block(fh, header)
        for n in names:
            _write_f64(fh, params.tensors[n].data)
        if adam is not None:
            for n in names:
                _write_f64(fh, adam.m.get(n, np.zeros_like(params.tensors[n].data)))
            for n in names:
                _write_f64(fh, adam.v.get(n, np.zeros_like(params.tensors[n].data)))


def load_checkpoint(path, expect_kind: str | None = None):
    """Returns (ComponentParams, AdamState | None, header dict)."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise DataError(f"{path} is not a checkpoint container")
        header = _read_json_block(fh)
        kind = header["kind"]
        if expect_kind is not None and kind != expect_kind:
            raise DataError(
                f"checkpoint kind mismatch: {path} holds {kind!r}, expected {expect_kind!r}"
            )
        names = sorted(header["shapes"])
        tensors = {}
        for n in names:
            shape = tuple(header["shapes"][n])
            tensors[n] = Tensor(_read_f64(fh).reshape(shape), requires_grad=True)
        params = ComponentParams(kind=kind, tensors=tensors)
        adam = None
        if header["adam"] is not None:
            a = header["adam"]
            adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
            for n in names:
                adam.m[n] = _read_f64(fh).reshape(header["shapes"][n])
            for n in names:
                adam.v[n] = _read_f64(fh).reshape(header["shapes"][n])
    return params, adam, header
