"""Binary image blobs and trajectory record streams.

Image blob (little-endian)::

    u16 width, u16 height, u16 channels, u16 dtype tag   (8-byte header)
    row-major values (row 0 first, channels interleaved)

Dtype tags: 1 = uint8 (value / 255 maps to [0, 1]), 2 = float32.
An observation is three consecutive blobs: fixed image and wrist image as
uint8, then the F/T window as float32 with width 3, height = window length,
channels 1.

Trajectory dumps are a directory holding ``trajectory.jsonl`` (a header line
followed by one JSON record per step) and ``images.bin`` (fixed then wrist
blob for each record, in record order).
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from . import sim

UINT8 = 1
FLOAT32 = 2
TRAJECTORY_VERSION = 1


def encode_image(arr, dtype_tag=UINT8):
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if dtype_tag == UINT8:
        payload = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    elif dtype_tag == FLOAT32:
        payload = arr.astype("<f4")
    else:
        raise ValueError(f"unknown dtype tag {dtype_tag}")
    return struct.pack("<4H", w, h, c, dtype_tag) + np.ascontiguousarray(payload).tobytes()


def decode_image(buf, offset=0):
    """Returns (array, bytes consumed).  uint8 blobs come back as float32 in [0, 1]."""
    w, h, c, tag = struct.unpack_from("<4H", buf, offset)
    n = w * h * c
    start = offset + 8
    if tag == UINT8:
        arr = np.frombuffer(buf, dtype=np.uint8, count=n, offset=start).reshape(h, w, c).astype(np.float32) / 255.0
        return arr, 8 + n
    if tag == FLOAT32:
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=start).reshape(h, w, c).astype(np.float32)
        return arr, 8 + 4 * n
    raise ValueError(f"unknown dtype tag {tag}")


def _read_blob(fh):
    head = fh.read(8)
    w, h, c, tag = struct.unpack("<4H", head)
    size = w * h * c * (1 if tag == UINT8 else 4)
    arr, _ = decode_image(head + fh.read(size))
    return arr


def write_observation(fh, obs):
    fh.write(encode_image(obs.fixed_image))
    fh.write(encode_image(obs.wrist_image))
    fh.write(encode_image(np.asarray(obs.ft_history, dtype=np.float32)[:, :, None], FLOAT32))


def read_observation(fh):
    fixed = _read_blob(fh)
    wrist = _read_blob(fh)
    ft = _read_blob(fh)[:, :, 0].astype(np.float64)
    return sim.Observation(fixed, wrist, ft)


class TrajectoryWriter:
    """Streams (step_count, pose, twist, action, ft_reading, goal_flag) records."""

    def __init__(self, directory, env_config=None, meta=None):
        os.makedirs(directory, exist_ok=True)
        self._records = open(os.path.join(directory, "trajectory.jsonl"), "w")
        self._images = open(os.path.join(directory, "images.bin"), "wb")
        header = {"format": "trajectory", "version": TRAJECTORY_VERSION}
        if env_config is not None:
            header["env_config"] = env_config.to_dict()
        if meta:
            header["meta"] = meta
        self._records.write(json.dumps(header) + "\n")

    def write(self, state, obs, action, config):
        rec = {
            "step_count": state.step_count,
            "pose": list(state.pose),
            "twist": list(state.twist),
            "action": None if action is None else list(action),
            "ft_reading": [float(v) for v in obs.ft_history[-1]],
            "goal_flag": bool(sim.is_goal(state, config)),
        }
        self._records.write(json.dumps(rec) + "\n")
        self._images.write(encode_image(obs.fixed_image))
        self._images.write(encode_image(obs.wrist_image))

    def close(self):
        self._records.close()
        self._images.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trajectory(directory):
    """Returns (header, records, images) where images is a list of (fixed, wrist)."""
    with open(os.path.join(directory, "trajectory.jsonl")) as fh:
        header = json.loads(fh.readline())
        if header.get("version") != TRAJECTORY_VERSION:
            raise ValueError(f"unsupported trajectory version {header.get('version')}")
        records = [json.loads(line) for line in fh if line.strip()]
    images = []
    with open(os.path.join(directory, "images.bin"), "rb") as fh:
        for _ in records:
            images.append((_read_blob(fh), _read_blob(fh)))
    return header, records, images
