import io
import struct

import numpy as np
import pytest

from dremlab import formats, scripted, sim


def test_image_header_layout():
    blob = formats.encode_image(np.zeros((2, 3, 3)))
    assert struct.unpack("<4H", blob[:8]) == (3, 2, 3, formats.UINT8)
    assert len(blob) == 8 + 2 * 3 * 3


def test_uint8_round_trip_on_quantized_grid(rng):
    img = np.round(rng.uniform(0, 1, (5, 4, 3)) * 255) / 255
    back, used = formats.decode_image(formats.encode_image(img))
    assert used == 8 + img.size
    np.testing.assert_allclose(back, img, atol=1e-7)


def test_rows_are_stored_top_first():
    img = np.zeros((2, 2, 1))
    img[0, 1] = 1.0
    payload = formats.encode_image(img)[8:]
    assert list(payload) == [0, 255, 0, 0]


def test_float32_round_trip(rng):
    a = rng.normal(size=(8, 3, 1)).astype(np.float32)
    back, used = formats.decode_image(formats.encode_image(a, formats.FLOAT32))
    assert used == 8 + 4 * a.size
    np.testing.assert_array_equal(back, a)


def test_unknown_tag_rejected():
    with pytest.raises(ValueError):
        formats.encode_image(np.zeros((2, 2)), 7)
    with pytest.raises(ValueError):
        formats.decode_image(struct.pack("<4H", 1, 1, 1, 9) + b"\x00")


def test_observation_stream_round_trip(env):
    s = sim.make_state((env.hole_center[0] + 12.0, 1.0, 0.0), env)
    obs = sim.observe(s, env)
    for _ in range(3):
        s = sim.step(s, sim.Action((1.0, -5.0, 0.0)), env)
        obs = sim.observe(s, env, obs)
    buf = io.BytesIO()
    formats.write_observation(buf, obs)
    buf.seek(0)
    back = formats.read_observation(buf)
    np.testing.assert_allclose(back.fixed_image, obs.fixed_image, atol=1e-7)
    np.testing.assert_allclose(back.wrist_image, obs.wrist_image, atol=1e-7)
    np.testing.assert_allclose(back.ft_history, obs.ft_history, rtol=1e-6)


def test_trajectory_dump_round_trip(tmp_path, env):
    states, obs, actions = scripted.rollout(env, 0, lambda st, t: scripted.expert_command(st, env), 10)
    with formats.TrajectoryWriter(tmp_path, env, meta={"kind": "direct"}) as w:
        for s, o, a in zip(states, obs, actions + [None]):
            w.write(s, o, a, env)
    header, records, images = formats.read_trajectory(tmp_path)
    assert header["meta"] == {"kind": "direct"}
    assert sim.EnvConfig.from_dict(header["env_config"]) == env
    assert len(records) == len(images) == len(states)
    assert [r["step_count"] for r in records] == list(range(len(states)))
    assert records[-1]["action"] is None
    np.testing.assert_allclose(images[-1][0], obs[-1].fixed_image, atol=1e-7)


def test_trajectory_version_checked(tmp_path):
    (tmp_path / "trajectory.jsonl").write_text('{"format": "trajectory", "version": 99}\n')
    (tmp_path / "images.bin").write_bytes(b"")
    with pytest.raises(ValueError):
        formats.read_trajectory(tmp_path)
