import numpy as np
import pytest
import torch

from stdgs.types import CameraModel, Frame, FrameSequence, EventStream
from stdgs.simulate import SceneScript, Sprite, ScriptRenderer, simulate_events

torch.set_num_threads(1)


@pytest.fixture
def identity_camera():
    return CameraModel(fx=64.0, fy=64.0, cx=32.0, cy=32.0,
                      R=np.eye(3), T=np.zeros(3))


@pytest.fixture
def small_stream():
    ev = np.array([
        [100, 3, 4, 1],
        [200, 3, 4, -1],
        [300, 10, 2, 1],
        [900, 0, 0, 1],
    ], dtype=np.int64)
    return EventStream(ev, 16, 8, 0.2)


def make_frames(n=3, w=16, h=12, step_us=50_000, seed=0):
    rng = np.random.RandomState(seed)
    cam = CameraModel(fx=float(w), fy=float(w), cx=w / 2.0, cy=h / 2.0,
                      R=np.eye(3), T=np.zeros(3))
    frames = [Frame(rng.uniform(0, 1, size=(h, w, 3)), i * step_us, cam)
              for i in range(n)]
    return FrameSequence(frames, w, h)


@pytest.fixture
def random_frames():
    return make_frames()


def moving_sprite_script(w=64, h=64, dur=400_000, size=16,
                         start=(20.0, 24.0), vel=(40.0, 20.0),
                         bg=None, color=(0.95, 0.95, 0.95), seed=0):
    """Solid sprite on a background, constant velocity in px/s."""
    end = (start[0] + vel[0] * dur / 1e6, start[1] + vel[1] * dur / 1e6)
    return SceneScript(
        width=w, height=h, duration_us=dur,
        background=bg or {"kind": "solid", "color": [0.45, 0.45, 0.45]},
        sprites=[Sprite({"kind": "solid", "color": list(color)}, size,
                        [(0, start[0], start[1]), (dur, end[0], end[1])])],
        seed=seed,
    )
