import numpy as np
import pytest

from weakloc.model import ActionInstance, BoundingBox, Dataset, Track, Video
from weakloc.synth import SynthConfig, generate


def box_track(video_id, track_id, start, length, box=(0.0, 0.0, 10.0, 20.0)):
    return Track(video_id, track_id, start, np.tile(np.asarray(box, float), (length, 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(seed=3, num_videos=12, num_test_videos=4, num_actions=3, dim=8,
                      tracks_per_video=2, frames_per_video=160, instances_per_video=2,
                      distractor_fraction=0.0, min_length=24, max_length=64)
    return generate(cfg)


@pytest.fixture
def one_video_dataset():
    """One 48-frame video, one track of 6 tracklets, one instance on [16, 40)."""
    boxes = np.tile([0.0, 0.0, 10.0, 20.0], (48, 1))
    video = Video("v", 48, ((0, 24), (24, 48)))
    track = Track("v", "t0", 0, boxes)
    inst = ActionInstance("v", "v/i0", 2, 16, 40,
                          keyframes=((20, BoundingBox(0, 0, 10, 20)),),
                          boxes=boxes[16:40])
    return Dataset([video], [track], [inst], num_actions=3)
