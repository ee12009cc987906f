import numpy as np
import pytest

from physrelight import lighting, synth


@pytest.fixture(scope="session")
def rig():
    return lighting.standard_rig()


@pytest.fixture(scope="session")
def scene():
    return synth.build_scene(3, resolution=64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sphere_scene(resolution=64, radius=0.8, k_s=0.0, alpha=1.0, color=(0.5, 0.5, 0.5)):
    mat = synth.Material(texture="constant", color0=color, color1=color, k_s=k_s, alpha=alpha)
    eye = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    prim = synth.Ellipsoid((0.0, 0.0, 0.0), (radius, radius, radius), eye, mat)
    cam = synth.Camera(resolution, resolution, 2.0 / resolution)
    return synth.SceneSpec((prim,), None, cam, 0)


@pytest.fixture(scope="session")
def tiny_store(rig):
    from physrelight.dataset import FrameStore
    from physrelight.lighting import LightSet

    lights = LightSet(list(rig)[::4], list(rig.ids)[::4])
    scenes = [synth.build_scene(s, resolution=32) for s in range(5)]
    return FrameStore.from_scenes(scenes, lights)


def tiny_config(**kw):
    from physrelight.learner.model import TrainConfig

    base = dict(epochs=1, batch_size=2, crop=16, base_channels=8, val_pairs=4, pairs_per_epoch=8)
    base.update(kw)
    return TrainConfig(**base)


# acceptance criteria report: number -> (passed, detail)
ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
