import json

import numpy as np
import pytest

from physrelight import dataset, synth
from physrelight.dataset import FrameStore, ManifestError


def test_manifest_roundtrip_and_validation(tmp_path, rig):
    from physrelight.lighting import LightSet

    lights = LightSet(list(rig)[:4], [0, 1, 2, 3])
    path = synth.generate_dataset(1, lights, tmp_path, seeds=[9], resolution=16)
    man = dataset.read_manifest(path)
    assert man["format"] == "physrelight-manifest/1" and man["kind"] == "oracle"
    dataset.write_manifest(man, tmp_path / "copy.json")
    assert dataset.read_manifest(tmp_path / "copy.json") == man
    bad = dict(man, scenes=[])
    with pytest.raises(ManifestError):
        dataset.write_manifest(bad, tmp_path / "bad.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ManifestError):
        dataset.read_manifest(tmp_path / "broken.json")
    (tmp_path / "wrong.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ManifestError):
        dataset.read_manifest(tmp_path / "wrong.json")


def test_store_from_manifest_matches_render(tmp_path, rig):
    from physrelight.lighting import LightSet

    lights = LightSet(list(rig)[:4], [0, 1, 2, 3])
    path = synth.generate_dataset(2, lights, tmp_path, seeds=[4, 5], resolution=16)
    disk = FrameStore.from_manifest(path)
    mem = FrameStore.from_scenes([synth.build_scene(s, resolution=16) for s in (4, 5)], lights)
    assert len(disk) == 2 and disk.n_frames == 8
    for a, b in zip(disk.scenes, mem.scenes):
        assert a.seed == b.seed
        for name in ("albedo", "normals", "images", "visibility", "residual"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        # the light file keeps 9 significant digits
        for la, lb in zip(a.lights, b.lights):
            np.testing.assert_allclose(la.direction, lb.direction, atol=1e-8)


def test_split(tiny_store):
    tr, va = tiny_store.split(2)
    assert len(tr) == 3 and len(va) == 2
    assert [s.seed for s in va.scenes] == [3, 4]
    for n in (0, 5):
        with pytest.raises(ValueError):
            tiny_store.split(n)


def test_empty_store():
    with pytest.raises(ValueError):
        FrameStore([])
