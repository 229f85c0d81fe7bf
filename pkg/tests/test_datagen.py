import numpy as np
import pytest
from pydantic import ValidationError
from scipy import ndimage

from bioslim.datagen import PhantomSpec, Task, generate, load_dataset, write_dataset
from bioslim.errors import PlacementFailure
from bioslim.metrics import pearson
from bioslim.tensor import DType


def test_spec_defaults_follow_task():
    spec = PhantomSpec(task=Task.INSTANCE2D)
    assert spec.shape == [1, 1, 256, 256]
    assert (spec.count_min, spec.count_max) == (8, 16)
    assert PhantomSpec(task="denoise3d").spatial == (32, 64, 64)


@pytest.mark.parametrize(
    "fields",
    [
        {"task": "instance2d", "shape": [1, 1, 8, 32, 32]},
        {"task": "denoise3d", "shape": [2, 1, 8, 8, 8]},
        {"task": "semantic3d", "count_min": 5, "count_max": 2},
        {"task": "denoise3d", "radius": [3.0, 1.0]},
    ],
)
def test_spec_validation(fields):
    with pytest.raises(ValidationError):
        PhantomSpec(**fields)


def test_zero_noise_denoise_pair_is_clean():
    spec = PhantomSpec(task=Task.DENOISE3D, shape=[1, 1, 8, 16, 16], noise_sigma=0.0, seed=3)
    ((noisy, clean),) = generate(spec, 1)
    assert noisy == clean
    assert noisy.dtype is DType.F32


def test_generation_is_deterministic():
    for task in Task:
        spec = PhantomSpec(task=task, shape=[1, 1, 32, 32] if task is Task.INSTANCE2D else [1, 1, 8, 16, 16],
                           radius=(3.0, 5.0), count_min=2, count_max=3, seed=7)
        first, second = generate(spec, 2), generate(spec, 2)
        assert all(a == c and b == d for (a, b), (c, d) in zip(first, second))
        assert first[0][0] != first[1][0]


@pytest.mark.slow
def test_denoise_noise_level_band():
    scores = [
        pearson(noisy, clean)
        for noisy, clean in generate(PhantomSpec(task=Task.DENOISE3D, noise_sigma=1.0), 20)
    ]
    assert 0.3 <= min(scores) and max(scores) <= 0.9


def test_instances_have_requested_count_and_stay_apart():
    spec = PhantomSpec(task=Task.INSTANCE2D, count_min=3, count_max=3, seed=1)
    ((image, labels),) = generate(spec, 1)
    assert labels.dtype is DType.I32
    lab = labels.array[0, 0]
    ids = sorted(set(np.unique(lab)) - {0})
    assert ids == [1, 2, 3]
    for i in ids:
        grown = ndimage.binary_dilation(lab == i)
        assert set(np.unique(lab[grown])) <= {0, i}
    assert not lab[0].any() and not lab[-1].any()
    assert image.shape == labels.shape


def test_crowded_instances_fail_to_place():
    spec = PhantomSpec(task=Task.INSTANCE2D, shape=[1, 1, 16, 16], radius=(6.0, 6.0), count_min=5, count_max=5)
    with pytest.raises(PlacementFailure):
        generate(spec, 1)


def test_semantic_target_is_binary():
    spec = PhantomSpec(task=Task.SEMANTIC3D, shape=[1, 1, 16, 32, 32], seed=2)
    ((image, mask),) = generate(spec, 1)
    assert set(np.unique(mask.array)) <= {0.0, 1.0}
    assert mask.array.any()
    assert image.shape == mask.shape


def test_labelfree_target_is_bounded_and_normalized():
    spec = PhantomSpec(task=Task.LABELFREE3D, shape=[1, 1, 16, 32, 32], seed=4)
    ((texture, target),) = generate(spec, 1)
    assert np.abs(target.array).max() <= 1.0
    assert texture.array.std() == pytest.approx(1.0, rel=1e-3)


def test_dataset_round_trip(tmp_path):
    spec = PhantomSpec(task=Task.DENOISE3D, shape=[1, 1, 4, 8, 8], seed=5)
    pairs = generate(spec, 3)
    write_dataset(tmp_path / "ds", pairs, spec)
    loaded, loaded_spec = load_dataset(tmp_path / "ds")
    assert loaded_spec == spec
    assert all(a == c and b == d for (a, b), (c, d) in zip(pairs, loaded))
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "empty")
