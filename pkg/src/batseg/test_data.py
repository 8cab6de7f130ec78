import math

import numpy as np
from pytest import mark, raises

from .config import SyntheticSpec
from .data import (
    LesionShape,
    Sample,
    augment,
    draw_hair,
    generate_dataset,
    generate_sample,
    split,
)
from .errors import ContractError
from .keypatch import boundary_pixels


def ellipse_mask(shape: LesionShape, side: int) -> np.ndarray:
    out = np.zeros((side, side), dtype=np.uint8)
    cos, sin = math.cos(shape.angle), math.sin(shape.angle)
    for r in range(side):
        for c in range(side):
            dy, dx = r - shape.center[0], c - shape.center[1]
            u = (dx * cos + dy * sin) / shape.axes[0]
            v = (-dx * sin + dy * cos) / shape.axes[1]
            out[r, c] = u * u + v * v <= 1
    return out


def test_deterministic():
    spec = SyntheticSpec(seed=7, count=3, hair_density=2, boundary_roughness=0.3)
    a, b = generate_sample(spec, 2), generate_sample(spec, 2)
    assert a == b
    assert a.image.tobytes() == b.image.tobytes()
    assert a != generate_sample(spec, 1)


def test_independent_of_count():
    a = generate_sample(SyntheticSpec(seed=3, count=2), 1)
    b = generate_sample(SyntheticSpec(seed=3, count=9), 1)
    assert a == b


def test_index_range():
    with raises(IndexError):
        generate_sample(SyntheticSpec(count=2), 2)


@mark.parametrize("seed", range(10))
def test_smooth_lesion_is_an_ellipse(seed):
    sample = generate_sample(SyntheticSpec(seed=seed, count=1), 0)
    assert not any(sample.shape.amplitudes)
    np.testing.assert_array_equal(sample.mask, ellipse_mask(sample.shape, 64))


@mark.parametrize("contrast", ["low", "medium", "high"])
@mark.parametrize("rough", [0.0, 0.5])
def test_mask_bounds(contrast, rough):
    spec = SyntheticSpec(seed=11, count=8, contrast=contrast, boundary_roughness=rough)
    for sample in generate_dataset(spec):
        assert sample.mask.dtype == np.uint8
        assert set(np.unique(sample.mask)) <= {0, 1}
        assert 0.02 <= sample.coverage <= 0.70
        assert boundary_pixels(sample.mask).sum() >= 4
        assert sample.image.shape == (64, 64, 3)
        assert 0 <= sample.image.min() and sample.image.max() <= 1
        np.testing.assert_array_equal(np.round(sample.image * 255) / 255, sample.image)


def test_lesion_scale():
    spec = SyntheticSpec(seed=4, count=8)
    assert generate_sample(spec.model_copy(update={"lesion_scale": 1.0}), 0) == (
        generate_sample(spec, 0)
    )
    small = generate_dataset(spec.model_copy(update={"lesion_scale": 0.6}))
    large = generate_dataset(spec.model_copy(update={"lesion_scale": 1.75}))
    for sample in large:
        assert 0.02 <= sample.coverage <= 0.70
        assert all(0.12 * 64 * 1.75 <= a <= 0.35 * 64 * 1.75 for a in sample.shape.axes)
    assert np.mean([s.coverage for s in large]) > np.mean([s.coverage for s in small])


def test_lesion_darker_than_skin():
    sample = generate_sample(SyntheticSpec(seed=1, contrast="high"), 0)
    gray = sample.image.mean(axis=-1)
    assert gray[sample.mask == 1].mean() < gray[sample.mask == 0].mean() - 0.2


def test_hair_only_adds_strokes():
    clean = generate_sample(SyntheticSpec(seed=4, hair_density=0), 0)
    hairy = generate_sample(SyntheticSpec(seed=4, hair_density=5), 0)
    np.testing.assert_array_equal(clean.mask, hairy.mask)
    changed = (clean.image != hairy.image).any(axis=-1)
    assert changed.any()
    assert (hairy.image[changed] <= 0.2 + 1e-12).all()


def test_no_hair_leaves_image_untouched():
    image = np.random.default_rng(0).random((16, 16, 3))
    np.testing.assert_array_equal(draw_hair(image, 0, np.random.default_rng(1)), image)


def test_sample_shapes_must_agree():
    with raises(ContractError):
        Sample(np.zeros((8, 8, 3)), np.zeros((8, 7), dtype=np.uint8), "x")


def test_augment():
    sample = generate_sample(SyntheticSpec(seed=2, boundary_roughness=0.2), 0)
    a = augment(sample, np.random.default_rng(0))
    b = augment(sample, np.random.default_rng(0))
    assert a == b
    assert a.id == sample.id
    assert a.image.shape == sample.image.shape
    assert set(np.unique(a.mask)) <= {0, 1}
    assert abs(a.coverage - sample.coverage) <= 0.35 * sample.coverage


def test_split():
    samples = generate_dataset(SyntheticSpec(seed=0, count=10))
    train, val = split(samples, 0.2, seed=3)
    assert len(train) == 8 and len(val) == 2
    assert sorted(s.id for s in train + val) == sorted(s.id for s in samples)
    assert split(samples, 0.2, seed=3) == (train, val)
    with raises(ContractError):
        split(samples, 1.0)
