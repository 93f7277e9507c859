import numpy as np
import pytest

from sdacd.core import (
    ALL_TAGS, BiTemporalSample, ChangeMask, DomainTag, Image, PairSet, RangeTag,
    binarize, canonical_tags, denormalize_image, normalize_image, to_uint8,
)
from sdacd.errors import ConfigError, IngestionError, ShapeError


def test_binarize_uniform_and_boundary():
    assert binarize(np.full((3, 3), 0.7)).values.all()
    assert binarize(np.full((3, 3), 0.5), 0.5).values.all()


def test_binarize_mixed():
    out = binarize(np.array([[0.2, 0.9], [0.5, 0.49]]), 0.5).values
    assert out.tolist() == [[0, 1], [1, 0]]


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
def test_binarize_rejects_threshold(t):
    with pytest.raises(ConfigError):
        binarize(np.zeros((2, 2)), t)


def test_normalize_endpoints():
    out = normalize_image(np.array([[[0.0], [255.0], [127.5]]])).values.ravel()
    np.testing.assert_allclose(out, [-1.0, 1.0, 0.0], atol=1e-7)


def test_normalize_rejects_out_of_range():
    with pytest.raises(IngestionError):
        normalize_image(np.array([[[256.0]]]))


def test_denormalize_roundtrip():
    raw = np.arange(256, dtype=np.float64).reshape(16, 16, 1)
    assert (to_uint8(normalize_image(raw)) == raw.astype(np.uint8)).all()
    assert denormalize_image(normalize_image(raw)).range_tag is RangeTag.RAW_0_255


def test_image_is_read_only():
    img = Image(np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        img.values[0, 0, 0] = 1


def test_image_range_enforced():
    with pytest.raises(IngestionError):
        Image(np.full((2, 2, 1), 1.5))
    with pytest.raises(IngestionError):
        Image(np.full((2, 2, 1), np.nan))


def test_mask_values_enforced():
    with pytest.raises(IngestionError):
        ChangeMask(np.full((2, 2), 2))


def test_sample_shape_mismatch():
    with pytest.raises(ShapeError):
        BiTemporalSample(Image(np.zeros((4, 4, 3))), Image(np.zeros((4, 5, 3))), ChangeMask(np.zeros((4, 4))))


def test_canonical_tags_order_and_empty():
    tags = canonical_tags(["post_domain", DomainTag.ORIGINAL, "post_domain"])
    assert tags == (DomainTag.ORIGINAL, DomainTag.POST_DOMAIN)
    assert [t.index for t in ALL_TAGS] == [0, 1, 2]
    with pytest.raises(ConfigError):
        canonical_tags([])


def test_pair_set_orders_tags():
    img = Image(np.zeros((4, 4, 3)))
    ps = PairSet({DomainTag.POST_DOMAIN: (img, img), DomainTag.ORIGINAL: (img, img)}, ChangeMask(np.zeros((4, 4))))
    assert ps.tags == (DomainTag.ORIGINAL, DomainTag.POST_DOMAIN)
    assert len(ps) == 2
