"""Scene generation, annotation container and RLE contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phraseground import data


def _spec(**kw):
    base = dict(seed=0, num_things=3, num_stuff=2, plural_probability=0.3,
                distractor_phrase_probability=0.62, image_size=128)
    base.update(kw)
    return data.SceneSpec(**base)


def test_determinism_bit_identical():
    a = data.generate_sample(_spec(seed=7))
    b = data.generate_sample(_spec(seed=7))
    assert np.array_equal(a.image, b.image)
    assert a.caption == b.caption
    for pa, pb in zip(a.phrases, b.phrases):
        assert pa.word_span == pb.word_span
        assert (pa.mask is None) == (pb.mask is None)
        if pa.mask is not None:
            assert np.array_equal(pa.mask, pb.mask)


def test_minimal_scene_two_grounded_singulars():
    s = data.generate_sample(_spec(seed=3, num_things=1, num_stuff=1,
                                   plural_probability=0.0,
                                   distractor_phrase_probability=0.0))
    assert len(s.phrases) == 2
    assert all(p.grounded and not p.is_plural for p in s.phrases)


def test_plural_masks_are_instance_unions():
    # all-plural things: each group mask must contain >= 2 disjoint components
    # worth of area, i.e. strictly more than one instance footprint
    s = data.generate_sample(_spec(seed=5, num_things=2, num_stuff=0,
                                   plural_probability=1.0,
                                   distractor_phrase_probability=0.0))
    assert all(p.is_plural for p in s.phrases)
    for p in s.phrases:
        assert p.mask.sum() >= 2 * 16  # at least two instances of >=16 px each


def test_plural_union_matches_pixel_union_oracle():
    # regenerate the scene's ownership by checking mask invariants instead:
    # pixels of one phrase never appear in another phrase's mask
    s = data.generate_sample(_spec(seed=11, plural_probability=1.0))
    grounded = [p for p in s.phrases if p.grounded]
    stack = np.stack([p.mask for p in grounded])
    assert (stack.sum(axis=0) <= 1).all()  # visibility partition, no double ownership


def test_mask_area_and_bounds_invariants():
    for seed in range(30):
        s = data.generate_sample(_spec(seed=seed))
        H, W, _ = s.image.shape
        for p in s.phrases:
            if p.grounded:
                assert p.mask.shape == (H, W)
                assert p.mask.sum() >= 4
                assert set(np.unique(p.mask)) <= {0, 1}


def test_word_spans_disjoint_and_in_range():
    for seed in range(20):
        s = data.generate_sample(_spec(seed=seed))
        M = len(s.caption)
        taken = np.zeros(M, dtype=bool)
        for p in s.phrases:
            a, b = p.word_span
            assert 0 <= a < b <= M
            assert not taken[a:b].any()
            taken[a:b] = True


def test_corpus_phrase_statistics_match_targets():
    samples = [data.generate_sample(_spec(seed=i)) for i in range(1000)]
    n_phrases = np.mean([len(s.phrases) for s in samples])
    n_grounded = np.mean([sum(p.grounded for p in s.phrases) for s in samples])
    assert abs(n_phrases - 11.3) <= 1.13
    assert abs(n_grounded - 5.1) <= 0.51


def test_generation_error_when_overfull():
    with pytest.raises(data.GenerationError):
        data.generate_sample(_spec(num_things=20))
    with pytest.raises(data.GenerationError):
        data.generate_sample(_spec(num_things=8, image_size=32))


def test_canvas_must_be_multiple_of_32():
    with pytest.raises(ValueError):
        data.generate_sample(_spec(image_size=100))


# ---------------------------------------------------------------------------
# RLE


def test_rle_round_trip_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        mask = (rng.random((13, 17)) > 0.5).astype(np.uint8)
        rle = data.rle_encode(mask)
        assert sum(rle[1::2]) == mask.size
        back = data.rle_decode(rle, mask.shape)
        assert np.array_equal(back, mask)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=200))
def test_rle_round_trip_property(bits):
    mask = np.asarray(bits, dtype=np.uint8).reshape(1, -1)
    assert np.array_equal(data.rle_decode(data.rle_encode(mask), mask.shape), mask)


def test_rle_coverage_mismatch_rejected():
    with pytest.raises(data.AnnotationValidationError):
        data.rle_decode([1, 3], (2, 2))


# ---------------------------------------------------------------------------
# annotation container


def test_round_trip_bit_exact(tmp_path):
    corpus = data.generate_corpus(_spec(), 12, base_seed=50)
    path = str(tmp_path / "ann.json")
    data.save_annotations(corpus, path)
    loaded = data.load_annotations(path)
    assert len(loaded) == len(corpus)
    for a, b in zip(corpus, loaded):
        assert np.array_equal(a.image, b.image)
        assert a.caption == b.caption
        for pa, pb in zip(a.phrases, b.phrases):
            assert pa.word_span == pb.word_span
            assert pa.category_id == pb.category_id
            assert pa.grounded == pb.grounded
            assert pa.is_plural == pb.is_plural
            if pa.mask is not None:
                assert np.array_equal(pa.mask, pb.mask)


def test_save_load_idempotent(tmp_path):
    corpus = data.generate_corpus(_spec(), 3, base_seed=9)
    p1 = str(tmp_path / "a.json")
    p2 = str(tmp_path / "b.json")
    data.save_annotations(corpus, p1)
    data.save_annotations(data.load_annotations(p1), p2)
    assert open(p1).read() == open(p2).read()


def test_empty_corpus_round_trip(tmp_path):
    path = str(tmp_path / "empty.json")
    data.save_annotations([], path)
    assert data.load_annotations(path) == []


def test_schema_violation_reports_field_path(tmp_path):
    import json

    corpus = data.generate_corpus(_spec(), 1, base_seed=1)
    path = str(tmp_path / "ann.json")
    data.save_annotations(corpus, path)
    payload = json.load(open(path))
    del payload["samples"][0]["phrases"][0]["grounded"]
    json.dump(payload, open(path, "w"))
    with pytest.raises(data.AnnotationFormatError, match=r"\$\.samples\[0\]\.phrases\[0\]"):
        data.load_annotations(path)


def test_span_out_of_range_rejected(tmp_path):
    import json

    corpus = data.generate_corpus(_spec(), 1, base_seed=2)
    path = str(tmp_path / "ann.json")
    data.save_annotations(corpus, path)
    payload = json.load(open(path))
    payload["samples"][0]["phrases"][0]["span"] = [0, 10_000]
    json.dump(payload, open(path, "w"))
    with pytest.raises(data.AnnotationValidationError):
        data.load_annotations(path)


def test_category_table_partition():
    table = data.category_table()
    assert len(table) == data.NUM_CATEGORIES
    assert sum(c["is_thing"] for c in table) == 6
    assert sum(not c["is_thing"] for c in table) == 4
