import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cada.synthdata import (IDENTITY_AUGMENT, MASK_VALUES, AugmentConfig, DomainSpec, Geometry, PairLoader,
                            Sample, augment, generate, load_domains, load_sample, make_domains,
                            make_loaders, mask_cdr, read_manifest, render_mask, sample_geometry,
                            save_domains, save_sample, source_spec, target_spec)


def raster_oracle(geom: Geometry, size: int):
    """Per-pixel point-in-ellipse scan at pixel centres."""
    disc = cup = 0
    for y in range(size):
        for x in range(size):
            py, px = y + 0.5, x + 0.5
            in_disc = ((py - geom.cy) / geom.disc_ry) ** 2 + ((px - geom.cx) / geom.disc_rx) ** 2 <= 1
            in_cup = ((py - geom.cup_cy) / geom.cup_ry) ** 2 + ((px - geom.cup_cx) / geom.cup_rx) ** 2 <= 1
            if in_disc and in_cup:
                cup += 1
            elif in_disc:
                disc += 1
    return size * size - disc - cup, disc, cup


def test_generation_is_deterministic():
    spec = source_spec(3)
    a = generate(spec, 3, 32)
    b = generate(spec, 3, 32)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert np.array_equal(x.mask, y.mask)


def test_noisy_generation_is_deterministic_too():
    spec = target_spec(5)
    assert spec.noise_sigma > 0
    assert generate(spec, 1, 32)[0].image.tobytes() == generate(spec, 1, 32)[0].image.tobytes()


def test_index_addressing():
    spec = source_spec(2)
    full = generate(spec, 4, 32)
    tail = generate(spec, 2, 32, start=2)
    assert full[2].image.tobytes() == tail[0].image.tobytes()


def test_constructed_cdr():
    geom = Geometry(cy=32, cx=32, disc_ry=20, disc_rx=20, cup_cy=32, cup_cx=32, cup_ry=10, cup_rx=10)
    mask = render_mask(geom, 64)
    assert mask_cdr(mask) == 0.5


@pytest.mark.parametrize("idx", range(6))
def test_rasterization_oracle(idx):
    size = 32
    geom = sample_geometry(7, idx, size)
    counts = np.bincount(render_mask(geom, size).ravel(), minlength=3)
    assert tuple(counts) == raster_oracle(geom, size)


def test_cup_inside_disc_and_cdr_range():
    for s in generate(target_spec(4), 40, 64):
        assert set(np.unique(s.mask)) <= {0, 1, 2}
        cup = s.mask == 2
        disc = s.mask >= 1
        assert not (cup & ~disc).any()
        assert 0.25 <= s.true_cdr <= 0.85
        assert s.image.shape == (3, 64, 64)
        assert s.image.min() >= 0 and s.image.max() <= 1


def test_cdr_draw_is_uniform_in_range():
    size = 256
    vals = [sample_geometry(0, i, size).cup_ry / sample_geometry(0, i, size).disc_ry for i in range(400)]
    assert min(vals) >= 0.3 and max(vals) <= 0.8
    assert min(vals) < 0.35 and max(vals) > 0.75


def test_masks_ignore_photometry():
    a = generate(source_spec(1), 5, 32, geometry_seed=9)
    b = generate(target_spec(2), 5, 32, geometry_seed=9)
    for x, y in zip(a, b):
        assert np.array_equal(x.mask, y.mask)
        assert not np.array_equal(x.image, y.image)


def test_shift_zero_matches_source_photometry():
    tgt = target_spec(seed=0, shift=0.0)
    src = source_spec(seed=0)
    assert tgt == src
    a = generate(src, 2, 32)
    b = generate(tgt, 2, 32)
    assert a[0].image.tobytes() == b[0].image.tobytes()


def test_default_shift_values():
    t = target_spec(shift=1.0)
    assert t.gamma == pytest.approx(1.4) and t.noise_sigma == pytest.approx(0.02)
    assert t.palette != source_spec().palette
    s = source_spec()
    assert s.gamma == 1.0 and s.noise_sigma == 0.0


@pytest.mark.parametrize("bad", [dict(gamma=0.0), dict(noise_sigma=-0.1), dict(vessel_density=1.5),
                                 dict(palette=((0, 0, 0), (0, 0, 0), (0, 0, 2)))])
def test_invalid_spec(bad):
    with pytest.raises(ValueError):
        generate(DomainSpec(**bad), 1, 32)


def test_invalid_size_and_count():
    with pytest.raises(ValueError):
        generate(source_spec(), 1, 48)
    with pytest.raises(ValueError):
        generate(source_spec(), 0, 32)


# augmentation ---------------------------------------------------------------------------

def test_augment_reproducible_and_seed_dependent(rng):
    img = rng.uniform(size=(3, 16, 16))
    assert np.array_equal(augment(img, 5), augment(img, 5))
    assert not np.array_equal(augment(img, 5), augment(img, 6))


def test_augment_identity(rng):
    img = rng.uniform(size=(3, 16, 16))
    assert np.array_equal(augment(img, 1, IDENTITY_AUGMENT), img)


def test_augment_bounds_over_1000_seeds():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(3, 8, 8))
    img[0, 0, 0], img[0, 0, 1] = 0.0, 1.0
    for seed in range(1000):
        out = augment(img, seed)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_parameter_ranges():
    flat = np.full((3, 4, 4), 0.5)
    no_noise = AugmentConfig(noise_sigma=(0.0, 0.0))
    vals = [augment(flat, s, no_noise)[0, 0, 0] for s in range(300)]
    # 0.5 * [0.9, 1.1] + [-0.05, 0.05] lies in [0.4, 0.6]
    assert min(vals) >= 0.4 - 1e-12 and max(vals) <= 0.6 + 1e-12
    assert max(vals) - min(vals) > 0.1


def test_augment_batch_draws_per_image(rng):
    batch = np.repeat(rng.uniform(size=(1, 3, 8, 8)), 2, axis=0)
    out = augment(batch, 3)
    assert out.shape == batch.shape
    assert not np.array_equal(out[0], out[1])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), lo=st.floats(0, 1), hi=st.floats(0, 1))
def test_augment_stays_in_unit_interval(seed, lo, hi):
    img = np.linspace(min(lo, hi), max(lo, hi), 3 * 4 * 4).reshape(3, 4, 4)
    out = augment(img, seed)
    assert out.min() >= 0.0 and out.max() <= 1.0


# file IO --------------------------------------------------------------------------------

def test_png_round_trip(tmp_path):
    s = generate(target_spec(1), 1, 32)[0]
    save_sample(s, tmp_path / "a")
    back = load_sample(tmp_path / "a")
    assert np.array_equal(back.mask, s.mask)
    assert np.abs(back.image - s.image).max() <= 1 / 255 + 1e-12
    assert back.true_cdr == s.true_cdr
    assert back.meta["spec"] == s.meta["spec"]
    raw = np.asarray(Image.open(tmp_path / "a_mask.png"))
    assert set(np.unique(raw)) <= set(MASK_VALUES)


def test_bad_mask_value_rejected(tmp_path):
    s = generate(source_spec(), 1, 32)[0]
    save_sample(s, tmp_path / "b")
    raw = np.asarray(Image.open(tmp_path / "b_mask.png")).copy()
    raw[0, 0] = 77
    Image.fromarray(raw, mode="L").save(tmp_path / "b_mask.png")
    with pytest.raises(ValueError, match="77"):
        load_sample(tmp_path / "b")


def test_missing_file_rejected(tmp_path):
    with pytest.raises(OSError):
        load_sample(tmp_path / "nothing")


def test_domains_round_trip(tmp_path):
    data = make_domains(32, 4, 3, 2, seed=1)
    manifest = save_domains(data, tmp_path)
    entries = read_manifest(manifest)
    assert len(entries) == 9
    assert {e[:2] for e in entries} == {("train", "source"), ("train", "target"), ("test", "target")}
    back = load_domains(manifest)
    assert len(back.source) == 4 and len(back.target_train) == 3 and len(back.target_test) == 2
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(back.source, data.source))
    assert json.loads((tmp_path / "source_train/00000.json").read_text())["true_cdr"] == data.source[0].true_cdr


# loaders ----------------------------------------------------------------------------------

def _fake(n, tag):
    return [Sample(image=np.full((3, 2, 2), tag + i, dtype=float), mask=np.zeros((2, 2), int), true_cdr=0.0)
            for i in range(n)]


def test_epoch_covers_source_once():
    loader = PairLoader(_fake(12, 0), _fake(5, 100), 4, seed=0)
    seen = np.concatenate([b_s.indices for b_s, _ in loader.epoch(0)])
    assert sorted(seen.tolist()) == list(range(12))


def test_loader_batches_and_masks():
    for b_s, b_t in make_loaders(_fake(8, 0), _fake(8, 100), batch=4, seed=1, epochs=1):
        assert b_s.images.shape == (4, 3, 2, 2) and b_s.masks.shape == (4, 2, 2)
        assert b_t.masks is None and b_t.images.shape == (4, 3, 2, 2)


def test_loader_determinism_and_independence():
    src, tgt = _fake(8, 0), _fake(8, 100)
    run = lambda seed: [(a.indices.tolist(), b.indices.tolist())
                        for a, b in make_loaders(src, tgt, 4, seed, epochs=3)]
    assert run(4) == run(4)
    assert run(4) != run(5)
    pairs = run(4)
    assert any(s != t for s, t in pairs)  # domains are shuffled independently
    epochs = [pairs[i:i + 2] for i in range(0, 6, 2)]
    assert epochs[0] != epochs[1]


def test_target_stream_recycles_small_target():
    loader = PairLoader(_fake(12, 0), _fake(3, 100), 4, seed=0)
    idx = np.concatenate([b.indices for _, b in loader.epoch(0)])
    assert len(idx) == 12 and set(idx.tolist()) == {0, 1, 2}


def test_source_only_loader_has_no_target():
    assert all(b_t is None for _, b_t in make_loaders(_fake(4, 0), [], 2, 0, epochs=1))


def test_loader_errors():
    with pytest.raises(ValueError):
        PairLoader([], _fake(2, 0), 1, 0)
    with pytest.raises(ValueError):
        PairLoader(_fake(2, 0), [], 0, 0)
