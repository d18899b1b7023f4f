import math

import numpy as np
import pytest

from oracles import laplace_direct

from forgecam.procedural import ProceduralConfig, make_procedural_image
from forgecam.synth import (AffineTransform, SynthConfig, SynthesisSkipped, TransformOutOfBounds,
                            apply_affine, blend_paste, diffusion_fill, feather_mask,
                            inpaint_diffusion, select_largest_mask, synth_copy_move, synth_inpaint)


def rect_mask(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), bool)
    m[y0:y1, x0:x1] = True
    return m


def noisy_image(seed, h=32, w=32):
    return np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def random_blob(rng, h, w, max_pixels):
    while True:
        cy, cx = rng.uniform(4, h - 4), rng.uniform(4, w - 4)
        a, b = rng.uniform(2, 9, size=2)
        yy, xx = np.mgrid[0:h, 0:w]
        m = ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1
        m &= rng.random((h, w)) < 0.97  # ragged holes
        if 0 < m.sum() <= max_pixels and not m.all():
            return m


# ---------------------------------------------------------------- mask selection

def test_select_largest_mask():
    masks = [rect_mask(20, 20, 0, 2, 0, 5), rect_mask(20, 20, 0, 10, 0, 20), rect_mask(20, 20, 0, 5, 0, 10)]
    idx, m = select_largest_mask(masks)
    assert idx == 1 and m.sum() == 200


def test_select_largest_mask_tie_and_errors():
    a, b = rect_mask(8, 8, 0, 2, 0, 2), rect_mask(8, 8, 4, 6, 4, 6)
    assert select_largest_mask([a, b])[0] == 0
    with pytest.raises(ValueError):
        select_largest_mask([])
    with pytest.raises(ValueError):
        select_largest_mask([np.zeros((4, 4), bool)])


def test_select_largest_mask_brute_force():
    rng = np.random.default_rng(5)
    masks = [rng.random((16, 16)) < rng.uniform(0.05, 0.9) for _ in range(20)]
    counts = []
    for m in masks:
        c = 0
        for v in m.ravel():
            c += int(v)
        counts.append(c)
    best = max(range(20), key=lambda i: (counts[i], -i))
    assert select_largest_mask(masks)[0] == best


# ---------------------------------------------------------------- affine warp

def test_identity_transform():
    img = noisy_image(0)
    m = rect_mask(32, 32, 8, 20, 5, 15)
    patch, warped = apply_affine(img, m, AffineTransform())
    np.testing.assert_array_equal(warped, m)
    np.testing.assert_array_equal(patch[m], img[m])
    assert not patch[~m].any()


def test_full_turn_is_identity_up_to_boundary():
    img = noisy_image(1)
    yy, xx = np.mgrid[0:32, 0:32]
    m = (yy - 15) ** 2 + (xx - 16) ** 2 <= 36
    _, warped = apply_affine(img, m, AffineTransform(rotation=360.0))
    from scipy import ndimage
    band = ndimage.binary_dilation(m) & ~ndimage.binary_erosion(m)
    assert not ((warped != m) & ~band).any()


def test_integer_translation_matches_shift():
    img = noisy_image(2)
    m = rect_mask(32, 32, 10, 18, 4, 12)
    patch, warped = apply_affine(img, m, AffineTransform(translate=(5, 0)))
    shifted = np.zeros_like(m)
    shifted[:, 5:] = m[:, :-5]
    np.testing.assert_array_equal(warped, shifted)
    np.testing.assert_array_equal(patch[10:18, 9:17], img[10:18, 4:12])


def test_out_of_bounds_signals_retry():
    m = rect_mask(32, 32, 10, 18, 4, 12)
    with pytest.raises(TransformOutOfBounds):
        apply_affine(noisy_image(3), m, AffineTransform(translate=(25, 0)))


def test_scale_bounds():
    with pytest.raises(ValueError):
        AffineTransform(scale=3.0)


# ---------------------------------------------------------------- blending

def test_blend_identities():
    bg, fg = noisy_image(4), noisy_image(5)
    m = rect_mask(32, 32, 5, 20, 5, 20)
    np.testing.assert_array_equal(blend_paste(bg, fg, np.zeros((32, 32))), bg)
    out = blend_paste(bg, fg, m.astype(float))
    np.testing.assert_array_equal(out[m], fg[m])
    np.testing.assert_array_equal(out[~m], bg[~m])


def test_blend_half():
    bg = np.full((1, 1, 3), 100, np.uint8)
    fg = np.full((1, 1, 3), 200, np.uint8)
    assert blend_paste(bg, fg, np.full((1, 1), 0.5))[0, 0, 0] == 150


def test_blend_rejects_bad_alpha():
    bg = noisy_image(6)
    with pytest.raises(ValueError):
        blend_paste(bg, bg, np.full((32, 32), 1.2))


def test_feather_ramp():
    m = rect_mask(20, 20, 2, 18, 2, 18)
    a = feather_mask(m, 0.95, 2)
    assert a[~m].max() == 0
    assert a[10, 10] == pytest.approx(0.95)
    assert a[2, 10] == pytest.approx(0.95 / 3)
    assert a[3, 10] == pytest.approx(0.95 * 2 / 3)


# ---------------------------------------------------------------- copy-move

def test_copy_move_deterministic():
    img, masks = make_procedural_image(11)
    a = synth_copy_move(img, masks, 99)
    b = synth_copy_move(img, masks, 99)
    assert a.forged_image.tobytes() == b.forged_image.tobytes()
    assert a.truth_mask.tobytes() == b.truth_mask.tobytes()
    assert a.provenance() == b.provenance()


def test_copy_move_constructed_translation():
    img = noisy_image(7, 64, 64)
    m = rect_mask(64, 64, 20, 30, 4, 20)
    cfg = SynthConfig(rotation_range=(0, 0), scale_range=(1, 1), translate=(32, 0),
                      alpha_interior=1.0, feather_px=0)
    rec = synth_copy_move(img, [m], 0, cfg)
    expected = img.copy()
    expected[20:30, 36:52] = img[20:30, 4:20]
    np.testing.assert_array_equal(rec.forged_image, expected)
    assert rec.provenance()["transform"] == {"rotation_deg": 0.0, "scale": 1.0, "dx": 32.0, "dy": 0.0}


def test_copy_move_property_sweep():
    cfg = SynthConfig()
    lo, hi = cfg.area_bounds
    done = 0
    for seed in range(500):
        img, masks = make_procedural_image(seed)
        try:
            rec = synth_copy_move(img, masks, seed, cfg)
        except SynthesisSkipped:
            continue
        done += 1
        frac = rec.truth_mask.mean()
        assert rec.truth_mask.any() and lo <= frac <= hi
        # changes confined to where alpha > 0, i.e. inside the truth mask
        changed = (rec.forged_image != img).any(axis=2)
        assert not (changed & ~rec.truth_mask).any()
        dx, dy = rec.transform.translate
        assert math.hypot(dx, dy) >= cfg.min_shift_frac * math.hypot(64, 64)
    assert done > 400


def test_copy_move_skips_without_admissible_mask():
    img = noisy_image(8)
    with pytest.raises(SynthesisSkipped, match="area"):
        synth_copy_move(img, [rect_mask(32, 32, 0, 1, 0, 1)], 0)


def test_copy_move_skips_after_rejections():
    img = noisy_image(9)
    m = rect_mask(32, 32, 0, 16, 0, 16)
    cfg = SynthConfig(translate=(30, 30), rotation_range=(0, 0), scale_range=(1, 1))
    with pytest.raises(SynthesisSkipped, match="consecutive"):
        synth_copy_move(img, [m], 0, cfg)


# ---------------------------------------------------------------- inpainting

def test_inpaint_constant_image():
    img = np.full((16, 16, 3), 77, np.uint8)
    out = inpaint_diffusion(img, rect_mask(16, 16, 4, 10, 4, 10))
    np.testing.assert_array_equal(out, img)


def test_inpaint_linear_ramp():
    img = np.zeros((1, 12), np.float64)
    img[0, 11] = 100
    m = np.zeros((1, 12), bool)
    m[0, 1:11] = True
    tol = 1e-6
    filled, iters = diffusion_fill(img, m, max_iters=100_000, tol=tol)
    ramp = np.linspace(0, 100, 12)
    assert np.abs(filled[0] - ramp).max() <= tol * iters


def test_inpaint_matches_direct_solve():
    rng = np.random.default_rng(21)
    img = rng.integers(0, 256, size=(40, 40, 3)).astype(np.uint8)
    m = random_blob(rng, 40, 40, 500)
    ref = laplace_direct(img, m)
    filled, _ = diffusion_fill(img, m, max_iters=50_000, tol=1e-4)
    assert np.abs(filled - ref)[m].max() < 0.5
    out = inpaint_diffusion(img, m, max_iters=50_000, tol=1e-4)
    assert np.abs(out.astype(float) - ref)[m].max() <= 0.5 + 1e-2


def test_inpaint_leaves_unmasked_and_rejects_full_mask():
    img = noisy_image(12)
    m = rect_mask(32, 32, 3, 9, 20, 30)
    out = inpaint_diffusion(img, m)
    np.testing.assert_array_equal(out[~m], img[~m])
    with pytest.raises(ValueError):
        inpaint_diffusion(img, np.ones((32, 32), bool))
    with pytest.raises(ValueError):
        inpaint_diffusion(img, np.zeros((32, 32), bool))


def test_inpaint_maximum_principle():
    from scipy import ndimage
    rng = np.random.default_rng(3)
    for _ in range(100):
        img = rng.integers(0, 256, size=(24, 24, 3)).astype(np.uint8)
        m = random_blob(rng, 24, 24, 200)
        out = inpaint_diffusion(img, m)
        ring = ndimage.binary_dilation(m) & ~m
        lo, hi = img[ring].min(axis=0), img[ring].max(axis=0)
        assert (out[m] >= lo).all() and (out[m] <= hi).all()


def test_synth_inpaint_deterministic_and_contract():
    img, masks = make_procedural_image(4)
    a = synth_inpaint(img, masks, 5)
    b = synth_inpaint(img, masks, 5)
    assert a.forged_image.tobytes() == b.forged_image.tobytes()
    np.testing.assert_array_equal(a.forged_image[~a.truth_mask], img[~a.truth_mask])
    assert a.forgery_kind == "inpaint" and a.provenance()["transform"] is None


def test_synth_inpaint_uniform_choice():
    img = np.full((64, 64, 3), 120, np.uint8)
    masks = [rect_mask(64, 64, 2, 12, 2, 12), rect_mask(64, 64, 30, 40, 30, 40),
             rect_mask(64, 64, 50, 60, 5, 15)]
    cfg = SynthConfig(inpaint_max_iters=1)
    counts = np.zeros(3)
    for seed in range(500):
        counts[synth_inpaint(img, masks, seed, cfg).mask_index] += 1
    np.testing.assert_allclose(counts / 500, 1 / 3, atol=0.05)


# ---------------------------------------------------------------- procedural scenes

def test_procedural_deterministic_and_in_bounds():
    a_img, a_masks = make_procedural_image(3)
    b_img, b_masks = make_procedural_image(3)
    assert a_img.tobytes() == b_img.tobytes()
    assert len(a_masks) == len(b_masks)
    for m, n in zip(a_masks, b_masks):
        np.testing.assert_array_equal(m, n)
        assert m.shape == (64, 64) and m.any()


def test_procedural_masks_disjoint():
    cfg = ProceduralConfig(size=32)
    for seed in range(1000):
        _, masks = make_procedural_image(seed, cfg)
        assert 1 <= len(masks) <= 4
        total = np.sum([m.astype(int) for m in masks], axis=0)
        assert total.max() <= 1
