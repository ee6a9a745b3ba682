import numpy as np
import pytest

from deocc.errors import ValidationError
from deocc.sprites import (CATEGORIES, SHAPES, TEXTURES, SpriteSpec, draw_spec,
                           generate_sprite, parse_category, sprite_raster)


def flood_fill_connected(mask):
    """Independent 8-neighborhood BFS connectivity check."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return False
    seen = np.zeros_like(mask, dtype=bool)
    stack = [(int(ys[0]), int(xs[0]))]
    seen[ys[0], xs[0]] = True
    h, w = mask.shape
    while stack:
        y, x = stack.pop()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
    return bool((seen == mask.astype(bool)).all())


def test_fixed_seed_reproduces_sprite():
    a = generate_sprite(np.random.default_rng(123))
    b = generate_sprite(np.random.default_rng(123))
    assert a.category == b.category
    assert a.placement == b.placement
    assert np.array_equal(a.amodal_rgba.array, b.amodal_rgba.array)


def test_many_sprites_nonempty_and_connected():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        obj = generate_sprite(rng)
        mask = obj.amodal_mask().array
        assert mask.any()
        assert flood_fill_connected(mask)


def test_category_round_trips():
    rng = np.random.default_rng(6)
    for _ in range(200):
        spec = draw_spec(rng, (8, 20))
        shape, texture = parse_category(spec.category)
        assert (shape, texture) == (spec.shape, spec.texture)
    assert len(CATEGORIES) == len(SHAPES) * len(TEXTURES)
    for cat in CATEGORIES:
        parse_category(cat)


def test_unknown_category_rejected():
    with pytest.raises(ValidationError):
        parse_category("blob-fuzzy")


def test_sprite_raster_values_are_8bit_exact():
    rng = np.random.default_rng(9)
    for _ in range(20):
        spec = draw_spec(rng, (8, 24))
        rgba = sprite_raster(spec)
        assert np.array_equal(rgba, np.round(rgba * 255) / 255)
        assert np.isin(np.unique(rgba[:, :, 3]), (0.0, 1.0)).all()


def test_sprite_alpha_binary_and_in_bounds():
    rng = np.random.default_rng(10)
    for _ in range(50):
        obj = generate_sprite(rng, canvas_hw=(48, 48))
        alpha = obj.amodal_rgba.alpha()
        assert np.isin(np.unique(alpha), (0.0, 1.0)).all()
        # support never touches the outermost pixel ring (fully inside)
        assert not alpha[0, :].any() and not alpha[-1, :].any()
        assert not alpha[:, 0].any() and not alpha[:, -1].any()


def test_small_spec_size_rejected():
    with pytest.raises(ValidationError):
        SpriteSpec(shape="disc", texture="flat",
                   palette=((0, 0, 0), (1, 1, 1)), size=6)
