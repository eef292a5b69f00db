"""Geometric prompt tests: Fourier coordinates, point/box/mask embeddings,
the silent fallback, and the token count law."""

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from promptseg.errors import ConfigurationError, PromptError, ShapeError
from promptseg.prompts import (
    BoxPrompt,
    PointLabel,
    PointPrompt,
    PromptConfig,
    PromptEncoder,
)


def make_encoder(seed=0, **overrides) -> PromptEncoder:
    cfg = PromptConfig(fourier_seed=seed, **overrides)
    torch.manual_seed(100 + seed)
    return PromptEncoder(cfg)


# ---------------------------------------------------------------------------
# config and prompt validation

def test_config_rejects_odd_token_dim():
    with pytest.raises(ConfigurationError):
        PromptConfig(token_dim=33)


def test_config_rejects_non_power_of_two_patch():
    with pytest.raises(ConfigurationError):
        PromptConfig(image_size=60, patch_size=6)


def test_box_degenerate_raises():
    with pytest.raises(PromptError):
        BoxPrompt(5, 5, 5, 9)
    with pytest.raises(PromptError):
        BoxPrompt(2, 8, 6, 8)
    with pytest.raises(PromptError):
        BoxPrompt(x0=9, y0=1, x1=3, y1=5)


def test_point_rejects_non_finite():
    with pytest.raises(PromptError):
        PointPrompt(float("nan"), 3.0)


def test_point_label_coercion():
    p = PointPrompt(1.0, 2.0, "negative")
    assert p.label is PointLabel.NEGATIVE


# ---------------------------------------------------------------------------
# positional encoding

def test_positional_encode_deterministic_across_instances():
    a, b = make_encoder(seed=4), make_encoder(seed=4)
    coords = torch.tensor([[3.0, 7.0], [60.0, 1.0]])
    assert torch.equal(a.positional_encode(coords), b.positional_encode(coords))


def test_positional_encode_differs_across_seeds():
    a, b = make_encoder(seed=4), make_encoder(seed=5)
    coords = torch.tensor([[3.0, 7.0]])
    assert not torch.equal(a.positional_encode(coords), b.positional_encode(coords))


def test_positional_encode_shape_any_n():
    enc = make_encoder()
    for n in (0, 1, 5):
        out = enc.positional_encode(torch.rand(n, 2) * 64)
        assert out.shape == (n, 32)


def test_positional_encode_distinct_for_distinct_coords():
    enc = make_encoder()
    gen = torch.Generator().manual_seed(2)
    for _ in range(100):
        pair = torch.rand(2, 2, generator=gen) * 64
        if torch.equal(pair[0], pair[1]):
            continue
        out = enc.positional_encode(pair)
        assert not torch.allclose(out[0], out[1], atol=1e-9)


def test_positional_encode_clamps_and_counts():
    enc = make_encoder()
    assert enc.clamp_count == 0
    out_of_bounds = torch.tensor([[-5.0, 12.0], [10.0, 90.0]])
    out = enc.positional_encode(out_of_bounds)
    assert enc.clamp_count == 2
    clamped = torch.tensor([[0.0, 12.0], [10.0, 64.0]])
    assert torch.equal(out, enc.positional_encode(clamped))
    assert enc.clamp_count == 2  # in-bounds call does not bump the counter


# ---------------------------------------------------------------------------
# points

def test_embed_points_count():
    enc = make_encoder()
    pts = [PointPrompt(3, 4), PointPrompt(10, 20, "negative"),
           PointPrompt(0, 0, "invalid")]
    assert enc.embed_points(pts).shape == (3, 32)


def test_same_coord_same_label_identical():
    enc = make_encoder()
    t = enc.embed_points([PointPrompt(9, 9), PointPrompt(9, 9)])
    assert torch.equal(t[0], t[1])


def test_label_changes_token_by_stored_embedding_difference():
    enc = make_encoder()
    t = enc.embed_points([PointPrompt(9, 9, "positive"),
                          PointPrompt(9, 9, "negative")])
    want = enc.point_label_embed.weight[0] - enc.point_label_embed.weight[1]
    assert torch.allclose(t[0] - t[1], want, atol=1e-6)


def test_invalid_point_ignores_coordinates():
    enc = make_encoder()
    a = enc.embed_points([PointPrompt(1, 1, "invalid")])
    b = enc.embed_points([PointPrompt(50, 63, "invalid")])
    assert torch.equal(a, b)
    assert torch.equal(a[0], enc.invalid_token)


# ---------------------------------------------------------------------------
# boxes

def test_embed_box_two_tokens():
    enc = make_encoder()
    assert enc.embed_box(BoxPrompt(4, 4, 20, 30)).shape == (2, 32)


def test_box_corner_dependence():
    enc = make_encoder()
    a = enc.embed_box(BoxPrompt(0, 0, 1, 1))
    b = enc.embed_box(BoxPrompt(0, 0, 2, 2))
    assert torch.equal(a[0], b[0])  # shared top-left corner
    assert not torch.equal(a[1], b[1])  # different bottom-right corner


# ---------------------------------------------------------------------------
# mask prompt

def test_embed_mask_shape():
    enc = make_encoder()
    out = enc.embed_mask(torch.zeros(64, 64))
    assert out.shape == (32, 8, 8)
    batched = enc.embed_mask(torch.zeros(3, 1, 64, 64))
    assert batched.shape == (3, 32, 8, 8)


def test_embed_mask_downsampling_factor_matches_patch():
    for size, patch in ((64, 8), (32, 4), (64, 16)):
        enc = make_encoder(image_size=size, patch_size=patch)
        out = enc.embed_mask(torch.zeros(size, size))
        assert out.shape[-1] == size // patch


def test_embed_mask_rejects_wrong_size():
    enc = make_encoder()
    with pytest.raises(ShapeError):
        enc.embed_mask(torch.zeros(32, 32))


def test_zero_mask_zero_bias_gives_zero_dense():
    enc = make_encoder()
    with torch.no_grad():
        for name, p in enc.mask_downsampler.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    out = enc.embed_mask(torch.zeros(64, 64))
    assert torch.equal(out, torch.zeros_like(out))


# ---------------------------------------------------------------------------
# silent embedding

def test_silent_embedding_deterministic_k1():
    enc = make_encoder()
    a = enc.silent_embedding()
    b = enc.silent_embedding()
    assert a.sparse.shape == (1, 32)
    assert a.dense.shape == (32, 8, 8)
    assert torch.equal(a.sparse, b.sparse)
    assert torch.equal(a.dense, b.dense)
    # constant over the grid
    assert torch.equal(a.dense[:, 0, 0], a.dense[:, 5, 3])


# ---------------------------------------------------------------------------
# token count law

def bundle_token_count(enc, n_points, n_boxes):
    pts = [PointPrompt(5 + i, 6 + i) for i in range(n_points)]
    boxes = [BoxPrompt(i, i, i + 5, i + 7) for i in range(n_boxes)]
    return enc.encode(points=pts, boxes=boxes).sparse.shape[0]


@settings(max_examples=40, deadline=None)
@given(n_points=st.integers(0, 6), n_boxes=st.integers(0, 3))
def test_token_count_law(n_points, n_boxes):
    enc = make_encoder()
    k = bundle_token_count(enc, n_points, n_boxes)
    if n_points + n_boxes == 0:
        assert k == 1  # silent token
    else:
        assert k == n_points + 2 * n_boxes


def test_encode_uses_silent_dense_without_mask():
    enc = make_encoder()
    out = enc.encode(points=[PointPrompt(3, 3)])
    assert torch.equal(out.dense, enc.silent_embedding().dense)


def test_encode_uses_mask_dense_when_given():
    enc = make_encoder()
    mask = torch.zeros(64, 64)
    mask[10:30, 10:30] = 1
    out = enc.encode(boxes=[BoxPrompt(10, 10, 30, 30)], mask=mask)
    assert torch.equal(out.dense, enc.embed_mask(mask))
    assert out.sparse.shape == (2, 32)


def test_batch_encode_uniform_k():
    enc = make_encoder()
    bundles = [([PointPrompt(3, 3)], None, None), ([PointPrompt(9, 9)], None, None)]
    sparse, dense = enc.batch_encode(bundles)
    assert sparse.shape == (2, 1, 32)
    assert dense.shape == (2, 32, 8, 8)
    mixed = [([PointPrompt(3, 3)], None, None), (None, [BoxPrompt(1, 1, 5, 5)], None)]
    with pytest.raises(ShapeError):
        enc.batch_encode(mixed)
