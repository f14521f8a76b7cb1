import io
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from helpers import ref_percentile
from protoalign.localization import (
    ActivationBox,
    DegenerateMaskError,
    activation_box,
    binarize_percentile,
    bounding_box,
    mask_to_png,
    percentile,
    render_overlay,
    upscale_map,
)


def ref_bilinear(src, out_h, out_w):
    """Direct evaluation of the documented half-pixel kernel."""
    h, w = len(src), len(src[0])
    out = [[0.0] * out_w for _ in range(out_h)]

    def axis(i, n_in, n_out):
        u = max((i + 0.5) * n_in / n_out - 0.5, 0.0)
        a = math.floor(u)
        return a, min(a + 1, n_in - 1), u - a

    for i in range(out_h):
        r0, r1, tr = axis(i, h, out_h)
        for j in range(out_w):
            c0, c1, tc = axis(j, w, out_w)
            top = src[r0][c0] * (1 - tc) + src[r0][c1] * tc
            bot = src[r1][c0] * (1 - tc) + src[r1][c1] * tc
            out[i][j] = top * (1 - tr) + bot * tr
    return out


class TestUpscale:
    def test_constant(self):
        d = upscale_map(torch.full((3, 5), 0.7, dtype=torch.float64), 12, 20)
        assert bool((d == 0.7).all())

    def test_single_value(self):
        d = upscale_map(torch.tensor([[2.5]]), 7, 9)
        # w0 * a + w1 * a rounds in float32
        assert d.shape == (7, 9) and torch.allclose(d, torch.full((7, 9), 2.5), rtol=0, atol=1e-6)

    def test_two_by_two_columns(self):
        d = upscale_map(torch.tensor([[0.0, 1.0], [0.0, 1.0]], dtype=torch.float64), 4, 4)
        assert all(torch.equal(d[0], d[i]) for i in range(4))
        assert bool((d[0, 1:] >= d[0, :-1]).all())
        assert float(d.min()) >= 0 and float(d.max()) <= 1
        assert d[0].tolist() == pytest.approx([0.0, 0.25, 0.75, 1.0])

    def test_matches_kernel_formula(self):
        g = torch.Generator().manual_seed(0)
        for h, w, oh, ow in [(2, 3, 5, 7), (4, 4, 16, 16), (3, 1, 3, 4), (8, 8, 32, 32)]:
            s = torch.rand(h, w, generator=g, dtype=torch.float64)
            ref = ref_bilinear(s.tolist(), oh, ow)
            assert np.allclose(upscale_map(s, oh, ow).numpy(), np.array(ref), rtol=0, atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            upscale_map(torch.zeros(2, 2), 0, 4)
        with pytest.raises(ValueError):
            upscale_map(torch.zeros(4, 4), 2, 8)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_extrema_bounded_by_source(self, h, w, factor, seed):
        s = torch.randn(h, w, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        d = upscale_map(s, h * factor + 1, w * factor)
        assert float(d.min()) >= float(s.min()) - 1e-12
        assert float(d.max()) <= float(s.max()) + 1e-12


class TestPercentile:
    def test_matches_numpy_and_sort_oracle(self):
        g = torch.Generator().manual_seed(1)
        for _ in range(200):
            n = int(torch.randint(1, 60, (1,), generator=g))
            vals = torch.rand(1, n, generator=g, dtype=torch.float64)
            q = float(torch.rand(1, generator=g)) * 98 + 1
            got = float(percentile(vals, q))
            assert got == pytest.approx(ref_percentile(vals.flatten(), q), abs=1e-9)
            assert got == float(np.percentile(vals.numpy(), q))

    def test_q_range(self):
        with pytest.raises(ValueError):
            percentile(torch.zeros(2, 2), 100)


class TestBinarize:
    def test_constant_map_all_true(self):
        assert bool(binarize_percentile(torch.full((6, 6), 3.0)).all())

    def test_ten_percent_ones(self):
        d = torch.zeros(10, 10)
        d.view(-1)[torch.randperm(100, generator=torch.Generator().manual_seed(2))[:10]] = 1.0
        m = binarize_percentile(d)
        # the 90th percentile interpolates between 0 and 1 (0.1), so exactly the ones survive
        assert torch.equal(m, d == 1.0)

    def test_increasing_raster(self):
        for n_side in (4, 7, 10, 13):
            n = n_side * n_side
            d = torch.arange(n, dtype=torch.float64).reshape(n_side, n_side)
            m = binarize_percentile(d)
            assert int(m.sum()) == math.ceil(n / 10)
            assert bool(m.view(-1)[n - math.ceil(n / 10):].all())

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_upscaled_mask_never_empty(self, h, w, seed):
        s = torch.rand(h, w, generator=torch.Generator().manual_seed(seed))
        assert bool(binarize_percentile(upscale_map(s, 4 * h, 4 * w)).any())


class TestBoundingBox:
    def test_examples(self):
        m = torch.zeros(8, 9, dtype=torch.bool)
        m[3, 4] = True
        assert bounding_box(m) == ActivationBox(3, 4, 4, 5)
        assert bounding_box(torch.ones(5, 6, dtype=torch.bool)) == ActivationBox(0, 0, 5, 6)
        m = torch.zeros(8, 9, dtype=torch.bool)
        m[1, 1] = m[5, 7] = True
        assert bounding_box(m) == ActivationBox(1, 1, 6, 8)

    def test_empty_mask(self):
        with pytest.raises(DegenerateMaskError):
            bounding_box(torch.zeros(3, 3, dtype=torch.bool))

    def test_minimal_cover(self):
        g = torch.Generator().manual_seed(3)
        for _ in range(200):
            m = torch.rand(6, 7, generator=g) > 0.85
            if not m.any():
                continue
            b = bounding_box(m)
            inside = b.to_mask(6, 7)
            assert not bool((m & ~inside).any())
            # every edge row/column of the box touches the mask
            assert bool(m[b.row0].any() and m[b.row1 - 1].any())
            assert bool(m[:, b.col0].any() and m[:, b.col1 - 1].any())

    def test_box_validation_and_json(self):
        with pytest.raises(ValueError):
            ActivationBox(2, 2, 2, 3)
        b = ActivationBox(1, 2, 3, 5)
        assert json.loads(b.to_json()) == {"row0": 1, "col0": 2, "row1": 3, "col1": 5}
        assert ActivationBox.from_dict(b.to_dict()) == b
        assert b.area == 6

    def test_activation_box_pipeline(self):
        s = torch.zeros(4, 4)
        s[1, 2] = 5.0
        b = activation_box(s, 16, 16)
        dense = upscale_map(s, 16, 16)
        assert b == bounding_box(binarize_percentile(dense))
        r, c = divmod(int(torch.argmax(dense)), 16)
        assert b.row0 <= r < b.row1 and b.col0 <= c < b.col1


class TestOverlay:
    def setup_method(self):
        g = torch.Generator().manual_seed(4)
        self.x = torch.rand(3, 16, 20, generator=g)
        self.d = torch.rand(16, 20, generator=g)

    def test_deterministic(self, tmp_path):
        box = ActivationBox(2, 3, 9, 15)
        a = render_overlay(self.x, self.d, box, path=tmp_path / "o.png")
        b = render_overlay(self.x, self.d, box)
        assert a == b == (tmp_path / "o.png").read_bytes()

    def test_zero_alpha_is_input(self):
        png = render_overlay(self.x, self.d, alpha=0.0)
        got = np.asarray(Image.open(io.BytesIO(png)))
        want = np.clip(np.round(self.x.double().numpy().transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        assert np.array_equal(got, want)

    def test_box_drawn_inside_raster(self):
        box = ActivationBox(0, 0, 16, 20)
        png = render_overlay(self.x, self.d, box, alpha=0.0, box_color=(0, 255, 0))
        img = np.asarray(Image.open(io.BytesIO(png)))
        assert img.shape == (16, 20, 3)
        assert (img[0, :] == [0, 255, 0]).all() and (img[-1, :] == [0, 255, 0]).all()
        assert (img[:, 0] == [0, 255, 0]).all() and (img[:, -1] == [0, 255, 0]).all()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            render_overlay(self.x, torch.zeros(4, 4))

    def test_mask_png(self):
        m = torch.zeros(5, 6, dtype=torch.bool)
        m[1:3, 2:5] = True
        im = Image.open(io.BytesIO(mask_to_png(m)))
        assert im.mode == "1"
        assert np.array_equal(np.asarray(im), m.numpy())
