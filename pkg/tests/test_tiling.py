import hypothesis.strategies as st
import pytest
import torch
from hypothesis import given, settings

from madpan.tiling import (
    PanoramaSpec,
    TilingError,
    ViewLayout,
    ViewStack,
    merge,
    overlap_counts,
    plan_views,
    split,
)


def spec_for(h_px, w_px, L, stride, scale=4, channels=4):
    return PanoramaSpec(
        image_height=h_px, image_width=w_px, latent_scale=scale,
        latent_channels=channels, view_size=L, stride=stride,
    )


class TestPanoramaSpec:
    def test_latent_shape(self):
        spec = spec_for(512, 3072, 64, 16, scale=8)
        assert spec.latent_shape == (64, 384)

    def test_rejects_indivisible_dims(self):
        with pytest.raises(TilingError):
            spec_for(510, 3072, 64, 16, scale=8)

    def test_rejects_bad_stride(self):
        with pytest.raises(TilingError):
            spec_for(512, 512, 64, 0, scale=8)
        with pytest.raises(TilingError):
            spec_for(512, 512, 64, 65, scale=8)


class TestPlanViews:
    def test_reference_wide_config(self):
        # 64x384 latent canvas, L=64, stride 16: 21 views at cols 0,16,...,320
        spec = spec_for(512, 3072, 64, 16, scale=8)
        layout = plan_views(spec, "horizontal")
        assert len(layout) == 21
        assert layout.origins == tuple((0, 16 * i) for i in range(21))
        assert not layout.clamped

    def test_view_count_law_all_dims(self):
        # count = (dim - L) / stride + 1 whenever stride divides (dim - L)
        L, stride = 8, 4
        for dim in range(L, 65):
            spec = spec_for(L * 4, dim * 4, L, stride)
            layout = plan_views(spec, "horizontal")
            if (dim - L) % stride == 0:
                assert len(layout) == (dim - L) // stride + 1
                assert not layout.clamped
            else:
                assert len(layout) == (dim - L) // stride + 2
                assert layout.clamped
                assert layout.origins[-1] == (0, dim - L)

    def test_strict_mode_rejects_clamp(self):
        spec = spec_for(32, 136, 8, 4)  # (34 - 8) % 4 != 0
        with pytest.raises(TilingError):
            plan_views(spec, "horizontal", mode="strict")
        layout = plan_views(spec, "horizontal", mode="clamp")
        assert layout.clamped

    def test_orientations(self):
        spec = spec_for(136, 32, 8, 4)
        layout = plan_views(spec, "vertical")
        assert all(c == 0 for _, c in layout.origins)
        square = spec_for(64, 64, 8, 4)
        grid = plan_views(square, "grid")
        assert len(grid) == 3 * 3  # positions 0,4,8 along each 16-cell axis

    def test_requires_matching_view_size(self):
        with pytest.raises(TilingError):
            plan_views(spec_for(64, 128, 8, 4), "horizontal")


class TestSplitMerge:
    def test_tiny_1d_oracle(self):
        # canvas row [0,1,2,3,4], L=3, stride=2: views [0,1,2] and [2,3,4];
        # cell 2 is covered twice, every value merges back exactly.
        layout = ViewLayout(
            origins=((0, 0), (0, 2)), view_size=3, canvas_shape=(3, 5)
        )
        x = torch.arange(15, dtype=torch.float32).reshape(1, 3, 5)
        stack = split(x, layout)
        assert torch.equal(stack.views[0], x[:, :, 0:3])
        assert torch.equal(stack.views[1], x[:, :, 2:5])
        counts = overlap_counts(layout)
        assert counts[0].tolist() == [1, 1, 2, 1, 1]
        assert torch.equal(merge(stack), x)

    def test_merge_averages_disagreeing_views(self):
        layout = ViewLayout(
            origins=((0, 0), (0, 1)), view_size=2, canvas_shape=(2, 3)
        )
        a = torch.zeros(1, 2, 2)
        b = torch.ones(1, 2, 2)
        merged = merge(ViewStack(views=[a, b], layout=layout))
        assert merged[0, 0].tolist() == [0.0, 0.5, 1.0]

    def test_split_returns_copies(self):
        layout = ViewLayout(origins=((0, 0),), view_size=2, canvas_shape=(2, 2))
        x = torch.zeros(1, 2, 2)
        stack = split(x, layout)
        stack.views[0] += 1.0
        assert torch.all(x == 0)

    def test_overlap_counts_brute_force(self):
        spec = spec_for(32, 104, 8, 3)
        layout = plan_views(spec, "horizontal")
        counts = overlap_counts(layout)
        brute = torch.zeros(layout.canvas_shape, dtype=torch.int64)
        for rr in range(layout.canvas_shape[0]):
            for cc in range(layout.canvas_shape[1]):
                n = sum(
                    1
                    for (r, c) in layout.origins
                    if r <= rr < r + 8 and c <= cc < c + 8
                )
                brute[rr, cc] = n
        assert torch.equal(counts, brute)

    @settings(max_examples=60, deadline=None)
    @given(
        dim=st.integers(8, 48),
        L=st.integers(2, 8),
        stride=st.integers(1, 8),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_roundtrip_property(self, dim, L, stride, seed):
        stride = min(stride, L)
        layout_spec = PanoramaSpec(
            image_height=L, image_width=dim, latent_scale=1,
            latent_channels=2, view_size=L, stride=stride,
        )
        layout = plan_views(layout_spec, "horizontal")
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn((2, L, dim), generator=gen)
        assert torch.allclose(merge(split(x, layout)), x, atol=1e-6)


class TestViewLayout:
    def test_scaled(self):
        layout = ViewLayout(
            origins=((0, 0), (0, 4)), view_size=8, canvas_shape=(8, 12)
        )
        half = layout.scaled(2)
        assert half.origins == ((0, 0), (0, 2))
        assert half.view_size == 4
        assert half.canvas_shape == (4, 6)

    def test_scaled_rejects_indivisible(self):
        layout = ViewLayout(
            origins=((0, 0), (0, 3)), view_size=8, canvas_shape=(8, 11)
        )
        with pytest.raises(TilingError):
            layout.scaled(2)

    def test_dict_roundtrip(self):
        layout = ViewLayout(
            origins=((0, 0), (0, 4)), view_size=8, canvas_shape=(8, 12),
            clamped=True,
        )
        assert ViewLayout.from_dict(layout.to_dict()) == layout

    def test_rejects_out_of_bounds(self):
        with pytest.raises(TilingError):
            ViewLayout(origins=((0, 5),), view_size=8, canvas_shape=(8, 12))

    def test_rejects_unsorted(self):
        with pytest.raises(TilingError):
            ViewLayout(
                origins=((0, 4), (0, 0)), view_size=8, canvas_shape=(8, 12)
            )
