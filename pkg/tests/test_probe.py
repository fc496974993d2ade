"""Probe runs: tracked-token attention capture and per-cell summaries."""

import numpy as np
import pytest

from matte.attention import AttentionMapStack
from matte.backends.base import SamplerConfig
from matte.errors import EvalError
from matte.probe import (ProbeSpec, ProbeSummary, render_heatmaps, run_probe,
                         summarize_attention, write_saliency_csv)
from matte.router import uniform_grid


def probe_spec(steps=4, tracked=("dog",)):
    return ProbeSpec(
        grid=uniform_grid("a photo of dog"),
        tracked_tokens=tracked,
        sampler=SamplerConfig(steps=steps, guidance_scale=1.0, seed=0),
    )


class TestProbeSpec:
    def test_tracked_must_appear_in_some_cell(self):
        with pytest.raises(EvalError):
            ProbeSpec(grid=uniform_grid("a photo"), tracked_tokens=("cat",))

    def test_tracked_must_be_nonempty(self):
        with pytest.raises(EvalError):
            ProbeSpec(grid=uniform_grid("a photo"), tracked_tokens=())
        with pytest.raises(EvalError):
            ProbeSpec(grid=uniform_grid("a photo"), tracked_tokens=("  ",))

    def test_valid_spec(self):
        spec = probe_spec()
        assert spec.tracked_tokens == ("dog",)


class TestRunProbe:
    def test_outputs(self, backend):
        image, stack = run_probe(probe_spec(), backend)
        assert image.shape == (16, 16)
        assert stack.tokens() == ("dog",)
        assert stack.layers() == tuple(range(1, 17))
        assert len(stack.timesteps()) == 4
        assert stack.metadata["tracked"] == "dog"
        assert len(stack.metadata["grid_hash"]) == 64

    def test_capture_forced_on(self, backend):
        # The spec's sampler does not ask for attention; the probe must.
        spec = probe_spec()
        assert not spec.sampler.capture_attention
        _, stack = run_probe(spec, backend)
        assert stack.maps

    def test_multiword_tracking_uses_max(self, backend):
        spec = ProbeSpec(
            grid=uniform_grid("a red dog"),
            tracked_tokens=("red dog",),
            sampler=SamplerConfig(steps=2, guidance_scale=1.0, seed=0),
        )
        _, tracked = run_probe(spec, backend)
        raw = backend.sample(spec.grid, SamplerConfig(
            steps=2, guidance_scale=1.0, seed=0, capture_attention=True,
        )).attention
        t = tracked.timesteps()[0]
        merged = tracked.map_for(3, t, "red dog")
        expected = np.maximum(raw.map_for(3, t, "red"),
                              raw.map_for(3, t, "dog"))
        np.testing.assert_array_equal(merged, expected)

    def test_deterministic(self, backend):
        a_img, a_stack = run_probe(probe_spec(), backend)
        b_img, b_stack = run_probe(probe_spec(), backend)
        np.testing.assert_array_equal(a_img, b_img)
        for key, arr in a_stack.maps.items():
            np.testing.assert_array_equal(b_stack.maps[key], arr)


class TestSummarize:
    def fabricated_stack(self):
        stack = AttentionMapStack()
        # Layer 1 native 8x8; two timesteps in t1, one in t3.
        stack.add(1, 950, "dog", np.full((8, 8), 2.0, dtype=np.float32))
        stack.add(1, 900, "dog", np.full((8, 8), 4.0, dtype=np.float32))
        stack.add(1, 400, "dog", np.full((8, 8), 1.0, dtype=np.float32))
        # Layer 7 native 1x1.
        stack.add(7, 950, "dog", np.array([[8.0]], dtype=np.float32))
        return stack

    def test_grouping_and_saliency(self):
        summary = summarize_attention(self.fabricated_stack(), "dog")
        assert summary.resolution == 8
        cell = summary.cells[(1, "t1")]
        assert cell.n_maps == 2
        assert cell.saliency == pytest.approx(3.0)
        np.testing.assert_allclose(cell.mean_map, np.full((8, 8), 3.0))
        assert summary.cells[(1, "t3")].saliency == pytest.approx(1.0)

    def test_low_res_map_spread_preserves_mass(self):
        summary = summarize_attention(self.fabricated_stack(), "dog")
        cell = summary.cells[(7, "t1")]
        # 1x1 map of value 8 spreads to 8x8 with total mass preserved.
        assert cell.mean_map.shape == (8, 8)
        assert cell.mean_map.sum() == pytest.approx(8.0)
        assert cell.saliency == pytest.approx(8.0)

    def test_unknown_token(self):
        with pytest.raises(EvalError):
            summarize_attention(self.fabricated_stack(), "cat")

    def test_probe_summary_end_to_end(self, backend):
        _, stack = run_probe(probe_spec(steps=6), backend)
        summary = summarize_attention(stack, "dog")
        assert summary.token == "dog"
        assert summary.resolution == 8
        layers = {layer for layer, _ in summary.cells}
        assert layers == set(range(1, 17))


class TestOutputs:
    def test_heatmaps_written(self, tmp_path):
        stack = TestSummarize().fabricated_stack()
        summary = summarize_attention(stack, "dog")
        paths = render_heatmaps(summary, tmp_path / "maps")
        assert len(paths) == len(summary.cells)
        names = {p.name for p in paths}
        assert "L01_t1_dog.png" in names
        for p in paths:
            assert p.is_file() and p.stat().st_size > 0

    def test_saliency_csv(self, tmp_path):
        stack = TestSummarize().fabricated_stack()
        summary = summarize_attention(stack, "dog")
        path = tmp_path / "saliency.csv"
        write_saliency_csv(summary, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "layer,stage,saliency,n_maps"
        assert lines[1] == "1,t1,3.0,2"
        # Values round-trip exactly through repr.
        for line in lines[1:]:
            _, _, saliency, _ = line.split(",")
            assert float(saliency) == float(repr(float(saliency)))
