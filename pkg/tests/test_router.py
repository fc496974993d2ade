"""Layer/stage partitions, conditioning grids, routing, and serialization."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matte.errors import GridError
from matte.router import (
    COARSE,
    FINE_DOWN,
    FINE_UP,
    LAYER_RESOLUTIONS,
    MODERATE_DOWN,
    MODERATE_UP,
    TOKEN_COLOR,
    TOKEN_LAYOUT,
    TOKEN_OBJECT,
    TOKEN_STYLE,
    CellPrompt,
    analysis_layer_partition,
    build_grid,
    decile_stage_partition,
    default_token_schedule,
    expand_prompt,
    full_layer_partition,
    full_stage_partition,
    grid_from_config,
    grid_from_json,
    grid_to_config,
    grid_to_json,
    locate,
    matte_layer_partition,
    matte_stage_partition,
    normalize_prompt,
    per_layer_partition,
    placeholders_in,
    resolve,
    uniform_grid,
)

# Layer membership of each subset, stated independently of the
# implementation's tables.
EXPECTED_SUBSET = {}
for i in (1, 2):
    EXPECTED_SUBSET[i] = FINE_DOWN
for i in (3, 4, 5):
    EXPECTED_SUBSET[i] = MODERATE_DOWN
for i in (6, 7, 8, 9):
    EXPECTED_SUBSET[i] = COARSE
for i in (10, 11, 12, 13):
    EXPECTED_SUBSET[i] = MODERATE_UP
for i in (14, 15, 16):
    EXPECTED_SUBSET[i] = FINE_UP


def expected_stage(t):
    if 800 <= t < 1000:
        return "t1"
    if 600 <= t < 800:
        return "t2"
    if 200 <= t < 600:
        return "t3"
    return "t4"


class TestPartitions:
    def test_matte_layer_subsets(self):
        part = matte_layer_partition()
        for layer, subset in EXPECTED_SUBSET.items():
            assert part.subset_of(layer) == subset

    def test_matte_layer_subsets_cover_exactly_16_layers(self):
        part = matte_layer_partition()
        seen = []
        for sid in part.subset_ids:
            seen.extend(part.layers_of(sid))
        assert sorted(seen) == list(range(1, 17))

    def test_layer_resolutions_match_unet_geometry(self):
        assert LAYER_RESOLUTIONS == (64, 64, 32, 32, 16, 16, 8, 16, 16, 16,
                                     32, 32, 32, 64, 64, 64)

    def test_layer_index_out_of_range(self):
        part = matte_layer_partition()
        with pytest.raises(GridError):
            part.subset_of(0)
        with pytest.raises(GridError):
            part.subset_of(17)

    def test_stage_boundaries_half_open(self):
        part = matte_stage_partition()
        assert part.stage_of(999) == "t1"
        assert part.stage_of(800) == "t1"
        assert part.stage_of(799) == "t2"
        assert part.stage_of(600) == "t2"
        assert part.stage_of(599) == "t3"
        assert part.stage_of(200) == "t3"
        assert part.stage_of(199) == "t4"
        assert part.stage_of(0) == "t4"

    def test_stage_of_matches_reference_intervals_everywhere(self):
        part = matte_stage_partition()
        for t in range(1000):
            assert part.stage_of(t) == expected_stage(t)

    def test_stage_out_of_range(self):
        part = matte_stage_partition()
        with pytest.raises(GridError):
            part.stage_of(-1)
        with pytest.raises(GridError):
            part.stage_of(1000)

    def test_interval_of(self):
        part = matte_stage_partition()
        assert part.interval_of("t1") == (800, 1000)
        assert part.interval_of("t4") == (0, 200)

    def test_decile_partition(self):
        part = decile_stage_partition()
        assert part.stage_ids == tuple(f"d{i}" for i in range(1, 11))
        assert part.stage_of(950) == "d1"
        assert part.stage_of(900) == "d1"
        assert part.stage_of(899) == "d2"
        assert part.stage_of(0) == "d10"

    def test_per_layer_partition(self):
        part = per_layer_partition()
        assert part.subset_ids == tuple(f"L{i}" for i in range(1, 17))
        for i in range(1, 17):
            assert part.subset_of(i) == f"L{i}"

    def test_analysis_partition_three_bands(self):
        part = analysis_layer_partition()
        assert set(part.subset_ids) == {"fine", "moderate", "coarse"}
        assert part.layers_of("coarse") == frozenset({6, 7, 8, 9})
        assert part.layers_of("moderate") == frozenset({3, 4, 5, 10, 11, 12, 13})
        assert part.layers_of("fine") == frozenset({1, 2, 14, 15, 16})


class TestPrompts:
    def test_normalize_collapses_whitespace(self):
        assert normalize_prompt("  a   photo\tof  dog ") == "a photo of dog"

    def test_placeholders_in(self):
        assert placeholders_in("a <c> colored photo of <o>") == ["<c>", "<o>"]
        assert placeholders_in("no tokens here") == []

    def test_cell_prompt_rejects_repeated_placeholder(self):
        with pytest.raises(GridError):
            CellPrompt(text="<c> and <c> again")

    def test_cell_prompt_requires_content(self):
        with pytest.raises(GridError):
            CellPrompt()


class TestGrids:
    def test_uniform_grid_routes_everywhere(self):
        grid = uniform_grid("a photo of dog")
        for layer in range(1, 17):
            for t in (0, 500, 999):
                assert resolve(grid, layer, t).text == "a photo of dog"
                assert locate(grid, layer, t) == ("all", "all")

    def test_missing_cell_rejected(self):
        cells = {
            (sid, tid): "x"
            for sid in matte_layer_partition().subset_ids
            for tid in matte_stage_partition().stage_ids
        }
        del cells[(COARSE, "t3")]
        with pytest.raises(GridError, match="missing cell"):
            build_grid("joint", matte_layer_partition(),
                       matte_stage_partition(), cells)

    def test_extra_cell_rejected(self):
        cells = {
            (sid, tid): "x"
            for sid in matte_layer_partition().subset_ids
            for tid in matte_stage_partition().stage_ids
        }
        cells[("nowhere", "t1")] = "x"
        with pytest.raises(GridError, match="unknown cell"):
            build_grid("joint", matte_layer_partition(),
                       matte_stage_partition(), cells)

    def test_mode_shape_constraints(self):
        with pytest.raises(GridError):
            build_grid("layer_only", per_layer_partition(),
                       matte_stage_partition(), {})
        with pytest.raises(GridError):
            build_grid("stage_only", matte_layer_partition(),
                       full_stage_partition(), {})

    def test_locate_resolve_consistency(self):
        grid = uniform_grid("a photo")
        for layer in (1, 8, 16):
            key = grid.locate(layer, 123)
            assert grid.cells[key] is grid.resolve(layer, 123)

    @given(layer=st.integers(min_value=1, max_value=16),
           t=st.integers(min_value=0, max_value=999))
    @settings(max_examples=200, deadline=None)
    def test_every_layer_timestep_pair_locates_uniquely(self, layer, t):
        grid = build_grid(
            "joint", matte_layer_partition(), matte_stage_partition(),
            {(sid, tid): f"cell {sid} {tid}"
             for sid in matte_layer_partition().subset_ids
             for tid in matte_stage_partition().stage_ids})
        sid, tid = grid.locate(layer, t)
        assert sid == EXPECTED_SUBSET[layer]
        assert tid == expected_stage(t)
        assert grid.resolve(layer, t).text == f"cell {sid} {tid}"


class TestTokenSchedule:
    def test_default_schedule_assignments(self):
        sched = default_token_schedule()
        assert sched.subsets_of(TOKEN_COLOR) == frozenset({MODERATE_DOWN,
                                                           MODERATE_UP})
        assert sched.stages_of(TOKEN_COLOR) == frozenset({"t1", "t2"})
        assert sched.subsets_of(TOKEN_STYLE) == frozenset({MODERATE_DOWN,
                                                           MODERATE_UP})
        assert sched.stages_of(TOKEN_STYLE) == frozenset({"t1", "t2"})
        assert sched.subsets_of(TOKEN_OBJECT) == frozenset({COARSE})
        assert sched.stages_of(TOKEN_OBJECT) == frozenset({"t2", "t3"})
        assert sched.subsets_of(TOKEN_LAYOUT) == frozenset({COARSE})
        assert sched.stages_of(TOKEN_LAYOUT) == frozenset({"t1"})

    def test_no_token_active_in_fine_or_t4(self):
        sched = default_token_schedule()
        for tid in ("t1", "t2", "t3", "t4"):
            assert sched.tokens_for_cell(FINE_DOWN, tid) == ()
            assert sched.tokens_for_cell(FINE_UP, tid) == ()
        for sid in sched.layer_partition.subset_ids:
            assert sched.tokens_for_cell(sid, "t4") == ()

    def test_tokens_for_cell(self):
        sched = default_token_schedule()
        assert set(sched.tokens_for_cell(COARSE, "t1")) == {TOKEN_LAYOUT}
        assert set(sched.tokens_for_cell(COARSE, "t2")) == {TOKEN_OBJECT}
        assert set(sched.tokens_for_cell(COARSE, "t3")) == {TOKEN_OBJECT}
        assert set(sched.tokens_for_cell(MODERATE_DOWN, "t1")) == {TOKEN_COLOR,
                                                                   TOKEN_STYLE}


class TestExpandPrompt:
    def test_active_cells_only_deletes_inactive_tokens(self):
        sched = default_token_schedule()
        grid = expand_prompt("a <c> colored photo of <o>", sched)
        assert grid.cells[(MODERATE_DOWN, "t1")].text == "a <c> colored photo of"
        assert grid.cells[(COARSE, "t3")].text == "a colored photo of <o>"
        assert grid.cells[(FINE_UP, "t2")].text == "a colored photo of"

    def test_everywhere_copies_prompt(self):
        sched = default_token_schedule()
        grid = expand_prompt("a <c> colored photo", sched, policy="everywhere")
        for cell in grid.cells.values():
            assert cell.text == "a <c> colored photo"

    def test_unknown_token_rejected(self):
        with pytest.raises(GridError):
            expand_prompt("a <zz> photo", default_token_schedule())

    def test_unknown_policy_rejected(self):
        with pytest.raises(GridError):
            expand_prompt("a photo", default_token_schedule(), policy="never")


class TestSerialization:
    def test_grid_config_round_trip(self):
        cells = {
            (sid, tid): f"p {sid} {tid}"
            for sid in matte_layer_partition().subset_ids
            for tid in matte_stage_partition().stage_ids
        }
        grid = build_grid("joint", matte_layer_partition(),
                          matte_stage_partition(), cells)
        other = grid_from_config(grid_to_config(grid))
        assert other.mode == grid.mode
        assert other.prompts() == grid.prompts()
        for layer in range(1, 17):
            for t in (0, 250, 750, 999):
                assert other.resolve(layer, t).text == grid.resolve(layer, t).text

    def test_grid_json_round_trip_is_stable(self):
        grid = uniform_grid("a photo of dog")
        text = grid_to_json(grid)
        assert grid_to_json(grid_from_json(text)) == text
        json.loads(text)
