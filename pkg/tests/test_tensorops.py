"""Tests for visual-token grouping and positional-table interpolation."""

import numpy as np
import pytest

from vl_instruct.errors import DataError, ValidationError
from vl_instruct.tensorops import (
    MAGIC,
    GroupMode,
    PosTable,
    TokenGrid,
    from_json,
    group_tokens,
    interpolate_pos,
    load_array,
    read_tensor,
    save_array,
    to_json,
    write_tensor,
)


def _grid(h, w, d):
    return TokenGrid(np.arange(h * w * d, dtype=np.float64).reshape(h * w, d), h, w)


class TestTokenGrid:
    """Test the token grid type."""

    def test_shape_mismatch(self):
        """Test token count must equal h * w."""
        with pytest.raises(ValidationError):
            TokenGrid(np.zeros((5, 2)), 2, 2)

    def test_grid_round_trip(self):
        """Test as_grid and from_grid agree."""
        g = _grid(3, 4, 2)
        back = TokenGrid.from_grid(g.as_grid())
        np.testing.assert_array_equal(back.tokens, g.tokens)
        assert (back.h, back.w, back.d) == (3, 4, 2)


class TestGroupTokens:
    """Test concatenating neighbouring tokens."""

    def test_vit_grid(self):
        """Test a 32x32 grid becomes 256 tokens of four times the width."""
        g = TokenGrid(np.random.default_rng(0).normal(size=(1024, 8)), 32, 32)
        out = group_tokens(g)
        assert out.tokens.shape == (256, 32)
        assert (out.h, out.w) == (32, 8)
        np.testing.assert_array_equal(out.tokens[0], g.tokens[0:4].reshape(-1))

    def test_row_major_concatenates_consecutive(self):
        """Test each output token is four consecutive input tokens."""
        g = _grid(2, 4, 1)
        out = group_tokens(g, "row-major-4")
        np.testing.assert_array_equal(out.tokens, [[0, 1, 2, 3], [4, 5, 6, 7]])

    def test_row_major_odd_width(self):
        """Test widths not divisible by four give a column of groups."""
        out = group_tokens(_grid(2, 2, 1), GroupMode.ROW_MAJOR_4)
        assert (out.h, out.w) == (1, 1)
        np.testing.assert_array_equal(out.tokens, [[0, 1, 2, 3]])

    def test_block_2x2(self):
        """Test 2x2 spatial blocks."""
        out = group_tokens(_grid(2, 4, 1), GroupMode.BLOCK_2X2)
        assert (out.h, out.w) == (1, 2)
        np.testing.assert_array_equal(out.tokens, [[0, 1, 4, 5], [2, 3, 6, 7]])

    def test_block_needs_even_sides(self):
        """Test odd sides are rejected in block mode."""
        with pytest.raises(ValidationError):
            group_tokens(_grid(3, 4, 1), "block-2x2")

    def test_row_major_needs_multiple_of_four(self):
        """Test token counts not divisible by four are rejected."""
        with pytest.raises(ValidationError):
            group_tokens(_grid(3, 3, 1))

    def test_unknown_mode(self):
        """Test unknown grouping modes are rejected."""
        with pytest.raises(ValueError):
            group_tokens(_grid(2, 2, 1), "diagonal")


class TestInterpolatePos:
    """Test positional-table resizing."""

    def test_two_to_three(self):
        """Test the align-corners upsample of a 2x2 grid."""
        table = PosTable(np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None])
        out = interpolate_pos(table, 3)
        np.testing.assert_allclose(
            out.grid[:, :, 0], [[0, 0.5, 1], [1, 1.5, 2], [2, 2.5, 3]]
        )

    def test_identity(self):
        """Test resizing to the same side returns an equal copy."""
        grid = np.random.default_rng(1).normal(size=(4, 4, 3))
        out = interpolate_pos(PosTable(grid), 4)
        np.testing.assert_array_equal(out.grid, grid)
        assert out.grid is not grid

    def test_single_cell_takes_center(self):
        """Test a 1x1 target samples the grid center."""
        table = PosTable(np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None])
        assert interpolate_pos(table, 1).grid[0, 0, 0] == pytest.approx(1.5)

    def test_corners_preserved(self):
        """Test align-corners keeps the corner vectors."""
        grid = np.random.default_rng(2).normal(size=(16, 16, 4))
        out = interpolate_pos(PosTable(grid), 28)
        assert out.side == 28
        for i, j in ((0, 0), (0, -1), (-1, 0), (-1, -1)):
            np.testing.assert_allclose(out.grid[i, j], grid[i, j])

    def test_linear(self):
        """Test interpolation is linear in the table."""
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 5, 5, 2))
        left = interpolate_pos(PosTable(2.0 * a - 3.0 * b), 7).grid
        right = 2.0 * interpolate_pos(PosTable(a), 7).grid - 3.0 * interpolate_pos(
            PosTable(b), 7
        ).grid
        np.testing.assert_allclose(left, right, atol=1e-12)

    def test_downsample(self):
        """Test shrinking keeps values within the source range."""
        grid = np.random.default_rng(4).uniform(size=(8, 8, 1))
        out = interpolate_pos(PosTable(grid), 3)
        assert out.grid.min() >= grid.min() - 1e-12
        assert out.grid.max() <= grid.max() + 1e-12

    def test_class_token_passes_through(self):
        """Test the class-token vector is unchanged."""
        table = PosTable(np.zeros((2, 2, 3)), cls=np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(interpolate_pos(table, 5).cls, [1.0, 2.0, 3.0])

    def test_bad_target(self):
        """Test target sides below one are rejected."""
        with pytest.raises(ValidationError):
            interpolate_pos(PosTable(np.zeros((2, 2, 1))), 0)

    def test_non_square_table(self):
        """Test positional grids must be square."""
        with pytest.raises(ValidationError):
            PosTable(np.zeros((2, 3, 1)))


class TestContainers:
    """Test the binary and JSON tensor containers."""

    def test_binary_round_trip(self, tmp_path):
        """Test save then load with a class vector."""
        grid = np.random.default_rng(5).normal(size=(2, 3, 4))
        cls = np.arange(4, dtype=np.float64)
        path = tmp_path / "t.bin"
        save_array(path, grid, cls)
        assert path.read_bytes().startswith(MAGIC)
        loaded, loaded_cls = load_array(path)
        np.testing.assert_array_equal(loaded, grid)
        np.testing.assert_array_equal(loaded_cls, cls)

    def test_binary_without_class(self, tmp_path):
        """Test the class vector is optional."""
        path = tmp_path / "t.bin"
        save_array(path, np.ones((1, 1, 2)))
        assert load_array(path)[1] is None

    def test_bad_magic(self, tmp_path):
        """Test files without the magic header are rejected."""
        path = tmp_path / "t.bin"
        path.write_bytes(b"NOTATENSOR" + bytes(32))
        with pytest.raises(DataError):
            load_array(path)

    def test_truncated(self, tmp_path):
        """Test data shorter than the header promises."""
        path = tmp_path / "t.bin"
        save_array(path, np.ones((2, 2, 2)))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError):
            load_array(path)

    def test_json_form(self, tmp_path):
        """Test the JSON container via read_tensor/write_tensor."""
        grid = np.array([[[0.0], [1.0]], [[2.0], [3.0]]])
        path = tmp_path / "t.json"
        write_tensor(path, grid)
        loaded, cls = read_tensor(path)
        np.testing.assert_array_equal(loaded, grid)
        assert cls is None
        assert to_json(grid)["h"] == 2

    def test_json_shape_mismatch(self):
        """Test declared and actual shapes must agree."""
        with pytest.raises(DataError):
            from_json({"h": 2, "w": 2, "d": 1, "data": [[[0.0]]]})
        with pytest.raises(DataError):
            from_json({"h": 1})
