import logging

import numpy as np
import pytest

from utils.helpers import format_error_message, format_table_row, grid_indices, log_level_from_env


def test_grid_indices_spread_over_tracks():
    grid = grid_indices(9, 3, 3)
    np.testing.assert_array_equal(grid, np.arange(9).reshape(3, 3))
    picks = grid_indices(100, 2, 2)
    assert picks[0, 0] == 0 and picks[1, 1] == 99
    assert np.all(np.diff(picks.ravel()) > 0)


def test_table_row_truncates_long_cells():
    assert format_table_row(["a", "bb"], [3, 4]) == "| a   | bb   |"
    assert format_table_row(["abcdefgh"], [5]) == "| ab... |"
    with pytest.raises(ValueError):
        format_table_row(["a"], [1, 2])


def test_error_message():
    assert format_error_message("fit", ValueError("boom")) == "Error during fit: boom"


def test_log_level_from_env(monkeypatch):
    monkeypatch.setenv("RIGIDTRACK_LOG", "warn")
    assert log_level_from_env() == logging.WARNING
    monkeypatch.delenv("RIGIDTRACK_LOG")
    assert log_level_from_env() == logging.INFO
