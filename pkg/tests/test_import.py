"""Sanity checks for the public package surface."""

import exopipe


def test_public_api_exposed() -> None:
    assert hasattr(exopipe, "Broker")
    assert hasattr(exopipe, "build_fat_tree")
    assert hasattr(exopipe, "run_scenario")
    assert isinstance(exopipe.__version__, str)
