import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: desk-scale training runs (minutes each)")
    config.addinivalue_line(
        "markers", "full: full-scale runs, only with MPLAB_FULL=1")
