"""
Test configuration and fixtures for g2kit
"""

import os
import sys

import pytest

# Add the project root to the Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from simulator import SimConfig  # noqa: E402


@pytest.fixture
def bright_config():
    """Short, bright single-emitter run with enough pairs for window statistics"""
    return SimConfig(
        acquisition_time_s=2.0,
        p_emit=0.6,
        eta_a=0.05,
        eta_b=0.05,
        poisson_mean=0.05,
        background_rate_hz=5000.0,
        backflash_probability=0.0,
        seed=20240917,
    )


@pytest.fixture(autouse=True)
def setup_test_environment(tmp_path, monkeypatch):
    """Keep log files and thread counts inside the test sandbox"""
    monkeypatch.setenv('G2KIT_LOG_DIR', str(tmp_path / 'logs'))
    monkeypatch.setenv('G2KIT_THREADS', '2')
    yield


def pytest_configure(config):
    """Configure pytest with custom markers"""
    config.addinivalue_line(
        "markers", "slow: long NV-centre scale simulations"
    )
