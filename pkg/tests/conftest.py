import sys
from pathlib import Path

# tests import shared helpers from each other (finite-difference oracle etc.)
sys.path.insert(0, str(Path(__file__).parent))


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: full acceptance gate (trains desk-scale checkpoints)"
    )
