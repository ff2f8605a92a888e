import numpy as np
import pytest


def pytest_configure(config):
    # keep float prints stable in assertion messages
    np.set_printoptions(precision=6, suppress=True)
