import numpy as np
import pytest

from cvthead.head_model import generate_synthetic_model


@pytest.fixture(scope="session")
def synthetic_model():
    """Full-size synthetic head (5023/314), shared across the suite."""
    return generate_synthetic_model(seed=42)


@pytest.fixture(scope="session")
def small_model():
    """Desk-scale model for cheap pipeline tests."""
    return generate_synthetic_model(seed=7, n_vertices=400, n_coarse=48,
                                    shape_dims=4, expr_dims=3)


def rand_params(model, seed, pose_scale=0.3):
    rng = np.random.default_rng(seed)
    return (
        rng.normal(0, 1, model.n_shape),
        rng.normal(0, 1, model.n_expr),
        rng.normal(0, pose_scale, model.theta_len),
    )
