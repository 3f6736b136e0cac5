"""Pytest configuration and shared fixtures for the SOAR tests."""

import pytest

from assets.synthetic import chain_template, ground_truth_cloud, write_synthetic_scene
from core.config import SurfelInitConfig
from helpers import small_field_config


@pytest.fixture
def field_config():
    return small_field_config()


@pytest.fixture
def init_config(field_config):
    return SurfelInitConfig(subdivisions=0, pretrain_steps=50, field=field_config)


@pytest.fixture
def template():
    """Three-joint capsule body with 24 keypoints."""
    return chain_template(joints=3, keypoints=24)


@pytest.fixture
def gt_cloud(template):
    """Ground-truth surfel avatar of the capsule (explicit attributes, float64)."""
    return ground_truth_cloud(template, subdivisions=0)


@pytest.fixture
def synthetic_scene(tmp_path, template):
    """A two-frame rendered scene written to disk."""
    return write_synthetic_scene(tmp_path / "scene", frames=2, width=32, height=32, template=template, subdivisions=0)
