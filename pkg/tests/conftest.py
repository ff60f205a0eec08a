"""Shared test fixtures for Scanloop."""

import logging
import os

import numpy as np
import pytest

from scanloop.common.config import ScanloopSettings, get_settings
from scanloop.geometry import PointCloud, RigidTransform


@pytest.fixture(autouse=True)
def clean_environment():
    """Drop SCANLOOP_* variables and cached settings around every test."""
    saved = {k: v for k, v in os.environ.items() if k.startswith("SCANLOOP_")}
    for key in saved:
        del os.environ[key]
    get_settings.cache_clear()
    yield
    for key in [k for k in os.environ if k.startswith("SCANLOOP_")]:
        del os.environ[key]
    os.environ.update(saved)
    get_settings.cache_clear()


@pytest.fixture(autouse=True)
def propagate_logs():
    """setup_logging stops propagation; caplog needs it back."""
    logger = logging.getLogger("scanloop")
    previous = logger.propagate
    logger.propagate = True
    yield
    logger.propagate = previous


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def _tiny_settings(**overrides) -> ScanloopSettings:
    """A three-level network small enough for tests to train in seconds."""
    sections = {
        "backbone": {
            "cells": [0.5, 1.0, 2.0],
            "widths": [4, 6, 8],
            "kernel_points": 5,
            "dense_dim": 4,
        },
        "roformer": {"blocks": 1},
        "votes": {"descriptor_dim": 4},
        "retrieval": {"clusters": 2, "descriptor_dim": 4},
        "matching": {
            "sinkhorn_iterations": 10,
            "train_sinkhorn_iterations": 3,
            "num_correspondences": 8,
            "patch_cap": 8,
        },
        "registration": {"ransac_iterations": 200},
        "training": {"epochs": 2, "augment_yaw_deg": 0.0, "augment_jitter": 0.0},
    }
    for name, values in overrides.items():
        sections.setdefault(name, {}).update(values)
    return ScanloopSettings(**sections)


def _tiny_scene(n: int = 500, seed: int = 0) -> PointCloud:
    """Ground plane plus a few upright boxes inside a 12 m square."""
    rng = np.random.default_rng(seed)
    ground = np.column_stack(
        [rng.uniform(0, 12, n // 2), rng.uniform(0, 12, n // 2), rng.normal(0, 0.02, n // 2)]
    )
    boxes = []
    per_box = (n - n // 2) // 4
    for cx, cy in ((3.0, 3.0), (9.0, 3.5), (4.0, 9.0), (8.5, 8.5)):
        boxes.append(
            np.column_stack(
                [
                    cx + rng.uniform(-1.0, 1.0, per_box),
                    cy + rng.uniform(-1.0, 1.0, per_box),
                    rng.uniform(0.0, 3.0, per_box),
                ]
            )
        )
    return PointCloud(np.vstack([ground, *boxes]))


def _tiny_pair(seed: int = 0, yaw: float = 0.2, shift=(0.8, -0.5, 0.0)):
    """(cloud_a, cloud_b, T_gt) with cloud_b = T_gt applied to cloud_a."""
    cloud_a = _tiny_scene(seed=seed)
    T = RigidTransform.from_yaw(yaw, shift)
    return cloud_a, PointCloud(T.apply(cloud_a.points)), T


@pytest.fixture
def make_settings():
    return _tiny_settings


@pytest.fixture
def make_scene():
    return _tiny_scene


@pytest.fixture
def make_pair():
    return _tiny_pair


@pytest.fixture
def settings():
    return _tiny_settings()


@pytest.fixture
def pair():
    return _tiny_pair()
