"""Shared fixtures: cached toy pipelines so test files do not rebuild them."""

from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from quantflow import quantize_graph, streamline_to_integer, synth_images, toy_model
from quantflow.synthetic import random_plan

settings.register_profile(
    "quantflow",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("quantflow")


@pytest.fixture(scope="session")
def toy_pipeline():
    """Factory: seed -> (float graph, plan, calib images, quantized, lowered), cached."""
    cache: dict[int, tuple] = {}

    def build(seed: int = 0):
        if seed not in cache:
            g = toy_model(seed=seed)
            inode = g.input_node
            images = synth_images(2, inode.out_ch(), inode.out_hw(), seed=seed)
            plan = random_plan(g, seed=seed)
            gq = quantize_graph(g, plan, images)
            gl = streamline_to_integer(gq)
            cache[seed] = (g, plan, images, gq, gl)
        return cache[seed]

    return build
