import numpy as np
import pytest

from protune.backbones import BackboneSpec


def micro_cnn_spec(num_classes: int = 4) -> BackboneSpec:
    """Two-stage CNN small enough for per-test construction."""
    return BackboneSpec(family="cnn", input_hw=16, num_classes=num_classes, widths=(4, 8))


def micro_vit_spec(num_classes: int = 4) -> BackboneSpec:
    return BackboneSpec(
        family="vit", input_hw=16, num_classes=num_classes, depth=4, dim=8, heads=2, patch=4
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
