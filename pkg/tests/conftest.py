import numpy as np
import pytest

from foodenergy.dataset import EatingOccasion, SyntheticSceneConfig, generate_synthetic
from foodenergy.density import FoodItemAnnotation


@pytest.fixture(scope="session")
def scenes():
    return generate_synthetic(SyntheticSceneConfig(n_scenes=40, image_size=32, seed=3,
                                                   extent=(0.08, 0.16)))


def block_occasion(occ_id="meal", size=8, kcals=(300.0, 150.0)):
    """Hand-built occasion: vertical stripes of items on a gray image."""
    image = np.full((size, size, 3), 128, dtype=np.uint8)
    items = []
    for k, kcal in enumerate(kcals):
        mask = np.zeros((size, size), dtype=bool)
        mask[:, 2 * k:2 * k + 2] = True
        image[mask] = (40 * k, 200, 90)
        items.append(FoodItemAnnotation(f"item{k}", kcal, mask))
    return EatingOccasion(occ_id, image, items)


@pytest.fixture
def occasion():
    return block_occasion()
