import pytest

from dpvstream import synthetic
from dpvstream.pipeline import write_synthetic_dataset


@pytest.fixture(scope="session")
def dataset_factory(tmp_path_factory):
    """Render a synthetic scene to disk once per argument set."""
    cache = {}

    def make(scene_name="plane", **kwargs):
        key = (scene_name, tuple(sorted(kwargs.items())))
        if key not in cache:
            root = tmp_path_factory.mktemp(scene_name)
            write_synthetic_dataset(synthetic.SCENES[scene_name](**kwargs), root)
            cache[key] = root
        return cache[key]

    return make
