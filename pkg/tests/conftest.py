import pytest

from jointgan.corpus import build_vocabulary, load_manifest
from jointgan.synthetic import build_corpus


@pytest.fixture(scope="session")
def corpus64(tmp_path_factory):
    """8 train / 4 test shape images at 64 px, 5 captions each."""
    path = build_corpus(
        tmp_path_factory.mktemp("corpus64"),
        n_train=8, n_test=4, image_size=64, captions_per_image=5, seed=0,
    )
    manifest = load_manifest(path)
    return manifest, build_vocabulary(manifest), path


@pytest.fixture(scope="session")
def corpus16(tmp_path_factory):
    """Small fast corpus: 4 train / 2 test at 16 px, 2 captions each."""
    path = build_corpus(
        tmp_path_factory.mktemp("corpus16"),
        n_train=4, n_test=2, image_size=16, captions_per_image=2, seed=1,
    )
    manifest = load_manifest(path)
    return manifest, build_vocabulary(manifest), path
