from __future__ import annotations

import pytest

from hazegan.io import Manifest
from hazegan.scenes import write_scene_corpus


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """8 procedural 16x16 scenes with one hazy variant each; returns the pair manifest."""
    from hazegan.dataset import synthesize_dataset

    root = tmp_path_factory.mktemp("tiny")
    corpus = write_scene_corpus(root / "corpus", 8, (16, 16), seed=3)
    res = synthesize_dataset(corpus, root / "data", variants=1, seed=5)
    return Manifest.read(res.path)
