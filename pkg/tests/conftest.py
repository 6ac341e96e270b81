import pytest

from docspot.corpus import generate_synthetic


@pytest.fixture(scope="session")
def small_corpus():
    """6 pages, 4 categories x 3 occurrences, fixed seed."""
    return generate_synthetic(6, 4, 3, page_size=(640, 480), seed=11)
