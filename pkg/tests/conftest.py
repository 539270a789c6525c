"""Shared fixtures: the bundled corpus is loaded once per session."""

import pytest

from molmrt.data import bundled_corpus_path, load_corpus


@pytest.fixture(scope="session")
def bundled():
    return load_corpus(bundled_corpus_path())


@pytest.fixture(scope="session")
def corpus_strings(bundled):
    return bundled.strings()


@pytest.fixture()
def small_corpus_file(tmp_path, corpus_strings):
    """A 120-molecule corpus file, enough for fast end-to-end runs."""
    path = tmp_path / "small.smi"
    path.write_text("\n".join(corpus_strings[:120]) + "\n")
    return str(path)
