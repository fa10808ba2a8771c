"""Shared fixtures: the synthetic corpus is generated once per session and
every expensive derived object (index, loaded samples, query features) is
computed once and shared read-only."""

from __future__ import annotations

import pytest

from refharm import SimilarityCache, build_index, load_manifest, make_fixtures
from refharm.features import BuiltinContentProvider
from refharm.imgio import load_sample
from refharm.retrieval import load_index


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    make_fixtures(out, seed=0)
    return out


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    return load_manifest(corpus_dir / "manifest.json")


@pytest.fixture(scope="session")
def corpus_index(corpus):
    return build_index(corpus, BuiltinContentProvider(), patch_size=16)


@pytest.fixture(scope="session")
def corpus_cache():
    return SimilarityCache()


@pytest.fixture(scope="session")
def corpus_samples(corpus):
    return {entry.id: load_sample(entry) for entry in corpus.entries}


@pytest.fixture(scope="session")
def mini_corpus(corpus_dir):
    return load_manifest(corpus_dir / "mini_manifest.json")


@pytest.fixture(scope="session")
def mini_index(corpus_dir):
    return load_index(corpus_dir / "mini_index")


@pytest.fixture(scope="session")
def corpus_queries(corpus_samples, corpus_index, corpus_cache):
    provider = BuiltinContentProvider()
    return {
        sid: corpus_cache.query_features(sample, corpus_index.patch_size, provider)
        for sid, sample in corpus_samples.items()
    }
