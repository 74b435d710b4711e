import json
from pathlib import Path

import pytest

from coqharness import corpus as corpus_mod
from coqharness.agent import AgentDeps, session_factory_from_config
from coqharness.client import ScriptedProvider
from coqharness.driver import SessionConfig, start_session
from coqharness.prompting import TemplateSet
from coqharness.retriever import build_index

FIXTURES = Path(__file__).parent / "fixtures"

TEST_IDS = (
    "relations.v::union_incl",
    "relations.v::trans_incl",
    "weak.v::weak_refl",
    "weak.v::G_wmon",
)


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def mock_table() -> dict:
    return json.loads((FIXTURES / "mock_table.json").read_text())


@pytest.fixture()
def mock_session(mock_table):
    session = start_session(SessionConfig(backend="mock", mock_table=mock_table))
    yield session
    session.close()


@pytest.fixture(scope="session")
def toy_corpus():
    corpus = corpus_mod.ingest_project(FIXTURES / "project")
    return corpus_mod.split_corpus(corpus, policy="explicit", explicit_test_ids=TEST_IDS)


@pytest.fixture()
def scripted_provider_fresh():
    def make() -> ScriptedProvider:
        return ScriptedProvider(FIXTURES / "provider_script.json")

    return make


@pytest.fixture()
def toy_deps(toy_corpus, mock_table, scripted_provider_fresh):
    """Fresh deterministic deps: scripted provider + mock prover sessions."""

    def make(provider=None) -> AgentDeps:
        return AgentDeps(
            corpus=toy_corpus,
            provider=provider or scripted_provider_fresh(),
            session_factory=session_factory_from_config(
                SessionConfig(backend="mock", mock_table=mock_table)
            ),
            index=build_index(toy_corpus.train),
            templates=TemplateSet.load(),
        )

    return make


@pytest.fixture(scope="session")
def manifest_path() -> Path:
    return FIXTURES / "manifest.json"
