from __future__ import annotations

import json
import os
from pathlib import Path

import pytest

from metarefine.backends import ScriptedBackend, ScriptedScript
from metarefine.cli import bundled_root
from metarefine.pipeline import load_pipeline

GOLDEN = Path(__file__).parent / "golden"

FIG2_SUCCESS = "GANs: generator creates data, discriminator detects fakes--adversaries in AI. #AI #GAN"
FIG2_ATTEMPT1 = (
    "Generative Adversarial Networks (GANs), created by Ian Goodfellow, involve a generator and "
    "discriminator competing in a two-player game to synthesize realistic data."
)
FIG2_ATTEMPT2 = "GANs: two neural networks compete--one creates, the other detects fake data."


@pytest.fixture
def tweet_pipeline():
    return load_pipeline(bundled_root() / "tweet_summarizer")


@pytest.fixture
def strict_pipeline():
    return load_pipeline(bundled_root() / "tweet_summarizer_strict")


@pytest.fixture
def tweet_module(tweet_pipeline):
    return tweet_pipeline.module("generate_tweet")


@pytest.fixture
def tweet_inputs():
    data = json.loads((bundled_root() / "tweet_summarizer" / "inputs.json").read_text())
    return data["inputs"]


@pytest.fixture
def fig2_script_data():
    return json.loads((bundled_root() / "fixtures" / "fig2" / "script.json").read_text())


@pytest.fixture
def fig2_backend(fig2_script_data):
    return ScriptedBackend(ScriptedScript.from_dict(fig2_script_data))


def check_golden(name: str, text: str) -> None:
    """Compare against a committed golden file; UPDATE_GOLDEN=1 rewrites it."""
    path = GOLDEN / name
    if os.environ.get("UPDATE_GOLDEN") or not path.exists():
        path.write_text(text, encoding="utf-8")
    assert text == path.read_text(encoding="utf-8")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
