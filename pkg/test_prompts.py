"""
Prompt templates: loading and rendering
"""

import pytest

from src.llm_backend import PromptKind
from src.prompts import render_prompt, template_version


def test_every_prompt_kind_has_a_template():
    for kind in PromptKind:
        with pytest.raises(KeyError) as info:
            render_prompt(kind.value)
        # a missing field, not a missing template
        assert "unknown prompt template" not in str(info.value)


def test_name_is_a_template_field():
    text = render_prompt("vote_poll", persona="Alice is 37.", name="Alice Nguyen", memories="(none)")
    assert "Alice Nguyen is going to cast a vote." in text
    assert text.startswith("Alice is 37.")


def test_template_selector_is_positional():
    with pytest.raises(TypeError):
        render_prompt(template="vote_poll", persona="", name="x", memories="")


def test_unknown_template():
    with pytest.raises(KeyError, match="unknown prompt template"):
        render_prompt("limerick", name="Bill")
    assert template_version() >= 1
