"""Masked image modeling with an online tokenizer, desk scale."""

from ibotlab._core import *  # noqa: F401,F403
