"""Unsupervised character-level transliteration and translation with WFSTs and seq2seq models."""

__version__ = "0.1.0"
