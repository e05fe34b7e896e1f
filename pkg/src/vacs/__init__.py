"""Hierarchical VAE for language-labeled code-switched text.

Submodules: ``data`` (corpora, vocabularies, toy world), ``model``,
``training``, ``generation``, ``metrics`` and ``payload`` (the
character-aware evaluation LM). ``autodiff`` and ``kernels`` hold the
numerical core.
"""
__version__ = "0.1.0"
