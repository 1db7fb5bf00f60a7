"""Causal intersectionality lab: miATE, MIDAS and the dual form of ICL on a toy multimodal transformer."""

__version__ = "0.1.0"
