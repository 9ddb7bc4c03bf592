"""nncap: retrieval-augmented captioning of collision outcomes for
synthetic object-placement scenes, built on a small reverse-mode autodiff
core."""

__version__ = "0.1.0"
