"""Image clustering by aligning frozen image embeddings with a filtered word space."""

__version__ = "0.1.0"
