"""Co-mining: Siamese pseudo-label co-generation for sparsely annotated detection."""

__version__ = "0.1.0"
