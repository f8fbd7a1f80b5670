"""Out-of-process backend for the cicd/1 wire protocol plus an image
embedding exporter (CICD-EMB v1)."""

__version__ = "0.1.0"
