"""Confidential retrieval augmented generation in an emulated enclave"""

__version__ = "0.1"
