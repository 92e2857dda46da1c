"""Secure two-party computation on Paillier ciphertexts, slot packing for
batched plaintexts, and an encrypted social-recommendation trainer."""

__version__ = "0.1.0"
