"""Sparse Bayesian Koopman operator estimation (GP-DMD)."""
