"""Tests for latent-meshfit."""
