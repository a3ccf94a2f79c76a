"""Desk-scale lab for contrastive visual-document retrieval with
region-description ranking alignment."""

__version__ = "0.1.0"
