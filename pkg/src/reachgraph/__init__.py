"""Asymmetric contrastive reachability embeddings."""
