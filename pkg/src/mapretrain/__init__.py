"""Masked autoregressive pretraining for hybrid SSM/attention vision backbones."""
