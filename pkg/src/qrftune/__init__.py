"""Targeted (mtry, nodesize) tuning of quantile regression and survival forests."""
