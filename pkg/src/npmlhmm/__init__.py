"""Nonparametric maximum likelihood and identification tools for hidden Markov models."""
