"""Conditional normalized maximum likelihood and its amortized approximation."""
