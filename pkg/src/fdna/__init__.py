"""Content-conditioned logistic factorization of purchase data ("Fashion DNA").

Items are mapped to non-negative embedding vectors by a feedforward network
over their attributes; each customer owns a style vector and a bias, and the
purchase probability of a pair is the logistic of their inner product.
"""

__version__ = "0.1.0"
