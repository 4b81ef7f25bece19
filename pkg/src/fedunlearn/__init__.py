"""Enforced federated unlearning: encrypted, clustered client updates that the
server can only aggregate as a whole, plus the local unlearning objective and
the analysis tooling around it."""

__version__ = "0.1.0"
