"""Real-time candidate generation: inductive user-item models (FISM, SASRec),
an embedding-neighborhood user-based scorer and a learned fusion of the two."""

__version__ = "0.1.0"
