# Predefined sparse sequence models: sparse LSTMs, frequency-ordered sparse embeddings and experiment harnesses
__version__ = "0.1.0"
