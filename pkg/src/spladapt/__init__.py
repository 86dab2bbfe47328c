"""Domain adaptation for sparse neural retrievers.

Train the domain-specific slice of a small transformer encoder (embeddings
plus the first k layers) with masked-language-model pretraining per corpus,
train the remaining task slice on source-domain relevance triples, then
graft the target-domain slice onto the source-task slice to score documents
in a domain that has no labeled training data.
"""

__version__ = "0.1.0"
