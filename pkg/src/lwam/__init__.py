"""Desk-scale latent world-action model kit.

A dual-branch packed-transformer policy trained with flow matching: learnable
latent queries (prior branch) are aligned to future-informed embeddings
(posterior branch) during training, and the prior branch alone is deployed
through an asynchronous chunked-control protocol.
"""

__version__ = "0.1.0"

CHECKPOINT_FORMAT_VERSION = 1
DATASET_FORMAT_VERSION = 1
WIRE_PROTOCOL_VERSION = 1
