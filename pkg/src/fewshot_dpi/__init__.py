"""Few-shot recognition of novel malware classes from raw packet payload bytes.

Modules
-------
packet_ingest
    PCAP payload extraction, labelling, dedup, balancing, tokenisation.
autograd, optim
    numpy tensors with reverse-mode gradients; AdamW and warmup/linear-decay.
encoder
    Transformer byte encoder, supervised pretraining, pooled embeddings.
protonet
    Episodic prototypical-network head, metrics, the known-pair/novel-class experiment.
crypto
    AES-256-CBC / Fernet payload encryption and the classifiability ablation.
cli
    ``fewshot-dpi`` command-line pipeline.
"""

from .autograd import Tensor
from .encoder import PAPER_SCALE, TOY_SCALE, EncoderConfig, EncoderModel, PretrainConfig
from .packet_ingest import PayloadRecord, TokenizedDataset, parse_pcap, tokenize
from .protonet import FewShotProtocol, MetricsReport, run_experiment

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "EncoderConfig",
    "EncoderModel",
    "PretrainConfig",
    "PAPER_SCALE",
    "TOY_SCALE",
    "PayloadRecord",
    "TokenizedDataset",
    "parse_pcap",
    "tokenize",
    "FewShotProtocol",
    "MetricsReport",
    "run_experiment",
]
