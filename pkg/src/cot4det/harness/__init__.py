"""Inference backends and the evaluation driver."""

from .client import ChatClient, InferenceRequest, chat_complete
from .mock import FaultLedger, FaultProfile, mock_generate, mock_generate_traced
from .runner import (
    EndpointBackend,
    MockBackend,
    ReplayBackend,
    run_eval,
    run_rec_eval,
    simulate_ablation,
)

__all__ = [
    "ChatClient",
    "InferenceRequest",
    "chat_complete",
    "FaultLedger",
    "FaultProfile",
    "mock_generate",
    "mock_generate_traced",
    "EndpointBackend",
    "MockBackend",
    "ReplayBackend",
    "run_eval",
    "run_rec_eval",
    "simulate_ablation",
]
