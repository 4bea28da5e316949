"""Python bindings for the SBM-attention transformer core."""

from ._sbmt import (  # noqa: F401
    DomainError,
    InputError,
    Model,
    NonFiniteError,
    ShapeError,
    UnavailableError,
    duplicate_labels,
    duplicate_rate,
    flops_attention,
    gradcheck_tiny,
    hamiltonian_cycle_expectation,
    sample_mask,
    threshold_probability,
    verify_theory,
)

__all__ = [
    "DomainError",
    "InputError",
    "Model",
    "NonFiniteError",
    "ShapeError",
    "UnavailableError",
    "duplicate_labels",
    "duplicate_rate",
    "flops_attention",
    "gradcheck_tiny",
    "hamiltonian_cycle_expectation",
    "sample_mask",
    "threshold_probability",
    "verify_theory",
]
