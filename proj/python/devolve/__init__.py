"""Directed-evolution sparsification, quantization and packing of small networks."""

from ._devolve import (
    ConfigError,
    Density,
    FormatError,
    OptimalLevelsError,
    combinations_count,
    compression_report,
    crc32,
    entropy_bits,
    equal_mass_levels,
    huffman_lengths,
    max_interior_residual,
    optimal_levels,
    quantization_error,
    run,
    uniform_levels,
)

__all__ = [
    "ConfigError",
    "Density",
    "FormatError",
    "OptimalLevelsError",
    "combinations_count",
    "compression_report",
    "crc32",
    "entropy_bits",
    "equal_mass_levels",
    "huffman_lengths",
    "max_interior_residual",
    "optimal_levels",
    "quantization_error",
    "run",
    "uniform_levels",
]
