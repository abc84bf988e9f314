"""Fixed conv weights generated by elementary cellular automata.

A width-W binary row evolved for M steps under an elementary CA rule
(circular boundary) yields a W x M state matrix; mapping {0, 1} to
{-1, +1} gives the weights of a fixed (non-learned) W-output, M-input
pointwise convolution.  Only the rule number and the seed row ever need
storing, which is why checkpoints stay small.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_RULE = 30


def rule_table(rule: int) -> np.ndarray:
    """3-bit neighbourhood lookup table for an elementary CA rule.

    ``table[(left << 2) | (centre << 1) | right]`` is the next state.
    """
    if not 0 <= rule <= 255:
        raise ConfigError(f"elementary CA rule must be in [0, 255], got {rule}")
    return np.unpackbits(np.uint8(rule), bitorder="little")


def ca_step(row: np.ndarray, rule: int = DEFAULT_RULE) -> np.ndarray:
    """One synchronous update of a binary row with wraparound ends."""
    row = np.asarray(row)
    if row.ndim != 1 or row.size < 3:
        raise ConfigError(f"CA row must be 1-D with width >= 3, got shape {row.shape}")
    if not np.isin(row, (0, 1)).all():
        raise ConfigError("CA row must contain only 0/1 states")
    row = row.astype(np.uint8)
    idx = (np.roll(row, 1) << 2) | (row << 1) | np.roll(row, -1)
    return rule_table(rule)[idx]


def default_seed(width: int, rng_seed: int = 0) -> np.ndarray:
    """Balanced random seed row: floor(width/2) ones at shuffled positions."""
    if width < 3:
        raise ConfigError(f"CA width must be >= 3, got {width}")
    row = np.zeros(width, dtype=np.uint8)
    row[: width // 2] = 1
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    return rng.permutation(row)


@dataclass
class CAConfig:
    """Recipe for one generated kernel: evolve ``seed_row`` for ``steps``
    updates under ``rule``.  width == C_out, steps == C_in of the conv."""

    width: int
    steps: int
    rule: int = DEFAULT_RULE
    seed_row: np.ndarray | None = None

    def resolved_seed(self) -> np.ndarray:
        if self.seed_row is None:
            return default_seed(self.width)
        row = np.asarray(self.seed_row, dtype=np.uint8)
        if row.shape != (self.width,):
            raise ConfigError(f"seed row has shape {row.shape}, expected ({self.width},)")
        if not np.isin(row, (0, 1)).all():
            raise ConfigError("seed row must contain only 0/1 states")
        return row

    def validate(self) -> None:
        if self.width < 3:
            raise ConfigError(f"CA width must be >= 3, got {self.width}")
        if self.steps < 1:
            raise ConfigError(f"CA steps must be >= 1, got {self.steps}")
        rule_table(self.rule)
        self.resolved_seed()


def evolve(cfg: CAConfig) -> np.ndarray:
    """All evolved states as a (steps, width) 0/1 matrix (seed excluded)."""
    cfg.validate()
    states = np.empty((cfg.steps, cfg.width), dtype=np.uint8)
    row = cfg.resolved_seed()
    # ca_step with the input checks and table build hoisted out: validate()
    # has vetted the seed, and every evolved row is 0/1 by construction
    table = rule_table(cfg.rule)
    for t in range(cfg.steps):
        row = table[(np.roll(row, 1) << 2) | (row << 1) | np.roll(row, -1)]
        states[t] = row
    return states


def generate_kernel(cfg: CAConfig) -> np.ndarray:
    """Fixed pointwise-conv weights of shape (width, steps) in {-1, +1}.

    Output channel o, input channel t carries the mapped state
    2*state[t, o] - 1, i.e. column o of the evolved state matrix read
    downwards through time.
    """
    states = evolve(cfg)
    return (2 * states.astype(np.int8) - 1).T.copy()
