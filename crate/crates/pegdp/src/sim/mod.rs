//! Deterministic peg-in-hole insertion simulator.
