"""trajmine: density-based mining of rare and hard-to-predict vehicle trajectories.

Pipeline: ingest or synthesize 10 Hz tracks, window them into 8 s prediction
examples, extract 26-per-segment driving features over the history and full
windows, fit NICE-style normalizing flows by maximum likelihood, score each
example's log-density, mine the lowest-scoring subsets, and evaluate them
against a constant-velocity Kalman baseline.
"""

__version__ = "0.1.0"
