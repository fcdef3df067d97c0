"""Experiment defaults taken from the reference training setup.

These are the values the pydantic run-config models fall back to when a YAML
file leaves a key out.
"""

# Training configuration
EMBEDDING_DIM = 100
BATCH_SIZE = 2048
LEARNING_RATE = 1e-3
KL_WEIGHT = 0.01
EPOCHS = 50
NEGATIVES_PER_POSITIVE = 32
INIT_LOG_VARIANCE = -2.302585092994046  # ln(0.1)
LOG_VARIANCE_CLAMP = (-10.0, 10.0)

# OOD split protocol
TAU_PERCENTILE = 0.10
A3_EPSILONS: list[int] = [1, 5, 10, 20, 50, 100]
TAU_SWEEP: list[float] = [0.05, 0.10, 0.20, 0.30]
CORRUPTION_SAMPLE_SIZE = 20_000

# Mixing weight search: 101-point grid, endpoints pulled inside (0, 1)
ALPHA_GRID_STEPS = 101
ALPHA_ENDPOINTS = (0.005, 0.995)
FIXED_ALPHA = 0.5

# Evaluation
BOOTSTRAP_ITERATIONS = 10_000
ECE_BINS = 15
BASELINE_DRAWS = 10
HITS_AT_K = 10
ANSWER_RATES: list[float] = [1.0, 0.95, 0.9, 0.85, 0.8, 0.7, 0.5]

# Theorem-validation acceptance band for relation-agnostic signals on novel contexts
NEAR_RANDOM_BAND = (0.35, 0.65)

# Signals reported by eval, in table order
SIGNALS: list[str] = ["semantic", "structural", "fixed_0.5", "cagp", "score_baseline"]
