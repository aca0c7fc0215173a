"""Published NDS results for the eight-configuration, eight-stage
BEVFormer multi-module benchmark, used as a golden scoring input."""

import numpy as np

BENCHMARK_CONFIG_NAMES = (
    "Res50-SCA-TSA",
    "Res50-SCA-RCF",
    "Res50-GKT-TSA",
    "Res50-GKT-RCF",
    "VoV-SCA-TSA",
    "VoV-SCA-RCF",
    "VoV-GKT-TSA",
    "VoV-GKT-RCF",
)

# rows: configurations, columns: training stages 1..8
BENCHMARK_NDS_GRID = np.array([
    [0.23, 0.28, 0.31, 0.35, 0.38, 0.40, 0.42, 0.44],
    [0.28, 0.32, 0.35, 0.38, 0.42, 0.44, 0.46, 0.48],
    [0.22, 0.27, 0.31, 0.35, 0.37, 0.40, 0.42, 0.43],
    [0.23, 0.28, 0.33, 0.36, 0.39, 0.42, 0.45, 0.46],
    [0.39, 0.42, 0.47, 0.49, 0.52, 0.54, 0.55, 0.55],
    [0.42, 0.47, 0.53, 0.56, 0.58, 0.58, 0.60, 0.59],
    [0.38, 0.42, 0.46, 0.49, 0.52, 0.55, 0.55, 0.56],
    [0.41, 0.45, 0.50, 0.53, 0.58, 0.58, 0.59, 0.59],
])

BENCHMARK_SOTA_CONFIG = "VoV-SCA-RCF"
BENCHMARK_SOTA_INDEX = (5, 6)  # zero-based (configuration, stage)
BENCHMARK_SOTA_NDS = 0.60
