"""splitlab: a desk-scale edge/cloud split-computing laboratory.

Streaming contrastive learning with a Gaussian-mixture distributional memory,
distribution-quality metrics, an uncertainty-guided RL split controller, a
trace-driven latency/energy/bandwidth model, and a server-side refinement
loop, wired into one reproducible pipeline.
"""

__version__ = "0.1.0"
