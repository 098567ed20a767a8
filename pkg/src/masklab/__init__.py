"""masklab: a desk-scale laboratory for learning under label noise.

Simulates class-conditional label corruption with three canonical
transition structures, trains correction baselines (plain noisy training,
anchor-based forward correction, joint transition adaptation) and a
structure-masked adversarial estimator, and benchmarks transition-matrix
recovery and classifier robustness.
"""

__version__ = "0.1.0"
