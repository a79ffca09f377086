"""Linear-order attention vs the quadratic formulation.

Both compute the same kernelized attention (1+ELU feature map); the linear
path associates K'^T V first and never materializes the TxT similarity
matrix. This script shows numerical agreement and how wall time scales.
"""

import numpy as np

from deflare.checks import attention_benchmark
from deflare.model import linear_attention, quadratic_attention_reference
from deflare.tensor import Tensor

rng = np.random.default_rng(1)

# agreement on a small instance
q, k, v = (rng.standard_normal((32, 8)) for _ in range(3))
lin = linear_attention(Tensor(q), Tensor(k), Tensor(v), 1e-6).data
quad = quadratic_attention_reference(q, k, v, 1e-6)
print(f"max |linear - quadratic| at 32 tokens: {np.abs(lin - quad).max():.2e}")

# timing across token counts (quadruple the tokens, watch the ratio)
rows = attention_benchmark([256, 1024, 4096], dim=64, value_dim=64, reps=3, seed=0)
print(f"\n{'tokens':>8} {'linear (ms)':>12} {'quadratic (ms)':>15} {'agree':>10}")
for r in rows:
    print(f"{r.n_tokens:>8} {r.t_linear * 1e3:>12.2f} {r.t_quadratic * 1e3:>15.2f} {r.max_abs_diff:>10.1e}")

lin_ratio = rows[-1].t_linear / rows[-2].t_linear
quad_ratio = rows[-1].t_quadratic / rows[-2].t_quadratic
print(f"\n1024 -> 4096 tokens: linear time x{lin_ratio:.1f}, quadratic time x{quad_ratio:.1f}")
print("(expected about x4 for the linear path and about x16 for the quadratic one)")
