"""How a mask logit turns into a keep probability.

Each weight's mask bit comes from two uniforms pushed through a
Gumbel-Sigmoid and rounded.  Three things to notice: the keep rate matches
sigmoid(logit), the temperature leaves it alone, and every bit is exactly
the event U2 ** exp(l) < U1.
"""
import numpy as np

from weightmask import init_mask, sample_binary
from weightmask import tensor as T
from weightmask.optim import ParamStore
from weightmask.tensor import stable_sigmoid

N = 100_000
rng = np.random.default_rng(0)

# one "weight" tensor of N entries, all sharing the same logit
params = ParamStore()
params.add("w", np.zeros(N))

print("logit  sigmoid  keep rate")
for l in (-2.0, -1.0, 0.0, 1.0, 2.0):
    mask = init_mask(params, keep_prob=float(stable_sigmoid(np.float64(l))))
    b = sample_binary(mask, rng)["w"].data
    print(f"{l:5.1f}  {stable_sigmoid(np.float64(l)):.4f}   {b.mean():.4f}")

# temperature sharpens the soft sample, but rounding at 0.5 ignores it
u = {"w": rng.random((2, N))}
for tau in (0.5, 1.0, 2.0):
    mask = init_mask(params, keep_prob=float(stable_sigmoid(np.float64(1.0))), tau=tau)
    print(f"tau={tau}: keep rate {sample_binary(mask, uniforms=u)['w'].data.mean():.4f}")

# the same event in closed form, element by element, in 64-bit
with T.precision(64):
    mask = init_mask(params)
    mask.logits["w"].data[:] = rng.normal(size=N)
    u1, u2 = rng.random(N), rng.random(N)
    b = sample_binary(mask, uniforms={"w": np.stack([u1, u2])})["w"].data > 0.5
    closed = u2 ** np.exp(mask.logits["w"].data) < u1
    print("mismatches against U2**exp(l) < U1:", int((b != closed).sum()))
