"""Do addition and multiplication live in separate weights?

A feedforward net learns (a + b) mod 100 and (a * b) mod 100 from one-hot
digits plus an operation flag.  With the weights frozen, one mask is
trained on addition samples only and another on multiplication samples.
The masks are then compared layer by layer, and each mask (and its
inverse) is evaluated on both operations.
"""
from weightmask import experiments as E

from _common import demo_config, pct

cfg, seed = demo_config("addmul_ffn.toml", ["weights.steps=300", "mask.steps=100", "eval.samples=1000"],
                        __doc__.splitlines()[0])
s = E.Session(cfg, seed)
w = E.train_weights_stage(s)
print(f"unmasked accuracy after {w['steps']} steps: {pct(w['accuracy'])}")

for name, out in E.run_stages(s).items():
    print(f"{name} mask keeps {pct(out['kept_fraction'])} of the weights")

grid = E.evaluate_matrix(s)["accuracy"]
print("\nmask       on add   on mul")
for v in ("none", "add", "mul", "~add", "~mul"):
    print(f"{v:8s}  {pct(grid[v]['add'])}   {pct(grid[v]['mul'])}")

# the input layer is where the two operations overlap most
sharing = E.sharing_table(s, "add", "mul")["per_layer"]
print("\nlayer    IoU    IoMin")
for layer, st in sharing.items():
    print(f"{layer:7s} {st['iou']:.3f}  {st['iomin']:.3f}")
