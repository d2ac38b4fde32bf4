"""Two additions side by side: separate inputs, separate outputs.

The net adds two independent pairs of two-digit numbers at once.  A mask
trained on pair 1 alone should solve pair 1 and fail pair 2.  Its inverse
removes exactly what pair 1 needs and should still solve pair 2.  The first
and last layers share nothing, because each pair has its own input and
output units.

The second half copies pair 1's input and output weights onto pair 2.  Now
both pairs present identical signals to the hidden layers, and the pair
masks should overlap almost completely in between.
"""
from weightmask import experiments as E

from _common import demo_config, pct

cfg, seed = demo_config("double_add_ffn.toml", ["weights.steps=300", "mask.steps=100", "eval.samples=500"],
                        __doc__.splitlines()[0])
s = E.Session(cfg, seed)
print(f"unmasked accuracy: {pct(E.train_weights_stage(s)['accuracy'])}")
E.run_stages(s)
grid = E.evaluate_matrix(s, ["none", "stages", "inverted"], ["pair1", "pair2"])["accuracy"]
print("\nmask       pair 1   pair 2")
for v in ("none", "pair1", "pair2", "~pair1", "~pair2"):
    print(f"{v:8s}  {pct(grid[v]['pair1'])}   {pct(grid[v]['pair2'])}")


def show(per_layer, title):
    print(f"\n{title}")
    for layer, st in per_layer.items():
        print(f"  {layer}: IoU {st['iou']:.3f}")


show(E.sharing_table(s, "pair1", "pair2")["per_layer"], "sharing between the pair masks")
res = E.copy_io_sanity(s)
print("\naccuracy right after the copy:", {k: pct(v) for k, v in res["accuracy_after_copy"].items()})
show(res["sharing"]["per_layer"], "sharing after copying pair 1's I/O weights onto pair 2")
