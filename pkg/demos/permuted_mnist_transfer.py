"""Does a network reuse old weights for a new task?

Each task is MNIST under a fresh pixel permutation (the first task is the
identity).  For every task, the free weights and a new mask are trained
jointly.  Weights the thresholded mask keeps are then frozen for all later
tasks.  The printout shows, per layer, what fraction of a task's weights
were already used by earlier tasks.  The run is repeated with mask logits
initialized to favor the old weights.

Needs MNIST IDX files in $MNIST_DIR (see prepare_mnist_subset.py).
"""
from weightmask import experiments as E

from _common import demo_config, pct

cfg, seed = demo_config("permuted_mnist_transfer.toml", ["transfer.steps=30", "transfer.num_tasks=3"],
                        __doc__.splitlines()[0])
data = E.load_mnist_data(cfg)
for biased in (False, True):
    res = E.transfer_sequence(cfg, seed, biased, data)
    print(f"\n{'biased' if biased else 'unbiased'} mask init")
    for t in res["tasks"]:
        shared = "  ".join(f"{k} {v:.2f}" for k, v in t["shared_with_previous"].items())
        print(f"task {t['task']}: accuracy {pct(t['accuracy'])}  shared with earlier tasks: {shared}")
