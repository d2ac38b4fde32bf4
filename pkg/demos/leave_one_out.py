"""Which weights belong to one digit alone?

After training an MNIST classifier, a control mask is learned on all
digits.  Then, for each digit, a mask is learned on every digit except that
one, with the output layer held to the control mask.  Weights needed only
for the missing digit drop out, so that digit's accuracy falls the most.
The confusion delta (left-out mask minus control, row-normalized) shows it.

Needs MNIST IDX files in $MNIST_DIR (see prepare_mnist_subset.py).
"""
import numpy as np

from weightmask import experiments as E

from _common import demo_config, pct

cfg, seed = demo_config("mnist_leave_one_out.toml",
                        ["weights.steps=100", "mask.steps=30", "leave_one_out.classes=[0, 1, 2]"],
                        __doc__.splitlines()[0])
s = E.Session(cfg, seed)
print(f"unmasked test accuracy: {pct(E.train_weights_stage(s)['accuracy'])}")
res = E.leave_one_out(s)
print(f"control mask accuracy: {pct(res['control_accuracy'])}\n")
for c, d in res["deltas"].items():
    delta = np.asarray(d["delta"])
    worst = np.unravel_index(np.argmin(delta), delta.shape)
    print(f"without {c}: diagonal change {delta[int(c), int(c)]:+.3f}; "
          f"largest drop at (true {worst[0]}, pred {worst[1]}); "
          f"{'matches' if d['removed_is_largest_drop'] else 'does not match'} the removed digit")
print(f"\n{res['largest_drop_count']} of {len(res['deltas'])} digits lose the most on themselves")
