import numpy as np
import pytest

from weightmask import experiments as E
from weightmask import report as R
from weightmask.masks import BinaryMask
from weightmask.training import FrozenWeightsChanged, assert_unchanged

from conftest import tiny


@pytest.fixture
def session():
    s = E.Session(tiny(), 0)
    E.train_weights_stage(s)
    return s


def test_weights_frozen_after_training(session):
    assert session.params.frozen == set(session.params.names())


def test_stage_records_integrity(session):
    E.run_stages(session)
    assert [x["stage"] for x in session.meta["integrity"]] == ["add", "mul"]
    assert all(x["frozen_weights_unchanged"] for x in session.meta["integrity"])


def test_rerun_is_noop(session):
    E.run_stages(session)
    before = {n: b.copy() for n, b in session.bits["add"].bits.items()}
    meta = dict(session.meta["stages"]["add"])
    E.run_stages(session)
    assert session.meta["stages"]["add"] == meta
    assert all(np.array_equal(before[n], session.bits["add"].bits[n]) for n in before)
    assert len(session.meta["integrity"]) == 2


def test_stage_order_does_not_matter():
    # each stage draws from its own named streams
    a, b = E.Session(tiny(), 1), E.Session(tiny(), 1)
    E.train_weights_stage(a), E.train_weights_stage(b)
    E.run_stages(a, ["add", "mul"])
    E.run_stages(b, ["mul", "add"])
    for n in a.bits["add"].names():
        assert np.array_equal(a.bits["add"].bits[n], b.bits["add"].bits[n])


def test_integrity_violation_detected(session):
    snap = session.params.snapshot()
    session.params["layer0.weight"].data[0, 0] += 1
    with pytest.raises(FrozenWeightsChanged):
        assert_unchanged(session.params, snap, where="test")


def test_zero_alpha_keeps_most_weights(session):
    out = E.train_mask_stage(session, session.cfg.stage("add"), alpha=0.0, record="free")
    assert 0.85 <= out["kept_fraction"] <= 1.0


def test_grid_is_complete_and_partitioned(session):
    E.run_stages(session)
    grid = E.evaluate_matrix(session)
    assert set(grid["accuracy"]) == {"none", "add", "mul", "~add", "~mul"}
    assert all(set(row) == {"all", "add", "mul"} for row in grid["accuracy"].values())
    assert all(c["passed"] for c in E.partition_checks(grid))
    for b in grid["behavior"].values():
        for op in ("add", "mul"):
            assert sum(b[op].values()) == pytest.approx(1)


def test_aggregate_rejects_missing_cells():
    with pytest.raises(ValueError):
        R.aggregate_grids([{"a": {"x": 1.0}}, {"a": {}}])


def test_aggregate_mean_std():
    agg = R.aggregate_grids([{"m": {"s": 0.5}}, {"m": {"s": 1.0}}])
    assert agg["m"]["s"]["mean"] == pytest.approx(75)
    assert agg["m"]["s"]["std"] == pytest.approx(np.std([50, 100], ddof=1))


def test_variants(session):
    E.run_stages(session)
    v = E.resolve_variants(session, ["hybrid:add", "~mul", "add"])
    first, last = session.model.io_names()
    h = v["hybrid:add"]
    for n in first + last:
        assert np.array_equal(h.bits[n], session.bits["add"].bits[n])
    assert np.array_equal(h.bits["layer0.weight"], session.bits["add"].bits["layer0.weight"])
    with pytest.raises(KeyError):
        E.resolve_variants(session, ["nope"])


def test_fork_is_independent(session):
    other = session.fork()
    other.params["layer0.weight"].data[:] = 0
    assert session.params["layer0.weight"].data.any()
    assert other.task is session.task


def test_parse_filter():
    assert E.parse_filter("all") is None
    assert E.parse_filter("op=add") == ("op", True, 0)
    assert E.parse_filter("label!=3") == ("label", False, 3)
    with pytest.raises(ValueError):
        E.parse_filter("op~add")


def test_double_add_copy_io():
    s = E.Session(tiny("double-add", (80, 24, 40), [{"name": "pair1", "filter": "pair=1"},
                                                   {"name": "pair2", "filter": "pair=2"}]), 0)
    E.copy_io(s)
    w0 = s.params["layer0.weight"].data
    assert np.array_equal(w0[:40], w0[40:])
    w1, b1 = s.params["layer1.weight"].data, s.params["layer1.bias"].data
    assert np.array_equal(w1[:, :20], w1[:, 20:]) and np.array_equal(b1[:20], b1[20:])
    # identical I/O means the network answers both pairs identically
    splits = s.task.eval_splits()
    assert set(splits) == {"all", "pair1", "pair2"}


def test_copy_io_sanity_runs():
    s = E.Session(tiny("double-add", (80, 24, 40), [{"name": "pair1", "filter": "pair=1"},
                                                   {"name": "pair2", "filter": "pair=2"}]), 0)
    E.train_weights_stage(s)
    res = E.copy_io_sanity(s)
    assert set(res["sharing"]["per_layer"]) == {"layer0", "layer1"}
    assert not s.bits  # the original session is untouched


def test_stability_and_half_mask(session):
    res = E.stability(session, "add", (1, 2))
    assert 0 <= res["iou"] <= res["iomin"] <= 1
    assert {"add@1", "add@2"} <= set(session.bits)
    E.run_stages(session, ["add"])
    hm = E.half_mask(session, "add")
    assert hm["split"] == "add" and {"mask-late", "mask-early"} <= set(hm)


def test_alpha_sweep_rows(session):
    cfg = tiny(stages=[{"name": "full"}, {"name": "add", "filter": "op=add"}, {"name": "mul", "filter": "op=mul"}],
               sweep={"alphas": [0.0, 1e-3], "steps": 5})
    s = E.Session(cfg, 0)
    E.train_weights_stage(s)
    res = E.alpha_sweep(s)
    assert [r["alpha"] for r in res["rows"]] == [0.0, 1e-3]
    assert all("sharing_iou" in r for r in res["rows"])


def test_leave_one_out(mini_mnist_dir):
    cfg = tiny("mnist-leave-one-out", (784, 16, 10), [{"name": "full"}],
               data={"mnist_dir": str(mini_mnist_dir)}, leave_one_out={"classes": [0, 1], "steps": 3})
    s = E.Session(cfg, 0)
    E.train_weights_stage(s)
    res = E.leave_one_out(s)
    assert set(res["deltas"]) == {"0", "1"}
    for d in res["deltas"].values():
        assert d["max_row_sum_error"] <= 1e-6
    last = s.model.io_names()[1]
    for n in last:
        assert np.array_equal(s.bits["without-0"].bits[n], s.bits["full"].bits[n])


def test_transfer_sequence_pins_and_reports(mini_mnist_dir):
    cfg = tiny("permuted-mnist", (784, 16, 12, 10), [], data={"mnist_dir": str(mini_mnist_dir)},
               transfer={"num_tasks": 3, "steps": 4, "k": 2})
    res = E.transfer_sequence(cfg, 0)
    assert len(res["tasks"]) == 3
    assert all(t["frozen_weights_unchanged"] for t in res["tasks"])
    assert all(v == 0 for v in res["tasks"][0]["shared_with_previous"].values())
    # the first layer is never occupied
    assert all(t["shared_with_previous"]["layer0"] == 0 for t in res["tasks"])


def test_task_relative_sharing():
    cur = BinaryMask({"w": np.array([1, 1, 1, 1, 0], bool)})
    prev = BinaryMask({"w": np.array([1, 0, 0, 0, 1], bool)})
    assert E.task_relative_sharing(cur, prev, [("l", ["w"])]) == {"l": 0.25}


def test_stability_same_seed_is_one(session):
    assert E.stability_iou(session, "add", 4, 4) == 1.0


def test_joint_train_respects_pins():
    from weightmask import masks as M
    from weightmask.tasks import gen_addmul
    from weightmask.training import joint_train

    s = E.Session(tiny(), 0)
    p = s.params
    pin = np.zeros(p["layer0.weight"].shape, bool)
    pin[:5] = True
    p.freeze(["layer1.bias"])
    p.freeze_elements("layer0.weight", pin)
    before = p.snapshot()
    mask = M.init_mask(p)
    joint_train(s.model, mask, gen_addmul, 3, np.random.default_rng(0), np.random.default_rng(1), batch_size=8, k=2)
    w = p["layer0.weight"].data
    assert np.array_equal(w[pin], before["layer0.weight"][pin])
    assert not np.array_equal(w[~pin], before["layer0.weight"][~pin])
    assert np.array_equal(p["layer1.bias"].data, before["layer1.bias"])
    assert not np.allclose(mask.logits["layer0.weight"].data, M.logit(0.9))
