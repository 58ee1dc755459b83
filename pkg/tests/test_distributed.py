from __future__ import annotations

import json

import numpy as np
import pytest

from conadv.config import TrainConfig
from conadv.data import load_dataset
from conadv.distributed import (
    TIMING_FIELDS,
    AccessTrace,
    BufferEntry,
    ProtocolError,
    StaleBuffer,
    aggregate,
    build_state,
    run_training,
    shard_dataset,
    sharded_gradient,
)
from conadv.model import Branch, LabeledBatch, Phase, combine_halves, half_loss_and_grads, init_params, make_architecture

BLOBS = "blobs:n=512,d=16,classes=4,seed=3,test=128"


@pytest.fixture(scope="module")
def blobs():
    return load_dataset(BLOBS)


def _cfg(**kw):
    base = dict(model="mlp", widths="16,8", global_batch=32, epochs=1, epsilon=0.05, alpha=0.05,
                base_lr=0.1, output_dir="unused", dataset=BLOBS)
    base.update(kw)
    return TrainConfig(**base)


def _same_trajectory(a, b):
    assert [m.loss for m in a.steps] == [m.loss for m in b.steps]
    for k in a.params.tensors:
        np.testing.assert_array_equal(a.params.tensors[k], b.params.tensors[k])


def test_shard_dataset():
    shards = shard_dataset(10, 3, seed=0)
    assert [s.size for s in shards] == [3, 3, 3]
    joined = np.concatenate(shards)
    assert np.unique(joined).size == 9 and joined.max() < 10
    np.testing.assert_array_equal(np.concatenate(shard_dataset(10, 3, seed=0)), joined)
    with pytest.raises(ValueError):
        shard_dataset(2, 3, 0)
    with pytest.raises(ValueError):
        shard_dataset(5, 0, 0)


def test_aggregate_example_and_errors():
    out = aggregate([{"w": np.array([1.0, 2.0])}, {"w": np.array([3.0, 4.0])}])
    np.testing.assert_array_equal(out["w"], [2.0, 3.0])
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError, match="keys"):
        aggregate([{"w": np.ones(2)}, {"v": np.ones(2)}])
    with pytest.raises(ValueError, match="shape"):
        aggregate([{"w": np.ones(2)}, {"w": np.ones(3)}])


@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_shard_mean_matches_full_batch(k):
    rng = np.random.default_rng(k)
    params = init_params(make_architecture("cnn", (8, 8, 1), 4, widths=(4, 4)), 0)
    for s in params.bn.values():
        s.main_mean, s.aux_mean = rng.standard_normal(s.main_mean.shape), rng.standard_normal(s.aux_mean.shape)
        s.main_var, s.aux_var = rng.random(s.main_var.shape) + 0.5, rng.random(s.aux_var.shape) + 0.5
    clean = LabeledBatch(rng.random((16, 8, 8, 1)), rng.integers(0, 4, 16))
    adv = LabeledBatch(np.clip(clean.inputs + 0.03 * rng.standard_normal(clean.inputs.shape), 0, 1), clean.labels)
    full_loss, full = combine_halves(half_loss_and_grads(params.copy(), clean, Branch.MAIN, Phase.EVAL),
                                     half_loss_and_grads(params.copy(), adv, Branch.AUX, Phase.EVAL))
    loss, grads = sharded_gradient(params, clean, adv, k)
    assert loss == pytest.approx(full_loss, abs=1e-10)
    for name in full:
        np.testing.assert_allclose(grads[name], full[name], rtol=0, atol=1e-10)


def test_sharded_gradient_rejects_uneven_split():
    params = init_params(make_architecture("mlp", (4,), 2, widths=(3,)), 0)
    batch = LabeledBatch(np.zeros((6, 4)), np.zeros(6, dtype=int))
    with pytest.raises(ValueError):
        sharded_gradient(params, batch, None, 4)


def test_tau_zero_matches_disadv(blobs):
    a = run_training(_cfg(protocol="disadv", steps=25), blobs, write_metrics=False)
    b = run_training(_cfg(protocol="conadv", tau=0, steps=25), blobs, write_metrics=False)
    _same_trajectory(a, b)


@pytest.mark.parametrize("tau", [1, 3])
def test_overlap_matches_sequential(blobs, tau):
    a = run_training(_cfg(protocol="conadv", tau=tau, steps=20, workers=2), blobs, write_metrics=False)
    b = run_training(_cfg(protocol="conadv", tau=tau, steps=20, workers=2, execution="overlap", update_threads=2),
                     blobs, write_metrics=False)
    _same_trajectory(a, b)


def test_staleness_changes_trajectory(blobs):
    a = run_training(_cfg(protocol="conadv", tau=0, steps=10), blobs, write_metrics=False)
    b = run_training(_cfg(protocol="conadv", tau=2, steps=10), blobs, write_metrics=False)
    assert a.steps[0].loss == b.steps[0].loss
    assert [m.loss for m in a.steps] != [m.loss for m in b.steps]


def test_zero_radius_with_frozen_bn_equals_vanilla(blobs):
    kw = dict(steps=15, epsilon=0.0, bn_train_stats="frozen")
    a = run_training(_cfg(protocol="vanilla", **kw), blobs, write_metrics=False)
    b = run_training(_cfg(protocol="conadv", tau=1, **kw), blobs, write_metrics=False)
    for x, y in zip(a.steps, b.steps):
        assert x.loss == pytest.approx(y.loss, abs=1e-12)
    for k in a.params.tensors:
        np.testing.assert_allclose(a.params.tensors[k], b.params.tensors[k], rtol=0, atol=1e-12)


def test_stale_buffer_tags():
    buf = StaleBuffer(2)
    batch = LabeledBatch(np.zeros((2, 3)), np.zeros(2, dtype=int))
    buf.push(BufferEntry(0, 0, batch))
    buf.push(BufferEntry(0, 1, batch))
    with pytest.raises(ProtocolError, match="expected target"):
        buf.push(BufferEntry(0, 3, batch))
    assert buf.pop(0).gen_step == 0
    with pytest.raises(ProtocolError, match="consumer"):
        buf.pop(5)
    buf2 = StaleBuffer(2)
    buf2.push(BufferEntry(1, 4, batch))
    with pytest.raises(ProtocolError, match="crafted from weights"):
        buf2.pop(4)
    with pytest.raises(ProtocolError, match="empty"):
        StaleBuffer(1).pop(0)
    with pytest.raises(ValueError):
        StaleBuffer(-1)


def test_access_stays_within_shard(blobs):
    trace = AccessTrace()
    cfg = _cfg(protocol="conadv", tau=2, steps=12, workers=4)
    run_training(cfg, blobs, write_metrics=False, trace=trace)
    _, workers, _ = build_state(cfg, blobs)
    for w in workers:
        touched = trace.touched(w.worker_id)
        assert touched.size > 0
        assert np.isin(touched, w.shard).all()
    with pytest.raises(ProtocolError):
        trace.record(0, None)


def test_metrics_file_counts_and_determinism(blobs, tmp_path):
    cfg = _cfg(protocol="conadv", tau=1, epochs=3, eval_every=1)
    paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
    for p in paths:
        run_training(cfg, blobs, metrics_path=p)
    records = [[json.loads(line) for line in p.read_text().splitlines()] for p in paths]
    types = [r["type"] for r in records[0]]
    total = cfg.total_steps(len(blobs))
    assert types[0] == "config" and records[0][0]["total_steps"] == total
    assert types.count("step") == total
    assert types.count("epoch") == 3
    assert [r["step"] for r in records[0] if r["type"] == "step"] == list(range(total))
    for ra, rb in zip(*records):
        for f in TIMING_FIELDS:
            ra.pop(f, None)
            rb.pop(f, None)
        assert ra == rb


def test_final_only_evaluation(blobs):
    out = run_training(_cfg(protocol="vanilla", epochs=2, eval_every=0), blobs, write_metrics=False)
    assert len(out.epochs) == 1 and out.epochs[0]["step"] == len(out.steps)
