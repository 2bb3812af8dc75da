import numpy as np

from dchag import tensor as T
from dchag.tensor import Tensor
from dchag.tracking import AllocTracker, activate, alloc_tag


def test_views_not_charged():
    tr = AllocTracker()
    with activate(tr):
        x = Tensor(np.zeros((4, 4)))
        base = tr.live_bytes
        assert base == 128
        y = T.transpose(x, (1, 0))
        z = T.narrow(x, 0, 0, 2)
        assert tr.live_bytes == base
        del y, z, x
    assert tr.live_bytes == 0


def test_peak_and_tag_accounting():
    tr = AllocTracker()
    with activate(tr):
        with alloc_tag("tokenize"):
            a = Tensor(np.zeros(16))  # 128 bytes
        with alloc_tag("aggregate"):
            b = Tensor(np.zeros(32))  # 256 bytes
        assert tr.live_bytes == 384
        assert tr.per_tag_peak["tokenize"] == 128
        assert tr.per_tag_peak["aggregate"] == 256
        del a
        assert tr.live_bytes == 256
        assert tr.peak_bytes == 384
        # sum of per-tag live equals total live
        assert sum(tr.per_tag_live.values()) == tr.live_bytes
        del b
    assert tr.live_bytes == 0
    assert tr.peak_bytes == 384


def test_release_follows_allocation_tag():
    tr = AllocTracker()
    with activate(tr):
        with alloc_tag("vit"):
            a = Tensor(np.zeros(8))
        # released outside the tag scope, still debited to "vit"
        del a
        assert tr.per_tag_live["vit"] == 0


def test_graph_release_is_deterministic():
    tr = AllocTracker()
    with activate(tr):
        x = Tensor(np.zeros((8, 8)), requires_grad=True)
        y = T.matmul(x, x)
        loss = T.sum_all(y)
        held = tr.live_bytes
        assert held > 0
        del y  # still alive through loss's parents
        assert tr.live_bytes == held
        del loss
        assert tr.live_bytes == x.data.nbytes


def test_flops_counted_per_tag():
    tr = AllocTracker()
    with activate(tr):
        with alloc_tag("vit"):
            a = Tensor(np.zeros((3, 4)))
            b = Tensor(np.zeros((4, 5)))
            T.matmul(a, b)
    assert tr.per_tag_flops["vit"] == 2 * 3 * 5 * 4
