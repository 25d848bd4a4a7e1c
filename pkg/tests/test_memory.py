import threading

import numpy as np
import pytest

from leading.encoder import EncoderConfig, encode, init_params
from leading.graph import from_edge_list, synthetic_graph
from leading.memory import MemoryBank, init_bank
from leading.sampler import pipeline2_batches


def small():
    g = from_edge_list(3, [(0, 1), (1, 2)], tokens=[["a"], ["b", "c"], []])
    p = init_params(EncoderConfig(vocab_size=32, d_emb=4, hidden=4, d_out=3))
    return g, p


def test_init_matches_encode_and_versions():
    g, p = small()
    bank = init_bank(p, g)
    assert bank.version.tolist() == [1, 1, 1]
    for i in range(3):
        np.testing.assert_array_equal(bank.read([i])[0], encode(p, [g.tokens[i]])[0])
    assert bank.staleness_report(0).max == 0


def test_zero_encoder_gives_zero_bank():
    g, _ = small()
    p = init_params(EncoderConfig(vocab_size=32, d_emb=4, hidden=4, d_out=3, init_scale=0.0))
    assert not init_bank(p, g).table.any()


def test_write_read_and_isolation():
    g, p = small()
    bank = init_bank(p, g)
    before = bank.read([0, 1])
    e = np.full((1, 3), 7.0)
    bank.write([2], e, step=1)
    np.testing.assert_array_equal(bank.read([2]), e)
    assert bank.read([0, 1]).tobytes() == before.tobytes()
    bank.write([2], e + 1, step=2)
    assert bank.version.tolist() == [1, 1, 3]
    np.testing.assert_array_equal(bank.read([2, 0])[1], before[0])


def test_write_errors():
    g, p = small()
    bank = init_bank(p, g)
    with pytest.raises(ValueError, match="duplicate"):
        bank.write([1, 1], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        bank.write([1], np.zeros((2, 3)))
    with pytest.raises(IndexError):
        bank.read([3])
    with pytest.raises(IndexError):
        bank.write([5], np.zeros((1, 3)))


def test_staleness_counts_steps():
    g, p = small()
    bank = init_bank(p, g)
    bank.write([0], np.zeros((1, 3)), step=4)
    rep = bank.staleness_report(9)
    assert rep.per_node.tolist() == [5, 9, 9]
    assert rep.max == 9 and rep.mean == pytest.approx(23 / 3)


def test_one_refresh_epoch_bounds_staleness():
    g = synthetic_graph(120, 2, 0.2, 0.02, seed=0, train_per_class=5)
    p = init_params(EncoderConfig(vocab_size=128, d_emb=4, hidden=4, d_out=2))
    bank = init_bank(p, g)
    batches = pipeline2_batches(g.num_nodes, 16, run_seed=3, epoch=0)
    step = 0
    for ids in batches:
        step += 1
        bank.write(ids, encode(p, [g.tokens[i] for i in ids]), step=step)
    assert np.all(bank.version == 2)
    assert bank.staleness_report(step).max <= len(batches)


def test_save_load_roundtrip(tmp_path):
    g, p = small()
    bank = init_bank(p, g)
    bank.write([1], np.ones((1, 3)), step=3)
    bank.save(tmp_path / "bank.bin")
    back = MemoryBank.load(tmp_path / "bank.bin")
    for k, v in bank.tensors().items():
        assert back.tensors()[k].tobytes() == v.tobytes()


def test_snapshot_is_independent():
    g, p = small()
    bank = init_bank(p, g)
    snap = bank.snapshot()
    bank.write([0], np.ones((1, 3)))
    assert not np.array_equal(snap.read([0]), bank.read([0]))


def test_concurrent_reads_see_whole_rows():
    bank = MemoryBank(np.zeros((50, 64)))
    stop = threading.Event()
    torn = []

    def writer():
        for v in range(1, 300):
            bank.write(np.arange(50), np.full((50, 64), float(v)), step=v)
        stop.set()

    def reader():
        while not stop.is_set():
            rows = bank.read(np.arange(50))
            if np.any(rows.min(axis=1) != rows.max(axis=1)):
                torn.append(rows)

    threads = [threading.Thread(target=writer), threading.Thread(target=reader)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not torn
