"""Smoke test for the blockcore_py extension module.

Build and run from the repository root:

    cargo build -p blockcore-py --features extension-module --release
    python3 python/smoke_test.py

The script looks for the compiled library under target/release when the
module is not already importable.
"""

import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_module():
    try:
        import blockcore_py  # noqa: F401
    except ImportError:
        built = os.path.join(ROOT, "target", "release", "libblockcore_py.so")
        if not os.path.exists(built):
            sys.exit("build the extension first: cargo build -p blockcore-py --features extension-module --release")
        stage = tempfile.mkdtemp()
        shutil.copy(built, os.path.join(stage, "blockcore_py.so"))
        sys.path.insert(0, stage)
    import blockcore_py

    return blockcore_py


def main():
    bc = import_module()

    # scoring: complex preset against a hand-computed value
    arch = bc.Architecture.preset("complex", 2, 2)
    assert arch.codes(2) == [1, 0, 0, 1, 0, 1, -1, 0], arch.codes(2)
    emb = bc.Embeddings.from_rows([[1.0, 2.0], [3.0, 4.0]], [[0.5, -1.0]], 2)
    # Re(<r, h, conj(t)>) with r = 0.5 - i, h = 1 + 2i, t = 3 + 4i
    expected = 0.5 * 1 * 3 + 0.5 * 2 * 4 - 1 * 1 * 4 + 1 * 2 * 3
    assert abs(arch.score(emb, 0, [0, 1]) - expected) < 1e-12
    assert bc.Architecture.from_json(arch.to_json()) == arch

    # ranking primitives
    assert bc.filtered_rank([3.0, 2.0, 1.0], 2, [0, 2]) == 2
    assert abs(bc.mrr([1, 2, 4]) - 7 / 12) < 1e-12
    assert abs(bc.hits_at([1, 2, 4], 3) - 2 / 3) < 1e-12

    # construction ranks its own facts first
    facts = [(0, [0, 1]), (1, [2, 3, 4])]
    emb, arch = bc.construct(facts, 6, 2)
    data = bc.Dataset.from_rows(
        [["r0", "e0", "e1"], ["r1", "e2", "e3", "e4"]], holdout_fraction=0.0
    )
    metrics = bc.evaluate(emb, arch, data, split="train")
    assert metrics["mrr"] == 1.0, metrics

    # planted data, a short search, retraining and a checkpoint round trip
    data, truth = bc.planted(60, 2, 8, 2, facts_per_arity=300, seed=1)
    assert len(data.facts("valid")) == 30
    found = bc.search(
        data,
        search={"lambda": 4, "search_epochs": 2, "dim": 8, "theta_lr": 0.1},
        train={"dim": 8, "segment_count": 2, "batch_size": 32, "learning_rate": 0.05},
    )
    assert len(found["trace"]) > 0
    diff = bc.diff(found["architecture"], truth)
    assert diff[2]["matched"] <= diff[2]["matched_up_to_symmetry"] <= 8
    emb, history = bc.train(truth, data, {"dim": 8, "max_epochs": 5, "learning_rate": 0.05, "patience": 0})
    assert len(history) == 5 and history[-1]["mean_loss"] < history[0]["mean_loss"]
    metrics = bc.evaluate(emb, truth, data, split="test")
    assert set(metrics) >= {"mrr", "hits1", "hits3", "hits10", "queries"}

    with tempfile.TemporaryDirectory() as tmp:
        bc.save_checkpoint(tmp, emb, truth)
        emb2, arch2, meta = bc.load_checkpoint(tmp)
        assert arch2 == truth and meta["dim"] == 8
        again = bc.evaluate(emb2, arch2, data, split="test")
        assert abs(again["mrr"] - metrics["mrr"]) < 1e-3

    # errors surface as Python exceptions
    for bad in (
        lambda: bc.Architecture.preset("tucker", 2, 2),
        lambda: bc.train(truth, data, {"epochs": 3}),
        lambda: bc.evaluate(emb, truth, data, split="dev"),
    ):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")

    print("smoke test passed: test MRR %.4f after 5 epochs" % metrics["mrr"])


if __name__ == "__main__":
    main()
