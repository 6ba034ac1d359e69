"""Smoke test for the `dna` extension module.

Build and install first, e.g. `pip install ./crates/py` (needs maturin),
then run `python python/smoke_test.py` or `pytest python/`.
"""

import json
import pathlib
import tempfile

import dna

CONFIG = """
seed = 2

[model]
d_embed = 16
d_mlp = 32
n_head = 2
n_backbone = 1
s_max = 4
k = 1
pool = { transformer-block = 3, identity = 1 }
task = { kind = "causal-lm", vocab = 16, context = 8 }

[train]
steps = 30
batch_size = 8
schedule = { kind = "warmup-cosine", warmup = 3, lr_init = 1e-6, lr_peak = 3e-3, lr_final = 1e-5 }

[data]
kind = "periodic"
period = 8
length = 256

[trace]
sequences = 6
batch_size = 4
"""


def test_model_round_trip():
    model = dna.Model(CONFIG)
    assert model.n_modules == 4
    assert model.routed_steps == 3
    seq = [list(range(8)), [3] * 8]
    before = model.logits(seq)
    assert len(before) == 16 and len(before[0]) == 16

    ribbons = model.route(seq)
    assert len(ribbons) == 2
    assert all(len(r) == 8 for r in ribbons)
    assert all(len(step) == 1 for r in ribbons for tok in r for step in tok)

    losses = model.train()
    assert len(losses) == 30
    assert losses[-1] < losses[0]

    with tempfile.TemporaryDirectory() as tmp:
        path = pathlib.Path(tmp) / "ckpt"
        model.save(str(path))
        again = dna.Model.load(str(path))
        assert again.logits(seq) == model.logits(seq)


def test_trace_and_analyze():
    model = dna.Model(CONFIG)
    with tempfile.TemporaryDirectory() as tmp:
        trace = pathlib.Path(tmp) / "trace.jsonl"
        assert model.trace(str(trace)) == 6
        lines = trace.read_text().splitlines()
        assert len(lines) == 6
        summary = json.loads(dna.analyze(str(trace), str(pathlib.Path(tmp) / "out")))
        assert summary["tokens"] == 48
        assert (pathlib.Path(tmp) / "out" / "rank_frequency.tsv").exists()


def test_bad_input_raises():
    model = dna.Model(CONFIG)
    try:
        model.logits([[0, 1, 2]])
    except ValueError as e:
        assert "8 tokens" in str(e)
    else:
        raise AssertionError("short sequence accepted")
    try:
        dna.Model(CONFIG, ["model.k=9"])
    except ValueError:
        pass
    else:
        raise AssertionError("bad override accepted")


def test_verify_subset():
    reports = dna.verify("6")
    assert len(reports) == 1
    ident, name, passed, detail = reports[0]
    assert ident == 6 and passed, detail


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"ok {name}")
