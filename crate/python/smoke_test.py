"""Smoke test for the toxspace Python extension.

Build and install first, e.g.:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/toxspace-*.whl
then run:
    python python/smoke_test.py
"""

import math
import os
import sys
import tempfile

import toxspace


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def main():
    # Numerics.
    u, sigma, vt = toxspace.svd([[3.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
    assert [round(s, 12) for s in sigma] == [3.0, 2.0, 1.0], sigma
    basis, explained = toxspace.principal_components([[1.0, 0.0], [2.0, 0.0]], 0.9)
    assert len(basis) == 1 and abs(explained[0] - 1.0) < 1e-12

    embed = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]
    score, oriented, flipped = toxspace.tox_score([-1.0, 0.0], embed, [0], 1)
    assert score == 1.0 and flipped and oriented == [1.0, 0.0]

    # End to end on the planted fixture.
    fx = toxspace.gen_fixture(seed=3)
    model = fx.model
    cfg = model.config()
    assert cfg["n_layers"] == 4 and cfg["d_model"] == 32, cfg
    assert len(fx.bad_ids) == 10

    sub = toxspace.find_subspace(model, fx.pairs, fx.bad_ids, m=10)
    cos = abs(dot(sub.basis[0], fx.v_star))
    assert cos >= 0.9, cos
    assert 1 <= sub.r <= 4

    edited = toxspace.apply_gloss(model, sub, fx.planted_layers[0])
    before = model.badword_mass(fx.toxic_prompts, fx.bad_ids)
    after = edited.badword_mass(fx.toxic_prompts, fx.bad_ids)
    assert after <= 0.5 * before, (before, after)
    ppl0 = model.perplexity(fx.neutral_corpus)
    ppl1 = edited.perplexity(fx.neutral_corpus)
    assert ppl1 <= 1.1 * ppl0, (ppl0, ppl1)

    control = toxspace.random_control(sub, 7)
    assert control.r == sub.r
    assert all(abs(dot(c, b)) < 1e-5 for c in control.basis for b in sub.basis)

    logits = model.forward(fx.toxic_prompts[0])
    assert len(logits) == len(fx.toxic_prompts[0]) and len(logits[0]) == cfg["vocab_size"]
    assert all(math.isfinite(x) for x in logits[-1])

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "edited.tsr")
        edited.save(path)
        again = toxspace.Checkpoint.load(path)
        assert again.to_bytes() == edited.to_bytes()
        sp = os.path.join(d, "subspace.json")
        sub.save(sp)
        assert toxspace.Subspace.load(sp).basis == sub.basis
        assert toxspace.run_cli(["fixture", "gen", "--out", os.path.join(d, "fx")]) == 0

    try:
        toxspace.Checkpoint.from_bytes(b"\x01\x02")
    except toxspace.ToxspaceError:
        pass
    else:
        raise AssertionError("truncated checkpoint accepted")

    print(f"ok: r={sub.r} cos={cos:.3f} mass {before:.3f} -> {after:.3f} ppl {ppl0:.3f} -> {ppl1:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
