"""Smoke test for the `vsid` extension module.

Build the module first (see README), then run:

    python python/smoke_test.py [DIR_WITH_vsid.so]
"""

import math
import os
import sys
import tempfile

if len(sys.argv) > 1:
    sys.path.insert(0, sys.argv[1])

import vsid

TINY = dict(maxlen=3, vocab=8, hidden=16, model_dim=16, n_layers=1, ffn_hidden=32, batch_size=32)


def main():
    cat = vsid.Catalog.synth(items=200, dim=8, clusters=10, interactions=5000, seed=3)
    assert len(cat) == 200 and cat.dim == 8
    assert len(cat.popularity) == 200 and len(cat.cold) == 200
    assert len(cat.embeddings()[0]) == 8

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "cat.bin")
        cat.save(path)
        again = vsid.Catalog.load(path)
        assert again.popularity == cat.popularity

        model = vsid.train(cat, steps=20, lambda_=2, seed=3, **TINY)
        assert model.kind == "dvae" and model.max_len == 3
        codes = model.encode(cat)
        assert len(codes) == 200
        assert all(1 <= len(c) <= 3 and all(0 <= t < 8 for t in c) for c in codes)

        ck = os.path.join(tmp, "model.ck")
        model.save(ck)
        assert vsid.Model.load(ck).encode(cat) == codes

        report = model.evaluate(cat, n_users=20)
        assert 1.0 <= report["micro_ppl"] <= 8.0
        assert report["l_cand"] >= 2.0

    km = vsid.fit_rkmeans(cat, maxlen=3, vocab=8)
    assert all(len(c) == 3 for c in km.encode(cat))

    rf = vsid.train_reinforce(cat, steps=5, **TINY)
    assert rf.kind == "reinforce" and len(rf.encode(cat)) == 200

    assert vsid.micro_ppl([[0], [1]]) == 2.0
    err = vsid.gradcheck()
    assert err < 1e-4, err

    try:
        vsid.train(cat, no_such_setting=1)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown setting accepted")

    print(f"python smoke test ok: gradcheck {err:.2e}, micro_ppl {report['micro_ppl']:.3f}")
    assert math.isfinite(report["recon"])


if __name__ == "__main__":
    main()
