"""Smoke test for the invnorm_py extension.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/invnorm_py-*.whl
"""

import math
import os
import random
import sys
import tempfile

import invnorm_py as inv


def rand_tensor(shape, seed):
    rng = random.Random(seed)
    n = math.prod(shape)
    return [rng.uniform(-3.0, 3.0) for _ in range(n)]


def max_abs_diff(a, b):
    return max(abs(x - y) for x, y in zip(a, b))


def main():
    shape = (2, 3, 16, 16)
    x = rand_tensor(shape, 0)

    model = inv.Model(channels=3, steps_per_block=2, hidden=8, seed=1)
    model.initialize(x, shape)
    assert model.initialized

    enc = model.encode(x, shape)
    feats, fshape = enc.features
    assert fshape == (2, 48, 4, 4), fshape
    back, bshape = model.decode(enc)
    assert bshape == shape
    err = max_abs_diff(back, x)
    assert err < 1e-4, err
    assert len(enc.logdet) == 2
    assert abs(enc.logdet[0] - model.logdet((1, 3, 16, 16))) < 1e-6

    y, yshape = model.forward(x, shape)
    assert yshape == shape and all(math.isfinite(v) for v in y)

    # identity flows: per-channel affine pixel changes vanish after IN
    ident = inv.Model(channels=3, steps_per_block=2, hidden=8, seed=2, identity=True)
    x2 = [2.0 * v + 0.5 for v in x]
    y1, _ = ident.forward(x, shape)
    y2, _ = ident.forward(x2, shape)
    assert max_abs_diff(y1, y2) < 0.1 * max_abs_diff(x, x2)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.flow")
        model.save(path)
        again = inv.Model.load(path)
        assert again.forward(x, shape)[0] == y
        with open(path, "r+b") as f:
            f.seek(-1, os.SEEK_END)
            last = f.read(1)
            f.seek(-1, os.SEEK_END)
            f.write(bytes([last[0] ^ 0xFF]))
        try:
            inv.Model.load(path)
        except ValueError:
            pass
        else:
            raise AssertionError("corrupt checkpoint accepted")

    rows = inv.roundtrip_check(shapes=[(1, 3, 8, 8)], trials=2)
    assert rows[0]["max_err"] < 1e-4 and rows[0]["squeeze_exact"]
    for row in inv.logdet_check():
        assert row["report"]["abs_err"] < 1e-2, row
    grads = inv.gradcheck(layers=["actnorm", "instance-norm"])
    assert all(v < 1e-3 for v in grads.values()), grads

    try:
        model.forward(x[:-1], shape)
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch accepted")

    summary = inv.leave_one_domain("dim", epochs=1, n_per_domain=20, classes=2, hw=16)
    for variant in ("baseline", "invnorm"):
        acc = summary[variant]["held_out_accuracy"]
        assert 0.0 <= acc <= 1.0, acc
    assert summary["invnorm"]["params_total"] > summary["baseline"]["params_total"]

    print("smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
