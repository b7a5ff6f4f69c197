"""Smoke test for the slatlab Python extension.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml --features extension-module`.
"""

import math

import slatlab


def main():
    x, y = slatlab.toy_data(n_per_class=200, seed=0)
    assert len(x) == 400 and set(y) == {0, 1}

    model = slatlab.Model.toy_mlp(hidden=16, activation="relu", seed=0)
    assert model.sites == [0, 1]
    assert abs(model.eta[0] - 0.1) < 1e-12

    before = slatlab.accuracy(model, x, y)
    losses = slatlab.train_toy(model, "slat", epochs=10, n_per_class=200, seed=0)
    after = slatlab.accuracy(model, x, y)
    assert all(math.isfinite(l) for l in losses)
    assert after > max(before, 0.9), (before, after)

    adv = slatlab.fgsm(model, x[:8], y[:8], 0.1)
    assert max(abs(a - b) for ra, rb in zip(adv, x[:8]) for a, b in zip(ra, rb)) <= 0.1 + 1e-12
    deltas = slatlab.latent_deltas(model, x[:8], y[:8])
    assert sorted(deltas) == [0, 1]

    ratio = slatlab.boundary_ratio(model)
    assert ratio >= 0.0
    assert slatlab.cyclic_lr(0, 100, 0.2, 0.4) == 0.0

    print(f"ok: accuracy {before:.3f} -> {after:.3f}, boundary ratio {ratio:.3g}, {model!r}")


if __name__ == "__main__":
    main()
