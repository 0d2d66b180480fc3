#!/usr/bin/env python3
"""Smoke test for the f2at_py extension module.

Build the module first:

    cargo build -p f2at-py            # or --release

then run this script from anywhere inside the repository:

    python3 python/smoke_test.py
"""

import json
import math
import os
import shutil
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def locate_module():
    """Copy the built cdylib next to a temp dir as f2at_py.so and import it."""
    candidates = [
        os.path.join(REPO, "target", profile, name)
        for profile in ("release", "debug")
        for name in ("libf2at_py.so", "f2at_py.so", "libf2at_py.dylib")
    ]
    built = [p for p in candidates if os.path.exists(p)]
    if not built:
        sys.exit("no built module found; run `cargo build -p f2at-py` first")
    staging = tempfile.mkdtemp(prefix="f2at-py-")
    shutil.copy(built[0], os.path.join(staging, "f2at_py.so"))
    sys.path.insert(0, staging)
    import f2at_py

    return f2at_py


def approx(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    f = locate_module()
    failures = []

    def check(ok, label):
        print(f"  {'ok' if ok else 'FAIL'}  {label}")
        if not ok:
            failures.append(label)

    # Quantization round trip at byte depth.
    check(f.max_value(8) == 255, "max_value(8) == 255")
    q = f.quantize([0.0, 0.5, 1.0, 0.25], 8, 1, 2, 2)
    check(q == [0, 128, 255, 64], f"quantize corners -> {q}")
    d = f.dequantize(q, 8, 1, 2, 2)
    check(all(approx(x, y, 1 / 510) for x, y in zip(d, [0.0, 0.5, 1.0, 0.25])),
          "dequantize returns to within half a level")

    # Bit-plane split: 255 at K=2 keeps 192 on top, leaves 63 below.
    nat, pert = f.slice([255, 128, 7, 0], 8, 1, 2, 2, 2)
    check(nat == [192, 128, 0, 0] and pert == [63, 0, 7, 0],
          f"slice K=2 -> natural {nat}, perturbed {pert}")
    check(all(n + p == v for n, p, v in zip(nat, pert, [255, 128, 7, 0])),
          "natural + perturbed reconstructs the input")

    # Identical batches never disagree on any plane.
    batch = [[3, 77, 200, 255], [0, 1, 2, 3]]
    check(f.discrepancy_ratio(batch, batch, 8, 1, 2, 2, 4) == 0.0,
          "discrepancy of a batch with itself is zero")

    # Information identities on an independent pair: MI must be zero and
    # every residual at enumeration precision.
    report = f.verify_identities([0.25, 0.25, 0.25, 0.25], [2, 2])
    worst = max(report.values())
    check(worst <= 1e-12, f"identity residuals on an independent table: {worst:.2e}")

    theorems = f.verify_theorems(1, 3, 3, 3)
    check(theorems["decomposition_residual"] <= 1e-12,
          f"decomposition residual {theorems['decomposition_residual']:.2e}")
    check(theorems["pattern_sufficiency_residual"] <= 1e-12,
          f"pattern sufficiency residual {theorems['pattern_sufficiency_residual']:.2e}")
    print(f"       triple MI {theorems['triple_mi']:+.4f} (reported, not asserted)")

    # Margins by hand: logits [[2,0],[0,1]] with labels [0,1].
    logits = [2.0, 0.0, 0.0, 1.0]
    margins = f.margins(logits, 2, 2, [0, 1])
    check(margins == [2.0, 1.0], f"margins {margins}")
    # The hard margin loss hinges at zero: all-correct batches cost 0,
    # a one-point error in one of two rows costs 0.5.
    check(f.margin_loss(logits, 2, 2, [0, 1]) == 0.0, "margin loss of a correct batch is 0")
    check(f.margin_loss([0.0, 1.0, 0.0, 3.0], 2, 2, [0, 1]) == 0.5,
          "margin loss charges the misclassified row")
    soft = f.soft_margin_loss(logits, 2, 2, [0, 1], 1000.0)
    check(soft >= -1.5 and approx(soft, -1.5, 1e-6),
          f"soft margin at high sharpness {soft:.8f}")

    # Pattern-dependent loss on tiny feature rows: finite and real.
    pd = f.pattern_dependent_loss([1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 1.0, 0.0],
                                  [1.0, 0.0, 0.0, 1.0], 2, 2, 0.07)
    check(math.isfinite(pd), f"pattern-dependent loss {pd:.4f} is finite")

    # A miniature end-to-end run: train, evaluate, attack, round-trip.
    imgs, labels, (c, h, w) = f.synth_dataset(0, 24, 2, 8)
    check(len(imgs) == 24 and (c, h, w) == (3, 8, 8), "synthetic dataset dimensions")

    model, metrics = f.train_synth(seed=5, n=48, eval_n=16, epochs=1, batch_size=16,
                                   steps=2, base_lr=0.002, alpha=0.01, gamma=0.3,
                                   augment=False)
    records = [json.loads(line) for line in metrics.splitlines()]
    check(len(records) == 1 and "clean_acc" in records[0], "metrics parse as JSONL")

    flat = [x for im in imgs[:8] for x in f.dequantize(im, 8, c, h, w)]
    preds = model.predict(flat, 8, c, h, w)
    check(len(preds) == 8 and all(p in (0, 1) for p in preds), "predictions are labels")
    adv = model.attack(flat, labels[:8], 8, c, h, w, method="pgd",
                       epsilon=8 / 255, steps=2, step_size=0.007,
                       random_start=True, seed=3)
    worst = max(abs(a - x) for a, x in zip(adv, flat))
    check(len(adv) == len(flat) and worst <= 8 / 255 + 1e-9,
          f"adversarial batch stays in the ball (max shift {worst:.5f})")
    robust = sum(p == y for p, y in zip(model.predict(adv, 8, c, h, w), labels[:8])) / 8
    check(0.0 <= robust <= 1.0, f"robust accuracy under a short attack {robust:.3f}")

    with tempfile.TemporaryDirectory(prefix="f2at-ckpt-") as d:
        path = os.path.join(d, "model.f2at")
        model.save(path)
        again = f.Model.load(path)
        check(again.logits(flat, 8, c, h, w) == model.logits(flat, 8, c, h, w),
              "checkpoint round trip preserves logits exactly")

    if failures:
        sys.exit(f"{len(failures)} smoke check(s) failed")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
