"""Smoke tests for the python bindings. Plain asserts, no test framework."""

import json
import os
import tempfile

import numpy as np

import armamba


def check_layout():
    lay = armamba.make_layout(192, 16, 64)
    assert lay.num_clusters == 9
    assert lay.grid_h == 3 and lay.grid_w == 3
    assert lay.patches_per_cluster == 16
    assert lay.perm == list(range(9))
    assert armamba.order_permutation(3, 3, "col-forward") == [0, 3, 6, 1, 4, 7, 2, 5, 8]
    assert sorted(armamba.order_permutation(5, 4, "random", seed=3)) == list(range(20))

    for count, cluster in [(4, 96), (9, 64), (16, 48), (36, 32), (144, 16)]:
        assert armamba.make_layout(192, 16, cluster).num_clusters == count

    try:
        armamba.make_layout(192, 16, 50)
    except armamba.ArmambaError:
        pass
    else:
        raise AssertionError("divisibility violation not raised")


def check_patchify_roundtrip():
    rng = np.random.default_rng(0)
    img = rng.random((64, 64, 3), dtype=np.float32)
    lay = armamba.make_layout(64, 8, 16, order="random", seed=11)
    tokens = armamba.patchify(img, lay)
    assert tokens.shape == (64, 8 * 8 * 3)
    back = armamba.unpatchify(tokens, lay)
    assert np.array_equal(back, img)


def numpy_reference_scan(a_bar, b_bar, c, x):
    bsz, length, d, n = a_bar.shape
    h = np.zeros((bsz, d, n), dtype=a_bar.dtype)
    y = np.zeros_like(x)
    for t in range(length):
        h = a_bar[:, t] * h + b_bar[:, t] * x[:, t][:, :, None]
        y[:, t] = np.einsum("bdn,bn->bd", h, c[:, t])
    return y


def check_scan_kernels():
    rng = np.random.default_rng(1)
    bsz, length, d, n = 2, 33, 4, 8
    a_bar = rng.uniform(0.05, 0.95, (bsz, length, d, n))
    b_bar = rng.uniform(-1, 1, (bsz, length, d, n))
    c = rng.uniform(-1, 1, (bsz, length, n))
    x = rng.uniform(-1, 1, (bsz, length, d))

    want = numpy_reference_scan(a_bar, b_bar, c, x)
    seq = armamba.scan_recurrent(a_bar, b_bar, c, x)
    par = armamba.scan_parallel(a_bar, b_bar, c, x, chunk=8)
    assert np.max(np.abs(seq - want)) < 1e-12
    assert np.max(np.abs(par - seq)) < 1e-12

    # zoh closed form: a=-1, dt=ln2 -> a_bar = b_bar = 0.5
    a = np.full((1, 1), -1.0)
    dt = np.full((1, 1, 1), np.log(2.0))
    b = np.full((1, 1, 1), 1.0)
    abar, bbar = armamba.zoh_discretize(a, dt, b)
    assert abs(abar[0, 0, 0, 0] - 0.5) < 1e-14
    assert abs(bbar[0, 0, 0, 0] - 0.5) < 1e-14

    # LTI kernel path agrees with the recurrence for constant parameters
    a2 = rng.uniform(0.1, 0.9, (d, n))
    b2 = rng.uniform(-1, 1, (d, n))
    c1 = rng.uniform(-1, 1, n)
    xs = rng.uniform(-1, 1, (1, 16, d))
    lifted = armamba.scan_recurrent(
        np.broadcast_to(a2, (1, 16, d, n)).copy(),
        np.broadcast_to(b2, (1, 16, d, n)).copy(),
        np.broadcast_to(c1, (1, 16, n)).copy(),
        xs,
    )
    kern = armamba.lti_kernel_apply(a2, b2, c1, xs)
    assert np.max(np.abs(kern - lifted)) < 1e-10


def check_arch_arithmetic():
    assert armamba.swiglu_hidden(768) == 2048
    base = {"width": 768, "depth": 12, "state_dim": 16, "patch_size": 16,
            "cluster_size": 64, "image_h": 192, "image_w": 192}
    count = armamba.encoder_param_count(json.dumps(base))
    assert 0.85 * 85e6 < count < 1.15 * 85e6


def check_dataset_and_training(tmp):
    packed = os.path.join(tmp, "toy.armd")
    manifest = packed + ".manifest.json"
    armamba.generate_synthetic(packed, manifest, classes=4, train_per_class=8,
                               val_per_class=4, size=16, seed=5)
    ds = armamba.PackedDataset.read(packed)
    assert ds.count == 4 * 12
    img = ds.image(0)
    assert img.shape == (16, 16, 3) and img.dtype == np.uint8
    labels = [ds.label(i) for i in range(ds.count)]
    assert all(labels.count(c) == 12 for c in range(4))

    cfg = {
        "model": {"width": 16, "depth": 1, "state_dim": 2, "patch_size": 4,
                  "cluster_size": 8, "image_h": 16, "image_w": 16,
                  "dec_depth": 1, "dec_width": 16, "num_classes": 4},
        "train": {"batch_size": 8, "epochs": 1, "warmup_epochs": 1,
                  "base_lr": 0.008, "ema_decay": 0.9, "dataset": packed},
    }
    cfg_path = os.path.join(tmp, "cfg.json")
    with open(cfg_path, "w") as f:
        json.dump(cfg, f)

    pre = armamba.run_pretrain(cfg_path, os.path.join(tmp, "pre"), seed=1, deterministic=True)
    assert pre["steps"] == 4
    assert all(np.isfinite(v) for v in pre["losses"])
    assert os.path.exists(pre["final_ckpt"])

    fin = armamba.run_finetune(cfg_path, pre["final_ckpt"], os.path.join(tmp, "fin"), seed=1)
    assert 0.0 <= fin["best_top1"] <= 1.0
    assert os.path.exists(fin["best_ckpt"])


def check_selfcheck():
    results = armamba.selfcheck(full=False)
    assert results and all(r["passed"] for r in results), results


def main():
    armamba.set_num_workers(1)
    check_layout()
    check_patchify_roundtrip()
    check_scan_kernels()
    check_arch_arithmetic()
    check_selfcheck()
    with tempfile.TemporaryDirectory() as tmp:
        check_dataset_and_training(tmp)
    print("python smoke tests passed")


if __name__ == "__main__":
    main()
