"""Built-in health checks: gradient oracles and scheme equivalences.

Every check prints one PASS/FAIL line; the entry point returns True only
when all pass. These run from the installed package with no test
dependencies, so a deployment can be audited in place.
"""

from __future__ import annotations

import tempfile

import numpy as np

from . import autodiff as ad
from . import train as trn
from . import tree
from .autodiff import Tensor
from .backbone import BackboneConfig
from .checkpoint import read_blob, write_blob
from .data import gen_synthetic, load_ppm, save_ppm
from .model import build_model


def _naive_conv2d(x, k, stride, padding):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for b in range(n):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    window = xp[b, :, i * stride:i * stride + kh,
                                j * stride:j * stride + kw]
                    out[b, o, i, j] = (window * k[o]).sum()
    return out


def check_conv_oracle() -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    for stride, padding in ((1, 0), (2, 1), (1, 2)):
        x = rng.normal(size=(2, 3, 6, 7))
        k = rng.normal(size=(4, 3, 3, 2))
        got = ad.conv2d(Tensor(x), Tensor(k), stride, padding).values
        want = _naive_conv2d(x, k, stride, padding)
        if np.abs(got - want).max() >= 1e-6:
            return False, f"mismatch {np.abs(got - want).max():.2e}"
    return True, ""


def check_softmax_oracle() -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(6, 5)) * 3
    got = ad.softmax(Tensor(logits)).values
    ext = np.exp(logits.astype(np.longdouble))
    want = (ext / ext.sum(axis=1, keepdims=True)).astype(np.float64)
    err = np.abs(got - want).max()
    return err < 1e-7, f"err {err:.2e}"


def check_full_gradients() -> tuple[bool, str]:
    config = BackboneConfig(in_channels=2, stages=((3, 3, 2),),
                            latent_depth=4, input_side=8)
    model = build_model(config, height=2, num_classes=3, seed=5,
                        dtype=np.float64)
    rng = np.random.default_rng(3)
    images = rng.uniform(0.0, 1.0, (2, 2, 8, 8))
    labels = trn.one_hot(np.array([0, 2]), 3, dtype=np.float64)

    def loss_value() -> float:
        y_hat, _ = model.predict_batch(images)
        return trn.cross_entropy(y_hat, labels).item()

    with ad.Tape() as tape:
        y_hat, _ = model.predict_batch(images)
        tape.backward(trn.cross_entropy(y_hat, labels))
    worst = 0.0
    for group in model.parameters().values():
        for param in group:
            numeric = ad.finite_difference_grad(loss_value, param)
            worst = max(worst, ad.max_relative_error(param.grad, numeric))
    return worst < 1e-4, f"max rel err {worst:.2e}"


def check_routing_normalization() -> tuple[bool, str]:
    rng = np.random.default_rng(19)
    worst = 0.0
    for height in (1, 3, 5):
        topo, bank, leaves = tree.init_tree(height, 4, 6, seed=int(height))
        latent = Tensor(rng.uniform(0, 1, (8, 6, 3, 3)).astype(np.float32))
        trace = tree.route(topo, bank, latent)
        pi = trace.leaf_probabilities.values
        worst = max(worst, np.abs(pi.sum(axis=1) - 1.0).max())
        y_hat = tree.mix_leaf_distributions(trace.leaf_probabilities,
                                            leaves.distributions()).values
        worst = max(worst, np.abs(y_hat.sum(axis=1) - 1.0).max())
    return worst < 1e-6, f"max deviation {worst:.2e}"


def check_leaf_update_equivalence() -> tuple[bool, str]:
    train_set, _ = gen_synthetic(2, 10, 32, seed=23)
    config = BackboneConfig(input_side=32, latent_depth=8,
                            stages=((8, 3, 2), (8, 3, 2)))
    worst = 0.0
    for batch_size in (20, 10, 4):
        model = build_model(config, height=2, num_classes=2, seed=2)
        reference = trn.leaf_update_full_pass(model, train_set)
        trn.train_epoch(model, train_set,
                        trn.TrainConfig(batch_size=batch_size, seed=2),
                        epoch=1, adam=None)
        worst = max(worst, np.abs(model.leaves.logits - reference).max())
    return worst < 1e-6, f"max deviation {worst:.2e}"


def check_checkpoint_roundtrip() -> tuple[bool, str]:
    rng = np.random.default_rng(31)
    tensors = {"a/b": rng.normal(size=(3, 4)).astype(np.float32),
               "scalar": np.array([7.5], dtype=np.float32),
               "deep/nested/name": rng.normal(size=(2, 1, 5)).astype(np.float32)}
    with tempfile.NamedTemporaryFile(suffix=".npt") as tmp:
        write_blob(tmp.name, tensors)
        loaded = read_blob(tmp.name)
    for name, arr in tensors.items():
        got = loaded[name]
        if got.shape != arr.shape or not (got.view(np.uint32)
                                          == arr.view(np.uint32)).all():
            return False, f"tensor {name} not bit-identical"
    return True, ""


def check_ppm_roundtrip() -> tuple[bool, str]:
    rng = np.random.default_rng(37)
    image = rng.uniform(0, 1, (3, 9, 7)).astype(np.float32)
    with tempfile.NamedTemporaryFile(suffix=".ppm") as tmp:
        save_ppm(tmp.name, image)
        loaded = load_ppm(tmp.name)
    err = np.abs(loaded - image).max()
    return err <= 0.5 / 255.0 + 1e-7, f"err {err:.5f}"


CHECKS = (
    ("conv2d vs nested-loop oracle", check_conv_oracle),
    ("softmax vs extended-precision oracle", check_softmax_oracle),
    ("analytic gradients vs finite differences", check_full_gradients),
    ("leaf path probabilities normalize", check_routing_normalization),
    ("interleaved leaf update vs two-pass", check_leaf_update_equivalence),
    ("checkpoint round trip bit-exact", check_checkpoint_roundtrip),
    ("ppm codec round trip", check_ppm_roundtrip),
)


def run(verbose: bool = True) -> bool:
    all_ok = True
    for name, check in CHECKS:
        ok, detail = check()
        all_ok &= ok
        if verbose:
            suffix = f" ({detail})" if detail and not ok else ""
            print(f"{'PASS' if ok else 'FAIL'} {name}{suffix}")
    return all_ok
