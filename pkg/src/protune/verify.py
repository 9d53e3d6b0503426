"""Fast invariant battery behind the `verify` CLI verb.

Each check re-derives a core guarantee of the engine on the installed
machine in a few seconds: kernel backend agreement, the zero-blend
identity, parameter accounting, optimizer arithmetic, checkpoint fidelity,
and dataset properties.  Returns (name, ok, detail) triples; the CLI turns
any failure into exit code 3.
"""
from __future__ import annotations

import os
import tempfile

import numpy as np

from . import data as D
from . import kernels
from . import ops
from .autograd import Tensor
from .backbones import build_backbone, tiny_cnn_spec, tiny_vit_spec
from .checkpoint import load_checkpoint, save_checkpoint
from .paradigms import TunableModel, TuningParadigm, apply_paradigm
from .prompt import InsertionPolicy, PromptBlockConfig, count_prompt_params, PromptBlock
from .layers import ParamInfo
from .training import OptimizerState, sgd_step

CHECKS = []


def _check(fn):
    CHECKS.append(fn)
    return fn


@_check
def kernel_backends(rng):
    x = rng.standard_normal((2, 3, 10, 10)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    with kernels.use_backend("numpy"):
        a = kernels.conv2d_forward(x, w, 1, 1)
    name = kernels.active_backend()
    b = kernels.conv2d_forward(x, w, 1, 1)
    err = float(np.abs(a - b).max())
    return err < 1e-5, f"active={name} numpy-vs-active max diff {err:.2e}"


@_check
def zero_blend_identity(rng):
    for spec in (tiny_cnn_spec(), tiny_vit_spec()):
        model = build_backbone(spec, seed=3)
        tm = apply_paradigm(model, TuningParadigm.parse("protune"), 5, seed=4)
        th = apply_paradigm(model, TuningParadigm.parse("head"), 5, seed=4)
        x = Tensor(rng.random((4, 3, 32, 32), dtype=np.float64).astype(np.float32))
        if not np.array_equal(tm.model.logits(x).data, th.model.logits(x).data):
            return False, f"{spec.family}: prompted logits differ at beta=0"
    return True, "cnn and vit logits identical at beta=0"


@_check
def parameter_formula(rng):
    for _ in range(5):
        cfg = PromptBlockConfig(
            channels=int(rng.integers(2, 24)),
            reduction=int(rng.choice([1, 2, 4])),
            kernel=int(rng.choice([3, 5, 7])),
            se_reduction=int(rng.integers(1, 8)),
        )
        block = PromptBlock(cfg, np.random.default_rng(0))
        actual = sum(t.size for _n, t, _i in block.named_params())
        expected = count_prompt_params(cfg)
        if actual != expected:
            return False, f"{cfg}: formula {expected} vs enumerated {actual}"
    return True, "closed form matches enumeration on 5 random configs"


@_check
def uniform_insertion_points(rng):
    policy = InsertionPolicy.from_name("U5", 12)
    ok = policy.points == (0, 3, 6, 9, 12)
    return ok, f"U5 on 12 layers -> {policy.points}"


@_check
def optimizer_recurrence(rng):
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)

    class Stub:
        def registry(self):
            return {"p": (p, ParamInfo(decay=False, buffer=False))}

    tm = TunableModel(model=Stub(), paradigm=None, mask={"p": True}, frozen_snapshot={})
    opt = OptimizerState(lr_base=0.1, momentum=0.9)
    for step in range(2):
        p.grad = np.ones(1, dtype=np.float32)
        sgd_step(tm, opt, step)
    ok = abs(float(p.data[0]) - 0.71) < 1e-6
    return ok, f"two momentum steps -> {float(p.data[0]):.6f} (want 0.71)"


@_check
def checkpoint_roundtrip(rng):
    spec = tiny_cnn_spec()
    model = build_backbone(spec, seed=9)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ptnc")
        save_checkpoint(model, path, {"spec": spec.to_dict()})
        loaded = load_checkpoint(path, spec)
        for (n1, t1, _), (n2, t2, _) in zip(model.named_entries(), loaded.named_entries()):
            if n1 != n2 or t1.data.tobytes() != t2.data.tobytes():
                return False, f"mismatch at {n1}"
    return True, "all tensors byte-identical after reload"


@_check
def longtail_profile(rng):
    counts = D.longtail_profile(5000, 100.0, 10)
    ok = counts[0] == 5000 and counts[-1] == 50
    return ok, f"head {counts[0]}, tail {counts[-1]}"


@_check
def corruption_monotone(rng):
    ds = D.synth_shapes(24, 4, 0.0, seed=5)
    for kind in sorted(D.CORRUPTION_KINDS):
        prev = -1.0
        for sev in range(1, 6):
            cd = D.corrupt(ds, kind, sev, seed=6)
            mse = float(np.mean((cd.images - ds.images) ** 2))
            if mse <= prev:
                return False, f"{kind}: MSE not increasing at severity {sev}"
            prev = mse
    return True, "all 4 kinds strictly increase MSE over severity"


@_check
def cross_entropy_uniform(rng):
    logits = Tensor(np.zeros((3, 4), dtype=np.float32))
    loss = ops.softmax_cross_entropy(logits, np.array([0, 1, 2]))
    ok = abs(loss.item() - np.log(4.0)) < 1e-6
    return ok, f"uniform 4-way loss {loss.item():.6f} (want ln 4)"


def run_verify() -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(2024)
    results = []
    for fn in CHECKS:
        try:
            ok, detail = fn(rng)
        except Exception as e:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        results.append((fn.__name__, ok, detail))
    return results
