"""Central finite-difference verification of every backward pass.

Each case owns a float64 module (or bare op), a set of named input arrays
and a scalar loss functional.  The harness runs one analytic
forward/backward, then perturbs every checked element by +/-step and
compares.  An element passes when ``|analytic - numeric| <= atol +
rtol * max(|analytic|, |numeric|)``; the reported headline number is the
max relative error over elements with non-negligible magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    INFER,
    TRAIN,
    BatchNorm2D,
    Conv2D,
    Dense,
    avg_pool2d,
    bce_loss,
    bilinear_upsample,
    conv2d,
    cross_entropy_loss,
    dropout,
    global_avg_pool,
    max_pool2d,
)
from .model import (
    BackboneConfig,
    ChannelAttention,
    DFCANetConfig,
    FCBlock,
    FCConv,
    FCConvConfig,
    build_model,
)
from .tensor import Tensor, bmm, channel_concat, channel_split, matmul, no_grad, softmax_rows

STEP = 1e-5
RTOL = 1e-4
ATOL = 1e-7


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    max_abs_err: float
    n_elements: int
    passed: bool


def grad_errors(analytic: np.ndarray, numeric: np.ndarray, rtol=RTOL, atol=ATOL):
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    passed = bool(np.all(diff <= atol + rtol * denom))
    sig = denom > 1e-6
    max_rel = float((diff[sig] / denom[sig]).max()) if sig.any() else 0.0
    return float(diff.max()), max_rel, passed


def check_case(name, loss_fn, arrays: dict, step=STEP, rtol=RTOL, atol=ATOL,
               max_elements=None, corrupt=False) -> CheckResult:
    """Run one finite-difference comparison.

    ``loss_fn(tensors)`` must build a fresh graph from the given name->Tensor
    dict and return a scalar Tensor; it must be deterministic.  ``arrays``
    holds the float64 points where gradients are checked.
    """
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    loss = loss_fn(tensors)
    loss.backward()
    analytic = {}
    for k, t in tensors.items():
        analytic[k] = np.zeros_like(arrays[k]) if t.grad is None else t.grad.copy()
    if corrupt:  # negative-control hook: sabotage the analytic gradients
        first = next(iter(analytic))
        analytic[first] = analytic[first] + 0.05

    def value_at(current: dict) -> float:
        with no_grad():
            return float(loss_fn({k: Tensor(v) for k, v in current.items()}).data)

    max_abs, max_rel, ok = 0.0, 0.0, True
    total = 0
    work = {k: v.copy() for k, v in arrays.items()}
    for k in arrays:
        flat = work[k].reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            picked = list(np.linspace(0, n - 1, max_elements).astype(int))
        else:
            picked = list(range(n))
        numeric = np.empty(len(picked))
        for j, i in enumerate(picked):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = value_at(work)
            flat[i] = orig - step
            f_minus = value_at(work)
            flat[i] = orig
            numeric[j] = (f_plus - f_minus) / (2 * step)
        a = analytic[k].reshape(-1)[picked]
        abs_err, rel_err, part_ok = grad_errors(a, numeric, rtol, atol)
        max_abs = max(max_abs, abs_err)
        max_rel = max(max_rel, rel_err)
        ok = ok and part_ok
        total += len(picked)
    return CheckResult(name, max_rel, max_abs, total, ok)


def _proj_loss(y: Tensor, seed=123) -> Tensor:
    r = np.random.default_rng(seed).normal(size=y.data.shape)
    return (y * Tensor(r.astype(y.data.dtype))).sum()


def _module_case(name, module, arrays, forward, corrupt=False, max_elements=None):
    """Check a stateful module: its parameters join the checked array set,
    and the module's parameter tensors are swapped for the check tensors
    around each evaluation so analytic grads land where the harness looks."""
    originals = dict(module.named_parameters())
    full = dict(arrays)
    for pname, p in originals.items():
        full["param:" + pname] = p.data.copy()

    def loss(tensors):
        for pname in originals:
            _replace_param(module, pname, tensors["param:" + pname])
        try:
            return forward(module, tensors)
        finally:
            for pname, p in originals.items():
                _replace_param(module, pname, p)

    return check_case(name, loss, full, corrupt=corrupt, max_elements=max_elements)


def _replace_param(module, dotted, tensor):
    parts = dotted.split(".")
    owner = module
    for p in parts[:-1]:
        owner = getattr(owner, p)
    setattr(owner, parts[-1], tensor)


def run_suite(seed: int = 0, corrupt: str | None = None, include_model: bool = True):
    """All layer-level checks plus (optionally) the tiny end-to-end model.

    ``corrupt`` names a case whose analytic gradient is deliberately
    perturbed; it must then FAIL (negative control of the harness itself).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 42]))
    results = []

    def add(name, loss_fn, arrays):
        results.append(check_case(name, loss_fn, arrays, corrupt=(corrupt == name)))

    x = rng.normal(size=(2, 5, 6, 4))
    k = rng.normal(size=(3, 3, 4, 3)) * 0.5
    b = rng.normal(size=3) * 0.1
    add("conv2d/same", lambda t: _proj_loss(conv2d(t["x"], t["k"], t["b"], (1, 1), "same")),
        {"x": x, "k": k, "b": b})
    add("conv2d/stride2-valid",
        lambda t: _proj_loss(conv2d(t["x"], t["k"], t["b"], (2, 2), "valid")),
        {"x": x, "k": k, "b": b})

    bn = BatchNorm2D(4, dtype=np.float64)
    bn.set_mode(TRAIN)
    add("batchnorm/train", lambda t: _proj_loss(_bn_apply(bn, t)), {
        "x": rng.normal(size=(3, 4, 4, 4)), "param:gamma": np.ones(4) + 0.1 * rng.normal(size=4),
        "param:beta": 0.1 * rng.normal(size=4)})
    bn_i = BatchNorm2D(4, dtype=np.float64)
    bn_i.set_mode(INFER)
    bn_i.set_buffer("running_mean", rng.normal(size=4) * 0.2)
    bn_i.set_buffer("running_var", 1.0 + 0.3 * rng.random(4))
    add("batchnorm/infer", lambda t: _proj_loss(_bn_apply(bn_i, t)), {
        "x": rng.normal(size=(3, 4, 4, 4)), "param:gamma": np.ones(4) + 0.1 * rng.normal(size=4),
        "param:beta": 0.1 * rng.normal(size=4)})

    add("avgpool/even", lambda t: _proj_loss(avg_pool2d(t["x"], (2, 2))),
        {"x": rng.normal(size=(2, 6, 6, 3))})
    add("avgpool/ceil-partial",
        lambda t: _proj_loss(avg_pool2d(t["x"], (3, 3), stride=(3, 3), ceil_mode=True)),
        {"x": rng.normal(size=(2, 7, 8, 2))})
    add("maxpool/same", lambda t: _proj_loss(max_pool2d(t["x"], (3, 3), (2, 2))),
        {"x": rng.normal(size=(2, 7, 7, 3))})
    add("upsample/bilinear", lambda t: _proj_loss(bilinear_upsample(t["x"], (7, 9))),
        {"x": rng.normal(size=(2, 3, 4, 2))})
    add("global-avg-pool", lambda t: _proj_loss(global_avg_pool(t["x"])),
        {"x": rng.normal(size=(2, 5, 5, 3))})

    def drop_loss(t):
        drng = np.random.default_rng(99)
        return _proj_loss(dropout(t["x"], 0.3, TRAIN, drng))

    add("dropout/train", drop_loss, {"x": rng.normal(size=(4, 6))})

    add("dense/affine", lambda t: _proj_loss(matmul(t["x"], t["w"]) + _bias2d(t["b"], 3)),
        {"x": rng.normal(size=(3, 5)), "w": rng.normal(size=(5, 4)), "b": rng.normal(size=(1, 4))})
    add("softmax-rows", lambda t: _proj_loss(softmax_rows(t["x"])),
        {"x": rng.normal(size=(3, 5))})
    add("matmul", lambda t: _proj_loss(matmul(t["a"], t["b"])),
        {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(3, 5))})
    add("bmm", lambda t: _proj_loss(bmm(t["a"], t["b"])),
        {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 4, 3))})
    add("split-concat", lambda t: _proj_loss(channel_concat(*channel_split(t["x"]))),
        {"x": rng.normal(size=(2, 3, 3, 6))})

    y_bce = (rng.random((5, 1)) < 0.5).astype(np.float64)
    add("loss/bce", lambda t: bce_loss(t["p"].sigmoid(), y_bce), {"p": rng.normal(size=(5, 1))})
    y_ce = rng.integers(0, 3, size=6)
    add("loss/cross-entropy", lambda t: cross_entropy_loss(t["z"], y_ce),
        {"z": rng.normal(size=(6, 3))})

    cam = ChannelAttention(beta=1.0)
    cam.set_mode(INFER)
    add("cam", lambda t: _proj_loss(cam(t["x"])), {"x": rng.normal(size=(2, 2, 3, 4))})

    fc = FCConv(FCConvConfig(channels=4, k1=3, k2=3, pool=2), rng=rng, dtype=np.float64)
    fc.set_mode(TRAIN)
    results.append(_module_case("fcconv", fc, {"x": rng.normal(size=(2, 4, 4, 4))},
                                lambda m, t: _proj_loss(m(t["x"])), corrupt=(corrupt == "fcconv")))
    blk = FCBlock(FCConvConfig(channels=4, k1=3, k2=3, pool=2), rng=rng, dtype=np.float64)
    blk.set_mode(TRAIN)
    results.append(_module_case("fcblock", blk, {"x": rng.normal(size=(1, 4, 4, 4))},
                                lambda m, t: _proj_loss(m(t["x"])), corrupt=(corrupt == "fcblock")))

    if include_model:
        results.append(model_case(seed, corrupt=(corrupt == "dfcanet")))
    return results


def _bn_apply(bn, t):
    _replace_param(bn, "gamma", t["param:gamma"])
    _replace_param(bn, "beta", t["param:beta"])
    return bn(t["x"])


def _bias2d(b: Tensor, rows: int) -> Tensor:
    ones = Tensor(np.ones((rows, 1), dtype=b.data.dtype))
    return matmul(ones, b)


def tiny_model_config(seed=0) -> DFCANetConfig:
    """8x8 input, 4-channel backbone analog, one FC-Block and the attention
    module: the end-to-end gradient-check configuration."""
    return DFCANetConfig(
        input_size=8,
        task="pad",
        use_ifcnet=True,
        use_cam=True,
        backbone=BackboneConfig(stem_channels=4, growth=2, num_layers=1, out_channels=4),
        ifc_blocks=((3, 3, 2),),
        ifc_transitions=(),
        head_units=8,
        dropout_rate=0.0,
        seed=seed,
        dtype="f64",
    )


def model_case(seed=0, corrupt=False) -> CheckResult:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    model = build_model(tiny_model_config(seed))
    model.set_mode(TRAIN)
    x = rng.normal(size=(2, 8, 8, 3)) * 0.5 + 0.5
    y = np.array([[1.0], [0.0]])
    return _module_case("dfcanet", model, {"x": x},
                        lambda m, t: bce_loss(m(t["x"]), y), corrupt=corrupt)


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  elements  max_rel_err  max_abs_err  status"]
    for r in results:
        lines.append(
            f"{r.name.ljust(width)}  {r.n_elements:8d}  {r.max_rel_err:11.3e}  "
            f"{r.max_abs_err:11.3e}  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
