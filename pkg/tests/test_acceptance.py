"""Acceptance criteria, one test each.

Every test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line; the lines are
repeated in the pytest terminal summary. Run directly with
``python tests/test_acceptance.py`` for the lines alone.
"""
import time

import numpy as np
import pytest

from saekit.blocks import SaEConfig, init_sae_params, sae_forward, se_forward, se_to_sae_map, sae_to_se_map
from saekit.checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from saekit.data import load_cifar10_batch, normalize, synthetic_blobs, write_cifar10_batch
from saekit.gradcheck import check_model_gradients
from saekit.layers import (
    BatchNormParams,
    Conv2dParams,
    batchnorm2d,
    conv2d,
    dense,
    global_avg_pool,
    maxpool2d,
    softmax_cross_entropy,
)
from saekit.models import BottleneckParams, ModelSpec, bottleneck_block, build_model, count_params
from saekit.tensor import Tensor, add, concat, grad_check, matmul, mul, relu, sigmoid, transpose, tsum
from saekit.training import TrainConfig, metrics_csv, step_lr, train

RESULTS: dict[int, str] = {}


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------


def test_1_parameter_deltas():
    t = time.perf_counter()
    base = count_params(ModelSpec("resnet50", 100))
    se = count_params(ModelSpec("senet50", 100)) - base
    sae = count_params(ModelSpec("senetv2_50", 100)) - base
    dt = time.perf_counter() - t
    # published deltas: 24.90M - 23.62M and 28.67M - 23.62M
    ok = (
        se == 1_273_048
        and sae == 5_046_880
        and abs(se - 1.28e6) / 1.28e6 <= 0.02
        and abs(sae - 5.05e6) / 5.05e6 <= 0.01
        and dt < 1.0
    )
    report(1, "parameter deltas", ok, f"senet50 +{se:,} senetv2_50 +{sae:,} ({dt:.3f}s)")


# 2 -------------------------------------------------------------------------


def test_2_base_count():
    t = time.perf_counter()
    n = count_params(ModelSpec("resnet50", 100))
    dt = time.perf_counter() - t
    rel = abs(n - 23.62e6) / 23.62e6
    report(2, "resnet50 base count", rel <= 0.015 and dt < 1.0, f"{n:,} vs 23.62M, rel {rel:.4%} ({dt:.3f}s)")


# 3 -------------------------------------------------------------------------


def _eval_bn(c, rng):
    p = BatchNormParams.fresh(c, np.float32, mode="eval")
    p.gamma.data[:] = rng.uniform(0.5, 1.5, c)
    p.beta.data[:] = rng.normal(0, 0.1, c)
    p.running_mean.data[:] = rng.normal(0, 0.1, c)
    p.running_var.data[:] = rng.uniform(0.5, 1.5, c)
    return p


def test_3_gate_equivalence():
    rng = np.random.default_rng(0)
    cfg1 = SaEConfig(64, 16, 1)
    gate = init_sae_params(cfg1, rng)
    se = sae_to_se_map(gate)
    identical = 0
    for _ in range(100):
        u = Tensor(rng.normal(size=(2, 64, 4, 4)).astype(np.float32))
        identical += np.array_equal(sae_forward(u, se_to_sae_map(se), cfg1).data, se_forward(u, se, cfg1).data)

    cfg = SaEConfig(64, 32, 4)
    sae = init_sae_params(cfg, rng)
    for t in sae.tensors():
        t.data[...] = rng.normal(size=t.shape)
    sae.excite_bias.data[...] = 40.0
    sae.excite_weight.data[...] = 0.0

    def conv(co, ci, k, **kw):
        return Conv2dParams(Tensor((rng.normal(size=(co, ci, k, k)) * np.sqrt(2 / (ci * k * k))).astype(np.float32)), **kw)

    parts = dict(
        conv1=conv(16, 32, 1), bn1=_eval_bn(16, rng),
        conv2=conv(16, 16, 3, padding=1), bn2=_eval_bn(16, rng),
        conv3=conv(64, 16, 1), bn3=_eval_bn(64, rng),
        shortcut=(conv(64, 32, 1), _eval_bn(64, rng)),
    )
    x = Tensor(rng.normal(size=(4, 32, 6, 6)).astype(np.float32))
    gated = bottleneck_block(x, BottleneckParams(**parts, gate=sae, gate_cfg=cfg)).data
    plain = bottleneck_block(x, BottleneckParams(**parts)).data
    err = float(np.abs(gated - plain).max())
    report(3, "gate equivalence", identical == 100 and err <= 1e-5,
           f"{identical}/100 bit-identical SE vs single-branch SaE; saturated SaE vs gate-free max |diff| {err:.2e}")


# 4 -------------------------------------------------------------------------


def _layer_checks(rng):
    def c(*shape):
        return Tensor(rng.normal(size=shape))

    r4, w4, p3 = c(2, 4, 5, 5), c(2, 4, 5, 5), c(2, 4, 3, 3)
    w53, w43, w410, w54, w24 = c(5, 3), c(4, 3), c(4, 10), c(5, 4), c(2, 4)
    conv_g = Conv2dParams(c(4, 2, 3, 3), c(4), 1, 1, 2)
    conv_s = Conv2dParams(c(4, 4, 3, 3), None, 2, 1)
    bn = BatchNormParams(c(4), c(4), Tensor(np.zeros(4)), Tensor(np.ones(4)))
    fc_w, fc_b = c(5, 3), c(3)
    away = rng.normal(size=(2, 4, 5, 5))
    away[np.abs(away) < 1e-3] = 0.1
    distinct = rng.permutation(2 * 4 * 6 * 6).reshape(2, 4, 6, 6) / 10.0
    x4 = rng.normal(size=(2, 4, 5, 5))
    return {
        "matmul": (lambda t: tsum(mul(matmul(t, w53), w43)), rng.normal(size=(4, 5))),
        "transpose": (lambda t: tsum(mul(transpose(t), w54)), rng.normal(size=(4, 5))),
        "concat": (lambda t: tsum(mul(concat([t, t], 1), w410)), rng.normal(size=(4, 5))),
        "add": (lambda t: tsum(mul(add(t, w4), r4)), x4),
        "mul": (lambda t: tsum(mul(mul(t, w4), r4)), x4),
        "mul_channel": (lambda t: tsum(mul(mul(w4, t), r4)), rng.normal(size=(2, 4))),
        "relu": (lambda t: tsum(mul(relu(t), r4)), away),
        "sigmoid": (lambda t: tsum(mul(sigmoid(t), r4)), x4),
        "conv2d": (lambda t: tsum(mul(conv2d(t, conv_g), r4)), x4),
        "conv2d_stride": (lambda t: tsum(mul(conv2d(t, conv_s), p3)), x4),
        "batchnorm2d": (lambda t: tsum(mul(batchnorm2d(t, bn), r4)), x4),
        "global_avg_pool": (lambda t: tsum(mul(global_avg_pool(t), w24)), x4),
        "maxpool2d": (lambda t: tsum(mul(maxpool2d(t, 3, 2, 1), p3)), distinct),
        "dense": (lambda t: tsum(mul(dense(t, fc_w, fc_b), w43)), rng.normal(size=(4, 5))),
        "softmax_cross_entropy": (lambda t: softmax_cross_entropy(t, [0, 2, 1, 2]), rng.normal(size=(4, 3))),
    }


def test_4_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    layer_err = {name: grad_check(f, x) for name, (f, x) in _layer_checks(rng).items()}
    worst_layer = max(layer_err, key=lambda k: np.nan_to_num(layer_err[k], nan=np.inf))
    data = synthetic_blobs(3, 2, hw=8, seed=0)
    m = build_model(ModelSpec("tiny_senetv2", 3), seed=0)
    net = check_model_gradients(m, normalize(data.images), data.labels)
    worst_net = max(net, key=lambda k: np.nan_to_num(net[k], nan=np.inf))  # NaN: no kink-free coordinate
    dt = time.perf_counter() - t0
    ok = layer_err[worst_layer] < 1e-4 and net[worst_net] < 1e-3 and dt < 300
    report(4, "gradient suite", ok,
           f"{len(layer_err)} layer ops max {layer_err[worst_layer]:.2e} ({worst_layer}); "
           f"tiny_senetv2 {len(net)} tensors max {net[worst_net]:.2e} ({worst_net}) ({dt:.1f}s)")


# 5 -------------------------------------------------------------------------


@pytest.mark.slow
def test_5_desk_scale_training():
    t0 = time.perf_counter()
    data = synthetic_blobs(3, 100, hw=16, seed=0)
    data = data.with_images(normalize(data.images))
    loss = {"tiny_senetv2": [], "tiny_resnet": []}
    reached = []
    for seed in range(5):
        for arch in loss:
            recs = train(build_model(ModelSpec(arch, 3), seed), data, TrainConfig(seed=seed, epochs=30))
            loss[arch].append(recs[-1].train_loss)
            if arch == "tiny_senetv2":
                reached.append(max(r.top1 for r in recs) > 90)
    dt = time.perf_counter() - t0
    sae, plain = np.mean(loss["tiny_senetv2"]), np.mean(loss["tiny_resnet"])
    ok = all(reached) and sae <= plain and dt < 600
    report(5, "desk-scale training", ok,
           f">90% top-1 in {sum(reached)}/5 seeds; mean final loss senetv2 {sae:.6f} vs resnet {plain:.6f} ({dt:.0f}s)")


# 6 -------------------------------------------------------------------------


def test_6_protocol_conformance(tmp_path, capsys):
    from saekit.cli import main

    cfg = TrainConfig()
    lrs = [step_lr(e, cfg) for e in (0, 15, 30)]
    lr_ok = all(abs(a - b) <= 1e-15 for a, b in zip(lrs, (0.01, 0.001, 0.0001)))
    cfg_ok = cfg.optimizer == "sgd_momentum" and cfg.momentum == 0.9 and cfg.weight_decay == 1e-4
    main(["train", "--arch", "tiny_resnet", "--synthetic", "--per-class", "2", "--epochs", "1",
          "--out", str(tmp_path / "m.csv")])
    echo = capsys.readouterr().out.splitlines()[0]
    echo_ok = all(k in echo.split() for k in ("momentum=0.9", "weight_decay=0.0001", "lr=0.01", "lr_step=15",
                                               "lr_decay=0.1", "optimizer=sgd_momentum", "batch_size=16"))
    report(6, "protocol conformance", lr_ok and cfg_ok and echo_ok,
           f"step_lr {lrs}; momentum {cfg.momentum} weight_decay {cfg.weight_decay}; echo {'ok' if echo_ok else echo}")


# 7 -------------------------------------------------------------------------


def test_7_format_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    m = build_model(ModelSpec("tiny_senetv2", 3), seed=4)
    save_model(tmp_path / "m.ckpt", m)
    m2 = build_model(ModelSpec("tiny_senetv2", 3), seed=5)
    load_model(tmp_path / "m.ckpt", m2)
    ckpt_ok = all(m[n].data.tobytes() == m2[n].data.tobytes() for n in m.slots)
    odd = {"a": rng.normal(size=(2, 3)).astype(np.float32), "b": np.array([np.float32(-0.0), np.float32(1e-45)])}
    save_checkpoint(tmp_path / "o.ckpt", odd)
    back = load_checkpoint(tmp_path / "o.ckpt")
    ckpt_ok = ckpt_ok and all(back[k].tobytes() == v.tobytes() for k, v in odd.items())

    pixels = rng.integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
    write_cifar10_batch(tmp_path / "b.bin", pixels, [3, 9])
    images, labels = load_cifar10_batch(tmp_path / "b.bin")
    cifar_ok = labels.tolist() == [3, 9] and np.array_equal(images, pixels.astype(np.float32) / np.float32(255))

    data = synthetic_blobs(3, 8, hw=8, seed=0)
    runs = [metrics_csv(train(build_model(ModelSpec("tiny_resnet", 3), 1), data, TrainConfig(epochs=2, batch_size=8)))
            for _ in range(2)]
    csv_ok = runs[0] == runs[1]
    report(7, "format round-trips", ckpt_ok and cifar_ok and csv_ok,
           f"checkpoint {'bit-exact' if ckpt_ok else 'MISMATCH'}; cifar {'exact' if cifar_ok else 'MISMATCH'}; "
           f"csv {'identical' if csv_ok else 'DIFFERS'}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
