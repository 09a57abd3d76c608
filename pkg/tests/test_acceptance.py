"""One test per acceptance criterion; the terminal summary prints a
pass/fail line for each, with the measured quantity alongside."""

import time
from fractions import Fraction

import numpy as np
import pytest

from ilgnet import ava, gradcheck
from ilgnet import engine as E
from ilgnet import trainer as T
from ilgnet.cli import main
from ilgnet.graph import ArchVariant, Variant, assemble, classify, count_layers
from ilgnet.imageio import decode_pgm

from oracles import exact_mean, naive_conv2d, naive_gap, naive_maxpool

acceptance = pytest.mark.acceptance
SMALL_CONFIG = "width_multiplier = 0.25\ninput_side = 64\nbatch_size = 4\nbase_lr = 0.01\nstepsize = 1000\n"


@acceptance("AC1 gradient suite: gradcheck --op all --trials 10, max rel err < 1e-6, < 120 s")
def test_ac1_gradient_suite(capsys, record_property):
    t0 = time.perf_counter()
    code = main(["gradcheck", "--op", "all", "--trials", "10", "--eps", "1e-5", "--tol", "1e-6"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    worst = max(float(tok.split("=")[1]) for tok in out.split() if ".max_rel_err=" in tok)
    record_property("measured", f"worst {worst:.2e}, {elapsed:.1f} s")
    assert code == 0
    for op in gradcheck.OP_CASES:
        assert f"{op}.status=pass" in out
    assert worst < 1e-6 and elapsed < 120


def _oracle_configs(seed):
    rng = np.random.default_rng(1000 + seed)
    n, c, o = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
    k = int(rng.choice([1, 2, 3, 5, 7]))
    stride, pad = int(rng.integers(1, 4)), int(rng.integers(0, k // 2 + 1))
    h, w = rng.integers(k, k + 8, size=2)
    x = rng.standard_normal((n, c, h, w))
    return rng, x, rng.standard_normal((o, c, k, k)), rng.standard_normal(o), stride, pad


@acceptance("AC2 oracle equivalence: conv2d/maxpool2d/gap vs loop oracles within 1e-5 on >= 20 configs each")
def test_ac2_oracle_equivalence(record_property):
    worst = {"conv2d": 0.0, "maxpool2d": 0.0, "global_avg_pool": 0.0}
    configs = 25
    for seed in range(configs):
        rng, x, w, b, stride, pad = _oracle_configs(seed)
        x32 = x.astype(np.float32)
        got = E.conv2d_forward(x32, w.astype(np.float32), b.astype(np.float32), stride, pad)[0]
        worst["conv2d"] = max(worst["conv2d"], np.abs(got - naive_conv2d(x, w, b, stride, pad)).max())
        k = min(int(rng.integers(1, 4)), int(x.shape[2]), int(x.shape[3]))
        s = int(rng.integers(1, 3))
        ppad = int(rng.integers(0, k // 2 + 1))
        ceil = bool(rng.integers(0, 2))
        got = E.maxpool2d_forward(x32, k, s, ppad, ceil)[0]
        worst["maxpool2d"] = max(worst["maxpool2d"], np.abs(got - naive_maxpool(x, k, s, ppad, ceil)).max())
        got = E.global_avg_pool_forward(x32)[0]
        worst["global_avg_pool"] = max(worst["global_avg_pool"], np.abs(got - naive_gap(x)).max())
    record_property("measured", ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" over {configs} configs")
    assert all(v < 1e-5 for v in worst.values())


@acceptance("AC3 architecture audit: (13, 4) layers, concat 1024, rows sum to 1 +- 1e-6, < 2 s/image")
def test_ac3_architecture(record_property):
    net = assemble(ArchVariant(Variant.ILGNET), seed=0)
    report = count_layers(net)
    x = np.random.default_rng(0).standard_normal((2, 3, 224, 224)).astype(np.float32)
    classify(net, x[:1])
    t0 = time.perf_counter()
    p = classify(net, x)
    per_image = (time.perf_counter() - t0) / 2
    _, taps = net.forward(x[:1])
    row_err = np.abs(p.astype(np.float64).sum(axis=1) - 1).max()
    record_property("measured", f"({report.parameter_layers}, {report.pooling_layers}), concat "
                    f"{taps['concat'].shape[1]}, row err {row_err:.1e}, {per_image:.2f} s/image")
    assert (report.parameter_layers, report.pooling_layers) == (13, 4)
    assert taps["concat"].shape == (1, 1024) and net.feature_dim == 256 + 256 + 512
    assert row_err <= 1e-6
    assert per_image < 2.0


@acceptance("AC4 lr schedule: three published configs at 5 checkpoints, exact to 1e-12 relative")
def test_ac4_lr_schedule(record_property):
    published = {
        "ava1-delta0": ("0.0001", 100000, "0.96", 475000),
        "ava1-delta1": ("0.00001", 19000, "0.96", 760000),
        "ava2": ("0.00001", 13325, "0.96", 533000),
    }
    worst, checked = 0.0, 0
    for name, (base, step, gamma, max_iter) in published.items():
        cfg = T.TrainConfig.preset(name)
        assert (cfg.stepsize, cfg.max_iter) == (step, max_iter)
        for it in (0, step - 1, step, 2 * step, max_iter - 1):
            exact = Fraction(base) * Fraction(gamma) ** (it // step)
            worst = max(worst, abs(Fraction(T.lr_at(it, cfg)) - exact) / exact)
            checked += 1
    record_property("measured", f"worst rel err {float(worst):.1e} over {checked} points")
    assert worst <= Fraction(1, 10**12)


def _synthetic_metadata(path, n=10_000, seed=0):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 40, size=(n, 10))
    counts[counts.sum(axis=1) == 0, 4] = 1
    records = [ava.RatingRecord(f"m{i:05d}", tuple(int(v) for v in row)) for i, row in enumerate(counts)]
    ava.write_metadata(records, path)
    return records


@acceptance("AC5 split protocols: 10,000 records, ava1 (delta 0/0.5/1) and ava2 match brute force, < 10 s")
def test_ac5_split_protocols(tmp_path, record_property):
    path = tmp_path / "metadata.csv"
    source = _synthetic_metadata(path)
    means = {r.image_id: exact_mean(r.counts) for r in source}
    ids = [r.image_id for r in source]

    t0 = time.perf_counter()
    records = ava.read_metadata(path)
    ava1 = {d: ava.ava1_split(records, d, seed=7) for d in (0.0, 0.5, 1.0)}
    ava2 = ava.ava2_split(records, seed=7)
    elapsed = time.perf_counter() - t0
    assert records == source

    test_ids = [e.image_id for e in ava1[0.0][1]]
    for delta, (train, test) in ava1.items():
        assert [e.image_id for e in test] == test_ids
        held = set(test_ids)
        expect_train = [i for i in ids if i not in held and not (delta > 0 and abs(means[i] - 5) <= Fraction(str(delta)))]
        assert [e.image_id for e in train] == expect_train
        assert held.isdisjoint(expect_train)
        for e in train + test:
            assert e.label == int(means[e.image_id] > 5)

    k = len(ids) // 10
    ranked = sorted(ids, key=lambda i: (-means[i], i))
    train, test = ava2
    assert {e.image_id for e in train + test if e.label == 1} == set(ranked[:k])
    assert {e.image_id for e in train + test if e.label == 0} == set(ranked[-k:])
    assert len(train) == len(test) == k
    assert {e.image_id for e in train}.isdisjoint(e.image_id for e in test)
    record_property("measured", f"{elapsed:.2f} s, deciles {k}+{k}")
    assert elapsed < 10


@acceptance("AC6 desk-scale learning: width 0.25, side 64, 64 images, 300 iters, batch 8, acc >= 0.95, loss falls")
def test_ac6_desk_scale_learning(brightness_corpus, record_property):
    x, labels, _ = brightness_corpus
    cfg = T.TrainConfig(base_lr=0.01, gamma=1.0, stepsize=1000, max_iter=300, batch_size=8,
                        eval_interval=100, width_multiplier=0.25, input_side=64, seed=0)
    net = assemble(cfg.arch, seed=0)
    t0 = time.perf_counter()
    _, metrics = T.train(net, x, labels, cfg)
    acc, _ = T.evaluate(net, x, labels)
    epochs = metrics.epoch_losses()
    record_property("measured", f"acc {acc:.3f}, epoch loss {epochs[0]:.4f} -> {epochs[-1]:.4f}, "
                    f"{time.perf_counter() - t0:.0f} s")
    assert acc >= 0.95
    assert epochs[-1] < epochs[0]


@acceptance("AC7 ablation parity: all three variants train one step and evaluate via the CLI; stage shapes match")
def test_ac7_ablation_parity(tmp_path, capsys, record_property):
    assert main(["synth", "--n", "16", "--seed", "3", "--out", str(tmp_path / "data")]) == 0
    assert main(["split", "--metadata", str(tmp_path / "data" / "metadata.csv"), "--protocol", "ava1",
                 "--test-count", "4", "--out", str(tmp_path / "split.csv")]) == 0
    (tmp_path / "cfg.txt").write_text(SMALL_CONFIG + "max_iter = 1\n")
    accs = {}
    for v in Variant:
        ckpt = tmp_path / f"{v.value}.ckpt"
        assert main(["train", "--split", str(tmp_path / "split.csv"), "--images", str(tmp_path / "data"),
                     "--config", str(tmp_path / "cfg.txt"), "--variant", v.value, "--out", str(ckpt)]) == 0
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(ckpt), "--split", str(tmp_path / "split.csv"),
                     "--images", str(tmp_path / "data"), "--variant", v.value]) == 0
        out = dict(line.split("=", 1) for line in capsys.readouterr().out.split())
        assert out["variant"] == v.value
        accs[v.value] = float(out["accuracy"])
    full = assemble(ArchVariant(Variant.ILGNET)).stage_shapes()
    plain = assemble(ArchVariant(Variant.WITHOUT_INC)).stage_shapes()
    record_property("measured", "test acc " + ", ".join(f"{k} {v:.2f}" for k, v in accs.items()))
    assert full == plain


@acceptance("AC8 domain-adaptation freeze: 3 projections + output trainable, frozen params bit-identical after 10 steps")
def test_ac8_freeze(brightness_corpus, record_property):
    x, labels, _ = brightness_corpus
    net = assemble(ArchVariant(Variant.ILGNET, 0.25, 64), seed=1)
    before = {p.name: p.value.tobytes() for p in net.parameters()}
    cfg = T.TrainConfig(base_lr=0.01, max_iter=10, batch_size=8, width_multiplier=0.25, input_side=64,
                        freeze_prefixes=T.DOMAIN_ADAPTATION_PREFIXES)
    T.train(net, x[:16], labels[:16], cfg)
    trainable = T.trainable_layers(net)
    frozen = [p for p in net.parameters() if p.frozen]
    changed = [p.name for p in frozen if p.value.tobytes() != before[p.name]]
    record_property("measured", f"trainable {trainable}, {len(frozen)} frozen tensors, {len(changed)} changed")
    assert trainable == ["proj_local1", "proj_local2", "proj_global", "output"]
    assert not changed


@acceptance("AC9 persistence: save -> load -> classify bit-exact; corrupt files rejected")
def test_ac9_persistence(tmp_path, brightness_corpus, record_property):
    x, labels, means = brightness_corpus
    net = assemble(ArchVariant(Variant.ILGNET, 0.25, 64), seed=2)
    T.train(net, x[:16], labels[:16], T.TrainConfig(base_lr=0.01, max_iter=3, batch_size=8,
                                                    width_multiplier=0.25, input_side=64))
    net.channel_means = means
    path = tmp_path / "net.ckpt"
    T.save_checkpoint(net, path, iteration=3)
    loaded = T.load_checkpoint(path).net
    same = np.array_equal(classify(net, x), classify(loaded, x))

    data = path.read_bytes()
    rejected = []
    for name, bad, err in [
        ("truncated", data[:-1], T.CheckpointCorruptError),
        ("bit flip", data[:-8] + bytes([data[-8] ^ 1]) + data[-7:], T.CheckpointCorruptError),
        ("bad magic", b"XXXX" + data[4:], T.CheckpointCorruptError),
        ("version 2", data[:4] + (2).to_bytes(4, "little") + data[8:], T.CheckpointVersionError),
    ]:
        (tmp_path / "bad.ckpt").write_bytes(bad)
        with pytest.raises(err):
            T.load_checkpoint(tmp_path / "bad.ckpt")
        assert main(["classify", "--ckpt", str(tmp_path / "bad.ckpt"), str(tmp_path / "none.ppm")]) == 2
        rejected.append(name)
    with pytest.raises(T.CheckpointShapeError):
        T.load_checkpoint(path, assemble(ArchVariant(Variant.ILGNET, 1.0, 64)))
    record_property("measured", f"bit-exact {same}, rejected {', '.join(rejected)}, width mismatch")
    assert same


@acceptance("AC10 visualization: features writes 8 deterministic PGMs, tap 7 length 512, density in [0, 1]")
def test_ac10_features(tmp_path, capsys, record_property):
    net = assemble(ArchVariant(Variant.ILGNET), seed=0)
    T.save_checkpoint(net, tmp_path / "full.ckpt")
    assert main(["synth", "--n", "2", "--seed", "0", "--out", str(tmp_path / "img")]) == 0
    image = tmp_path / "img" / "img0000.ppm"
    capsys.readouterr()
    runs = []
    for out in ("a", "b"):
        assert main(["features", "--ckpt", str(tmp_path / "full.ckpt"), "--image", str(image),
                     "--out", str(tmp_path / out)]) == 0
        runs.append(capsys.readouterr().out)
    fields = dict(tok.split("=", 1) for tok in runs[0].split())
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    identical = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    tap7 = decode_pgm((tmp_path / "a" / "tap7.pgm").read_bytes())
    density = float(fields["activation_density"])
    record_property("measured", f"{len(names)} files, tap7 {fields['tap7.shape']}, density {density:.3f}")
    assert names == ["concat.pgm"] + [f"tap{i}.pgm" for i in range(1, 8)]
    assert identical and runs[0] == runs[1]
    assert fields["tap7.shape"] == "512" and tap7.shape == (1, 512)
    assert fields["concat.shape"] == "1024"
    assert 0.0 <= density <= 1.0
