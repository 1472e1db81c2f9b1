"""Smoke tests for the python bindings.

Run with PYTHONPATH pointing at the directory containing the built _core
module (ctest wires this up automatically).
"""

import math

import numpy as np
import pytest

import _core as core


def test_effective_epochs_default_recipe():
    factor = core.effective_epochs(1.0)
    assert f"{factor:.2f}" == "3.84"
    assert core.effective_epochs(2.0, 2, 32, 10, 16) == pytest.approx(9.0)


def test_cosine_lr_endpoints():
    assert core.cosine_lr(0, 100, 10, 2e-3, 1e-6) == 0.0
    assert core.cosine_lr(10, 100, 10, 2e-3, 1e-6) == pytest.approx(2e-3)
    assert core.cosine_lr(99, 100, 10, 2e-3, 1e-6) < 1e-5


def test_blockwise_mask_budget():
    mask, realized = core.blockwise_mask(4, 4, 0.3, seed=7)
    assert mask.shape == (4, 4)
    assert realized == mask.sum() / 16.0
    mask0, realized0 = core.blockwise_mask(4, 4, 0.0, seed=7)
    assert realized0 == 0.0 and mask0.sum() == 0


def test_mask_ratio_policy():
    draws = [core.sample_mask_ratio(seed=s) for s in range(400)]
    zeros = sum(1 for d in draws if d == 0.0)
    assert 100 < zeros < 300
    assert all(d == 0.0 or 0.1 <= d <= 0.5 for d in draws)


def test_distill_cross_entropy_uniform_teacher():
    k = 8
    student = np.zeros((3, k))
    teacher = np.zeros((3, k))
    center = np.zeros(k)
    h = core.distill_cross_entropy(student, teacher, center, 0.1, 0.04)
    assert h.shape == (3,)
    assert h == pytest.approx(np.full(3, math.log(k)))


def test_mean_color_token_range():
    patch = np.full((8, 8, 3), 1.0, dtype=np.float32)
    assert core.mean_color_token(patch) == 0b111111111
    assert core.mean_color_token(np.zeros((8, 8, 3), dtype=np.float32)) == 0


def test_knn_classify_separated():
    rng = np.random.default_rng(0)
    features = np.concatenate([rng.normal(5, 0.1, (20, 4)), rng.normal(-5, 0.1, (20, 4))])
    labels = [0] * 20 + [1] * 20
    queries = np.array([[4.0, 5.0, 5.0, 5.0], [-5.0, -4.0, -5.0, -5.0]])
    assert core.knn_classify(features, labels, 2, queries, k=5) == [0, 1]


def test_cluster_metrics_perfect():
    m = core.cluster_metrics([0, 0, 1, 1, 2, 2], [2, 2, 0, 0, 1, 1])
    assert m["acc"] == 1.0 and m["ari"] == 1.0 and m["nmi"] == 1.0 and m["fmi"] == 1.0


def test_perturbation_identities():
    rng = np.random.default_rng(1)
    image = rng.random((32, 32, 3)).astype(np.float32)
    assert np.array_equal(core.occlusion_perturb(image, 0.0), image)
    assert np.array_equal(core.shuffle_perturb(image, 1), image)
    occluded = core.occlusion_perturb(image, 1.0)
    assert occluded.sum() == 0.0
    shuffled = core.shuffle_perturb(image, 2, seed=3)
    assert np.allclose(np.sort(shuffled.ravel()), np.sort(image.ravel()))


def test_pipeline_end_to_end(tmp_path):
    data = tmp_path / "data"
    n = core.generate_synthetic(str(data), classes=2, per_class=16, size=16, seed=11)
    assert n == 32
    config = {
        "run.name": "smoke",
        "run.dir": str(tmp_path / "runs"),
        "data.dir": str(data),
        "model.image_size": "16",
        "model.embed_dim": "16",
        "model.depth": "1",
        "model.heads": "2",
        "model.mlp_ratio": "2.0",
        "head.hidden_dim": "24",
        "head.bottleneck_dim": "8",
        "head.out_dim": "16",
        "train.epochs": "2",
        "train.batch_size": "4",
        "train.warmup_epochs": "1",
        "train.snapshot_every_epochs": "1",
        "crops.global_size": "16",
        "crops.local_size": "8",
    }
    steps = core.pretrain(config)
    assert steps == 16
    run = tmp_path / "runs" / "smoke"
    ckpt = run / "ckpt" / "final.ckpt"
    assert ckpt.exists()
    assert len([l for l in (run / "metrics.log").read_text().splitlines() if not l.startswith("#")]) == 16

    core.evaluate("knn", str(ckpt), str(data), str(run / "reports"))
    report = (run / "reports" / "knn.txt").read_text()
    assert "k=1" in report and "best=" in report

    sample = str(data / "class0_0000.ppm")
    core.analyze("attention", str(ckpt), [sample], str(run / "exports"))
    csv = (run / "exports" / "attention.csv").read_text().splitlines()
    assert csv[0] == "head,patch,value"
    values = {}
    for line in csv[1:]:
        head, _, value = line.split(",")
        values.setdefault(head, 0.0)
        values[head] += float(value)
    assert all(abs(total - 1.0) < 1e-5 for total in values.values())

    acc = core.knn_eval(str(ckpt), str(data), str(data))
    assert 0.0 <= acc <= 1.0


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(Exception, match="unknown config key"):
        core.pretrain({"bogus.key": "1", "run.dir": str(tmp_path)})
