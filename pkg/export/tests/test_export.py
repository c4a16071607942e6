import json

import numpy as np
import pytest

from embexport.datasets import bundle_sha256, load_dataset, synthetic_bundle
from embexport.emb1 import l2_normalize, write_emb1
from embexport.encoders import StubEncoder, resolve_encoder
from embexport.export import ExportSpec, export_embeddings, export_prototypes, labeled_split_mask

from finessl.embedstore import read_emb1
from finessl.embedstore import write_emb1 as engine_write_emb1


def _spec(tmp_path, **kw):
    defaults = dict(
        dataset="synthetic:4x20",
        encoder="stub:32",
        labeled_per_class=5,
        seed=1,
        out=str(tmp_path / "train.emb1"),
        test_out=str(tmp_path / "test.emb1"),
    )
    defaults.update(kw)
    return ExportSpec(**defaults)


def test_labeled_split_exact_counts(tmp_path):
    spec = _spec(tmp_path)
    manifest = export_embeddings(spec)
    ds = read_emb1(spec.out)
    assert int(np.sum(ds.labels >= 0)) == 4 * 5
    for k in range(4):
        assert int(np.sum(ds.labels == k)) == 5
    assert manifest["num_classes"] == 4


def test_split_deterministic_across_runs(tmp_path):
    a = _spec(tmp_path, out=str(tmp_path / "a.emb1"), test_out=None)
    b = _spec(tmp_path, out=str(tmp_path / "b.emb1"), test_out=None)
    export_embeddings(a)
    export_embeddings(b)
    da = read_emb1(a.out)
    db = read_emb1(b.out)
    np.testing.assert_array_equal(da.labels, db.labels)
    assert (tmp_path / "a.emb1").read_bytes() == (tmp_path / "b.emb1").read_bytes()


def test_split_changes_with_seed():
    labels = np.repeat(np.arange(3), 30)
    m1 = labeled_split_mask(labels, 4, seed=1)
    m2 = labeled_split_mask(labels, 4, seed=2)
    assert m1.sum() == m2.sum() == 12
    assert not np.array_equal(m1, m2)


def test_split_rejects_small_class():
    labels = np.array([0, 0, 1])
    with pytest.raises(ValueError, match="fewer than"):
        labeled_split_mask(labels, 2, seed=0)


def test_feature_rows_unit_norm(tmp_path):
    spec = _spec(tmp_path)
    export_embeddings(spec)
    for path in (spec.out, spec.test_out):
        ds = read_emb1(path)
        norms = np.linalg.norm(ds.features.astype(np.float64), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)
        assert ds.normalized  # header bit2 set


def test_test_split_keeps_all_labels(tmp_path):
    spec = _spec(tmp_path)
    export_embeddings(spec)
    test_ds = read_emb1(spec.test_out)
    assert np.all(test_ds.labels >= 0)


def test_prototype_block(tmp_path):
    spec = _spec(tmp_path, prototypes=True)
    export_embeddings(spec)
    ds = read_emb1(spec.out)
    assert ds.prototypes is not None
    assert ds.prototypes.shape == (4, 32)
    norms = np.linalg.norm(ds.prototypes.astype(np.float64), axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-5)


def test_prototype_flag_off(tmp_path):
    spec = _spec(tmp_path, prototypes=False)
    export_embeddings(spec)
    ds = read_emb1(spec.out)
    assert ds.prototypes is None


def test_prototypes_mean_pooled_over_templates():
    enc = StubEncoder(16)
    single = export_prototypes(enc, ["cat"], templates=("a photo of a {}",))
    multi = export_prototypes(
        enc, ["cat"], templates=("a photo of a {}", "an image of a {}")
    )
    raw = enc.encode_texts(["a photo of a cat", "an image of a cat"])
    np.testing.assert_allclose(
        multi[0], l2_normalize(np.mean(raw, axis=0, keepdims=True))[0], atol=1e-6
    )
    assert not np.allclose(single, multi)


def test_manifest_contents(tmp_path):
    spec = _spec(tmp_path, prototypes=True)
    export_embeddings(spec)
    with open(spec.out + ".manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["encoder"] == "stub:32"
    assert manifest["split_seed"] == 1
    assert manifest["labeled_per_class"] == 5
    bundle = load_dataset("synthetic:4x20")
    assert manifest["dataset_sha256"] == bundle_sha256(bundle)


def test_cross_component_contract_bit_exact(tmp_path):
    # 10-sample fixture: engine parses our file and re-emits identical bytes
    rng = np.random.default_rng(5)
    features = l2_normalize(rng.standard_normal((10, 8)))
    labels = np.array([0, 1, 2, -1, -1, -1, -1, 1, -1, 0], dtype=np.int32)
    protos = l2_normalize(rng.standard_normal((3, 8)))
    ours = tmp_path / "fixture.emb1"
    write_emb1(ours, features, labels, num_classes=3, prototypes=protos,
               normalized=True)
    parsed = read_emb1(ours)
    np.testing.assert_array_equal(parsed.features, features)
    np.testing.assert_array_equal(parsed.labels, labels)
    np.testing.assert_array_equal(parsed.prototypes, protos)
    assert parsed.normalized
    theirs = tmp_path / "roundtrip.emb1"
    engine_write_emb1(parsed, theirs)
    assert ours.read_bytes() == theirs.read_bytes()


def test_stub_encoder_is_deterministic_and_content_sensitive():
    enc = resolve_encoder("stub:24")
    bundle = synthetic_bundle(3, 4, seed=7)
    a = enc.encode_images(bundle.train_images)
    b = enc.encode_images(bundle.train_images)
    np.testing.assert_array_equal(a, b)
    # same-class images are closer than cross-class images on average
    sims = a @ a.T
    same, cross = [], []
    for i in range(len(a)):
        for j in range(i + 1, len(a)):
            (same if bundle.train_labels[i] == bundle.train_labels[j] else cross).append(
                sims[i, j]
            )
    assert np.mean(same) > np.mean(cross)


def test_unknown_identifiers_rejected():
    with pytest.raises(ValueError, match="unknown encoder"):
        resolve_encoder("resnet:50")
    with pytest.raises(ValueError, match="unknown dataset"):
        load_dataset("imagenet")


def test_cli_smoke(tmp_path, capsys):
    from embexport.cli import main

    out = tmp_path / "cli.emb1"
    code = main([
        "--dataset", "synthetic:3x8", "--encoder", "stub:16",
        "--labeled-per-class", "2", "--seed", "3", "--out", str(out),
    ])
    assert code == 0
    assert "wrote" in capsys.readouterr().out
    ds = read_emb1(out)
    assert int(np.sum(ds.labels >= 0)) == 6


def test_export_then_engine_training_end_to_end(tmp_path):
    # full wire path: export synthetic embeddings, train the engine on them
    from finessl.trainer import TrainConfig, run_training

    spec = _spec(tmp_path, dataset="synthetic:4x30", labeled_per_class=3)
    export_embeddings(spec)
    train = read_emb1(spec.out)
    test = read_emb1(spec.test_out)
    cfg = TrainConfig(strategy="fixmatch", epochs=2, steps_per_epoch=25,
                      batch_b=8, lr=0.3, tau=0.5, seed=1)
    report = run_training(train, cfg, test_dataset=test)
    assert report.final_test_acc is not None
    assert report.final_test_acc > 0.5  # stub features carry class signal
