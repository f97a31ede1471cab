"""Tests for triplet loss, sampling, galleries and nearest-neighbor identification."""

import tracemalloc
from collections import Counter

import numpy as np
import pytest
import torch

from catreid.core.exceptions import (
    ClassTooSmallError,
    EmptyGalleryError,
    GalleryParseError,
    InvalidEmbeddingError,
    SchemaVersionError,
)
from catreid.schemas.dataset import Split
from catreid.schemas.metric import EmbeddingGallery
from catreid.schemas.training import GalleryMode, MiningMode, TripletVariant
from catreid.services.dataset_service import split
from catreid.services.metric_learning import (
    BalancedBatchSampler,
    classify,
    classify_many,
    gallery_from_embeddings,
    load_gallery,
    sample_triplets,
    save_gallery,
    select_support,
    triplet_loss,
)


def _per_image_gallery(rows: np.ndarray, labels: list[int], classes: int) -> EmbeddingGallery:
    return EmbeddingGallery(
        class_ids=[f"c{i}" for i in range(classes)],
        embeddings=rows,
        row_labels=labels,
        embed_dim=rows.shape[1],
        support_size=1,
        mode=GalleryMode.PER_IMAGE,
    )


def test_triplet_loss_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a, p, n = (rng.normal(size=512) for _ in range(3))
        expected = max(((a - p) ** 2).sum() - ((a - n) ** 2).sum() + 1.0, 0.0)
        got = triplet_loss(*(torch.from_numpy(v) for v in (a, p, n)), margin=1.0)
        assert abs(got.item() - expected) <= 1e-6 * max(1.0, abs(expected))


def test_triplet_loss_examples():
    a = torch.tensor([0.0, 0.0])
    p = torch.tensor([1.0, 0.0])
    n = torch.tensor([3.0, 0.0])
    assert triplet_loss(a, p, n, margin=1.0).item() == 0.0
    assert triplet_loss(a, n, p, margin=1.0).item() == 9.0
    assert triplet_loss(a, a, a, margin=0.5).item() == 0.5


def test_triplet_loss_gradient():
    torch.manual_seed(0)
    inputs = [torch.randn(4, 8, dtype=torch.float64, requires_grad=True) for _ in range(3)]
    assert torch.autograd.gradcheck(lambda a, p, n: triplet_loss(a, p, n, margin=5.0), inputs)


def test_triplet_loss_gradient_matches_central_differences():
    torch.manual_seed(1)
    a, p, n = (torch.randn(512, dtype=torch.float64) for _ in range(3))
    margin = abs(((a - p) ** 2).sum() - ((a - n) ** 2).sum()).item() + 10.0
    leaves = [v.clone().requires_grad_(True) for v in (a, p, n)]
    loss = triplet_loss(*leaves, margin=margin)
    assert loss.item() > 0  # hinge active
    loss.backward()

    h = 1e-6
    for which, leaf in enumerate(leaves):
        numeric = torch.empty(512, dtype=torch.float64)
        for i in range(512):
            args = [a, p, n]
            step = torch.zeros(512, dtype=torch.float64)
            step[i] = h
            args[which] = args[which] + step
            up = triplet_loss(*args, margin=margin).item()
            args[which] = args[which] - 2 * step
            down = triplet_loss(*args, margin=margin).item()
            numeric[i] = (up - down) / (2 * h)
        assert torch.allclose(leaf.grad, numeric, atol=1e-4, rtol=1e-6)


def test_as_printed_variant_has_no_hinge():
    a = torch.tensor([0.0, 0.0])
    p = torch.tensor([3.0, 4.0])
    n = torch.tensor([0.0, 1.0])
    assert triplet_loss(a, p, n, margin=1.0, variant=TripletVariant.AS_PRINTED).item() == 7.0


def test_triplet_loss_input_errors():
    with pytest.raises(InvalidEmbeddingError):
        triplet_loss(torch.zeros(4), torch.zeros(4), torch.zeros(5))
    with pytest.raises(InvalidEmbeddingError):
        triplet_loss(torch.zeros(4), torch.zeros(4), torch.tensor([0.0, 0.0, 0.0, float("nan")]))
    with pytest.raises(ValueError):
        triplet_loss(torch.zeros(4), torch.zeros(4), torch.zeros(4), margin=-1.0)


def test_sample_triplets_are_valid():
    labels = [0, 0, 1, 1, 2, 2, 2, 3]
    triplets = sample_triplets(labels, np.random.default_rng(0))
    assert len(triplets) == 7
    for t in triplets:
        assert t.anchor_idx != t.positive_idx
        assert labels[t.anchor_idx] == labels[t.positive_idx]
        assert labels[t.anchor_idx] != labels[t.negative_idx]


def test_sample_triplets_empty_batches():
    rng = np.random.default_rng(0)
    assert sample_triplets([1, 1, 1, 1], rng) == []
    assert sample_triplets([0, 1, 2, 3], rng) == []


def test_semihard_picks_from_band():
    labels = [0, 0, 1, 1]
    emb = torch.tensor([[0.0], [1.0], [1.2], [5.0]])
    triplets = sample_triplets(labels, np.random.default_rng(0), MiningMode.SEMIHARD, emb, margin=1.0)
    assert next(t for t in triplets if t.anchor_idx == 0).negative_idx == 2


def test_semihard_needs_embeddings():
    with pytest.raises(ValueError):
        sample_triplets([0, 0, 1, 1], np.random.default_rng(0), MiningMode.SEMIHARD)


def test_balanced_batches():
    labels = [c for c in range(6) for _ in range(5)] + [6]
    sampler = BalancedBatchSampler(labels, classes_per_batch=3, samples_per_class=4, seed=0)
    assert len(sampler) == 31 // 12
    batches = list(sampler)
    assert len(batches) == len(sampler)
    for batch in batches:
        counts = Counter(labels[i] for i in batch)
        assert len(counts) == 3
        assert set(counts.values()) == {4}

    again = BalancedBatchSampler(labels, classes_per_batch=3, samples_per_class=4, seed=0)
    assert list(again) == batches
    assert list(again) != batches  # next epoch, next stream


def test_knn_matches_brute_force_with_ties():
    rng = np.random.default_rng(1)
    for _ in range(100):
        classes = int(rng.integers(2, 51))
        dim = int(rng.integers(1, 65))
        rows = rng.integers(-2, 3, size=(classes * 2, dim)).astype(np.float32)
        labels = [int(v) for v in rng.permutation([c for c in range(classes) for _ in range(2)])]
        duplicate = int(rng.integers(len(rows)))
        rows[(duplicate + 1) % len(rows)] = rows[duplicate]
        gallery = _per_image_gallery(rows, labels, classes)

        queries = rng.integers(-2, 3, size=(100, dim)).astype(np.float32)
        got, _ = classify_many(queries, gallery, k=1)
        for query, label in zip(queries, got):
            brute = min(
                (float(((row - query) ** 2).sum()), lab) for row, lab in zip(rows, labels)
            )[1]
            assert label == brute


def test_knn_majority_vote():
    rows = np.array([[0.0], [1.0], [1.1], [5.0]], dtype=np.float32)
    gallery = _per_image_gallery(rows, [0, 1, 1, 0], 2)
    assert classify(np.array([0.0]), gallery, k=1) == "c0"
    assert classify(np.array([0.0]), gallery, k=3) == "c1"
    tied = _per_image_gallery(np.array([[1.0], [-1.0]], dtype=np.float32), [1, 0], 2)
    assert classify(np.array([0.0]), tied, k=2) == "c0"


def test_classify_errors():
    gallery = gallery_from_embeddings(["a", "b"], [np.ones((2, 4)), np.zeros((2, 4))], 2)
    with pytest.raises(InvalidEmbeddingError):
        classify(np.zeros(3), gallery)
    with pytest.raises(ValueError):
        classify(np.zeros(4), gallery, k=3)
    empty = EmbeddingGallery(
        class_ids=[], embeddings=np.zeros((0, 4)), row_labels=[], embed_dim=4, support_size=1
    )
    with pytest.raises(EmptyGalleryError):
        classify(np.zeros(4), empty)


def test_mean_gallery_rows():
    gallery = gallery_from_embeddings(
        ["a", "b"], [np.array([[0.0, 0.0], [2.0, 2.0]]), np.array([[4.0, 0.0], [6.0, 0.0]])], 2
    )
    assert np.allclose(gallery.embeddings, [[1.0, 1.0], [5.0, 0.0]])
    assert gallery.row_labels == [0, 1]
    labels, distances = classify_many(np.array([[1.0, 1.0], [5.0, 3.0]]), gallery)
    assert list(labels) == [0, 1]
    assert np.allclose(distances, [0.0, 3.0])


def test_per_image_gallery_keeps_every_row():
    gallery = gallery_from_embeddings(
        ["a", "b"], [np.zeros((3, 2)), np.ones((3, 2))], 3, mode=GalleryMode.PER_IMAGE
    )
    assert gallery.embeddings.shape == (6, 2)
    assert gallery.row_labels == [0, 0, 0, 1, 1, 1]


def test_empty_class_list():
    with pytest.raises(EmptyGalleryError):
        gallery_from_embeddings([], [], 3)


def test_support_comes_from_train(make_manifest):
    manifest = split(make_manifest({"a": 10, "b": 9}), seed=0)
    support = select_support(manifest, support_per_class=3, seed=0)
    assert list(support) == ["a", "b"]
    assert all(r.split == Split.TRAIN for rs in support.values() for r in rs)
    assert select_support(manifest, support_per_class=3, seed=0) == support
    with pytest.raises(ClassTooSmallError):
        select_support(manifest, support_per_class=5, seed=0)


def test_gallery_file_round_trip(tmp_path):
    gallery = gallery_from_embeddings(
        ["a", "b", "c"], [np.random.default_rng(i).normal(size=(2, 8)) for i in range(3)], 2, seed=4
    )
    loaded = load_gallery(save_gallery(gallery, tmp_path / "gallery.bin"))
    assert loaded.class_ids == gallery.class_ids
    assert np.array_equal(loaded.embeddings, gallery.embeddings)
    assert (loaded.seed, loaded.support_size, loaded.mode) == (4, 2, GalleryMode.MEAN)


def test_gallery_schema_mismatch(tmp_path):
    path = tmp_path / "gallery.bin"
    path.write_bytes(b'{"schema": "catreid-gallery/9"}\n')
    with pytest.raises(SchemaVersionError):
        load_gallery(path)


def test_gallery_truncated_body(tmp_path):
    gallery = gallery_from_embeddings(["a", "b"], [np.ones((2, 4)), np.zeros((2, 4))], 2)
    path = save_gallery(gallery, tmp_path / "gallery.bin")
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(GalleryParseError, match="bytes"):
        load_gallery(path)


def test_gallery_without_header_line(tmp_path):
    path = tmp_path / "gallery.bin"
    path.write_bytes(b'{"schema": "catreid-gallery/1"')
    with pytest.raises(GalleryParseError, match="no header line"):
        load_gallery(path)
    path.write_bytes(b"not json\n")
    with pytest.raises(GalleryParseError, match="invalid header"):
        load_gallery(path)


def test_identification_memory_stays_flat():
    rng = np.random.default_rng(0)
    gallery = gallery_from_embeddings(
        [f"cat{i}" for i in range(466)], [rng.normal(size=(1, 512)) for _ in range(466)], 1
    )
    queries = rng.normal(size=(200, 512)).astype(np.float32)

    tracemalloc.start()
    try:
        labels, distances = classify_many(queries, gallery)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()

    assert labels.shape == distances.shape == (200,)
    # a full queries x rows x dim array would be ~380 MB here
    assert peak < 32 * 1024 * 1024
