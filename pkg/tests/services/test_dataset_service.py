"""Tests for dataset ingestion, filtering, splitting and manifest files."""

import json

import pytest

from catreid.core.exceptions import (
    ClassTooSmallError,
    DatasetEmptyError,
    ManifestError,
    ManifestParseError,
    SchemaVersionError,
)
from catreid.schemas.dataset import ExclusionReason, Split, Stage
from catreid.services.dataset_service import (
    filter_small_classes,
    ingest,
    load_manifest,
    manifest_data_hash,
    save_manifest,
    split,
)
from catreid.services.synth import class_sizes


def test_ingest_synthetic_tree(synth_root):
    manifest = ingest(synth_root)
    assert manifest.num_classes == 3
    assert len(manifest.records) == 30
    assert [r.path for r in manifest.records] == sorted(r.path for r in manifest.records)
    assert manifest.stages == [Stage.INGESTED]
    assert all(r.source_size == (64, 48) for r in manifest.records)
    assert manifest.errors == []


def test_ingest_missing_root_names_path(tmp_path):
    missing = tmp_path / "nope"
    with pytest.raises(ManifestError, match="nope"):
        ingest(missing)


def test_ingest_without_class_dirs(tmp_path):
    with pytest.raises(DatasetEmptyError, match="no classes found"):
        ingest(tmp_path)


def test_ingest_flags_unreadable_files(synth_root):
    (synth_root / "cat_0000" / "broken.jpg").write_text("not an image")
    manifest = ingest(synth_root)
    broken = [r for r in manifest.records if r.path.endswith("broken.jpg")]
    assert len(broken) == 1
    assert broken[0].exclusion_reason == ExclusionReason.UNREADABLE
    assert [e.path for e in manifest.errors] == [broken[0].path]


def test_filter_excludes_small_class(make_manifest):
    manifest = make_manifest({"a": 10, "b": 7, "c": 8})
    filtered = filter_small_classes(manifest, 8)
    assert set(filtered.class_index) == {"a", "c"}
    assert filtered.exclusion_counts == {"class_too_small": 7}
    assert filtered.has_stage(Stage.FILTERED)
    assert filter_small_classes(filtered, 8) == filtered


def test_filter_ignores_already_excluded(make_manifest):
    manifest = make_manifest({"a": 8, "b": 9})
    records = list(manifest.records)
    records[0] = records[0].excluded(ExclusionReason.NO_DETECTION)
    filtered = filter_small_classes(manifest.model_copy(update={"records": records}), 8)
    assert set(filtered.class_index) == {"b"}
    assert filtered.exclusion_counts == {"class_too_small": 7, "no_detection": 1}


def test_filter_rejects_low_threshold(make_manifest):
    with pytest.raises(ValueError):
        filter_small_classes(make_manifest({"a": 10}), 5)


def test_filter_everything_away(make_manifest):
    with pytest.raises(DatasetEmptyError, match="empty dataset after filtering"):
        filter_small_classes(make_manifest({"a": 6, "b": 7}), 8)


def test_split_counts_per_class(make_manifest):
    result = split(make_manifest({"a": 10, "b": 6}), val_per_class=3, test_per_class=2, seed=0)
    stats = result.stats
    assert (stats["a"].val, stats["a"].test, stats["a"].train) == (3, 2, 5)
    assert (stats["b"].val, stats["b"].test, stats["b"].train) == (3, 2, 1)
    assert result.has_stage(Stage.SPLIT)


def test_split_full_scale_arithmetic(make_manifest):
    counts = {f"cat_{i:04d}": n for i, n in enumerate(class_sizes(466, total=11076))}
    manifest = filter_small_classes(make_manifest(counts), 8)
    result = split(manifest, val_per_class=3, test_per_class=2, seed=0)
    assert len(result.records_in(Split.VAL)) == 1398
    assert len(result.records_in(Split.TEST)) == 932
    assert len(result.records_in(Split.TRAIN)) == 8746


def test_split_is_seed_deterministic(make_manifest):
    manifest = make_manifest({"a": 12, "b": 12, "c": 12})
    first = split(manifest, seed=3)
    assert split(manifest, seed=3) == first
    assert split(manifest, seed=4).records != first.records


def test_split_leaves_excluded_records(make_manifest):
    filtered = filter_small_classes(make_manifest({"a": 10, "b": 7}), 8)
    result = split(filtered, seed=0)
    assert all(r.split == Split.EXCLUDED for r in result.records if r.class_id == "b")


def test_split_rejects_small_class(make_manifest):
    with pytest.raises(ClassTooSmallError, match="'b'"):
        split(make_manifest({"a": 10, "b": 5}), val_per_class=3, test_per_class=2)


def test_manifest_file_round_trip(tmp_path, make_manifest):
    manifest = split(filter_small_classes(make_manifest({"a": 9, "b": 8}), 8), seed=1)
    path = save_manifest(manifest, tmp_path / "manifest.jsonl")
    assert load_manifest(path) == manifest

    header = json.loads(path.read_text().splitlines()[0])
    assert header["schema"] == "catreid-manifest/1"
    assert header["records"] == 17
    assert header["stats"]["a"]["val"] == 3


def test_truncated_manifest_reports_line(tmp_path, make_manifest):
    path = save_manifest(make_manifest({"a": 8}), tmp_path / "manifest.jsonl")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-2]) + "\n")
    with pytest.raises(ManifestParseError, match="truncated") as exc:
        load_manifest(path)
    assert exc.value.line == len(lines) - 1


def test_corrupt_record_reports_line(tmp_path, make_manifest):
    path = save_manifest(make_manifest({"a": 8}), tmp_path / "manifest.jsonl")
    lines = path.read_text().splitlines()
    lines[2] = "{not json"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestParseError) as exc:
        load_manifest(path)
    assert exc.value.line == 3


def test_unknown_schema(tmp_path, make_manifest):
    path = save_manifest(make_manifest({"a": 8}), tmp_path / "manifest.jsonl")
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["schema"] = "catreid-manifest/99"
    path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(SchemaVersionError):
        load_manifest(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "absent.jsonl")


def test_data_hash_follows_records(make_manifest):
    manifest = make_manifest({"a": 8, "b": 8})
    assert manifest_data_hash(manifest) == manifest_data_hash(make_manifest({"a": 8, "b": 8}))
    assert manifest_data_hash(split(manifest, seed=0)) != manifest_data_hash(manifest)
