"""In-process exercises of every CLI subcommand and exit code."""

import json

import numpy as np
import pytest

from refharm.cli import main
from refharm.imgio import ForegroundMask, load_image, save_mask
from refharm.raif import read_raif


@pytest.fixture(scope="module")
def mini_paths(corpus_dir):
    return {
        "manifest": str(corpus_dir / "mini_manifest.json"),
        "index": str(corpus_dir / "mini_index"),
        "images": corpus_dir / "images",
    }


def test_no_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


def test_make_fixtures_smoke(tmp_path, capsys):
    rc = main(["make-fixtures", "--out", str(tmp_path / "corpus")])
    assert rc == 0
    assert (tmp_path / "corpus" / "manifest.json").is_file()
    assert (tmp_path / "corpus" / "checksums.json").is_file()
    out = capsys.readouterr().out
    assert "50 samples" in out
    assert "49 gallery images" in out


def test_index_gallery_builds_index(mini_paths, tmp_path, capsys):
    out = tmp_path / "idx"
    rc = main(["index-gallery", "--manifest", mini_paths["manifest"], "--out", str(out)])
    assert rc == 0
    assert (out / "index.json").is_file()
    assert "indexed 20 gallery images" in capsys.readouterr().out


def test_retrieve_ranks_and_writes_json(mini_paths, tmp_path, capsys):
    out = tmp_path / "results.json"
    rc = main(
        [
            "retrieve",
            "--manifest", mini_paths["manifest"],
            "--index", mini_paths["index"],
            "--sample-id", "tex_00",
            "--max-results", "5",
            "--out", str(out),
        ]
    )
    assert rc == 0
    rows = json.loads(out.read_text())["results"]
    assert rows
    assert len(rows) <= 5
    ids = [r["reference_id"] for r in rows]
    assert "tex_00_dup" in ids
    assert rows == sorted(
        rows,
        key=lambda r: (-r["illum_pair_count"], -r["score_content"], r["reference_id"]),
    )
    assert "1." in capsys.readouterr().out


def test_retrieve_unknown_sample_is_data_error(mini_paths, capsys):
    rc = main(
        [
            "retrieve",
            "--manifest", mini_paths["manifest"],
            "--index", mini_paths["index"],
            "--sample-id", "nope",
        ]
    )
    assert rc == 3
    assert "error:" in capsys.readouterr().err


def test_retrieve_missing_index_is_data_error(mini_paths, tmp_path, capsys):
    rc = main(
        [
            "retrieve",
            "--manifest", mini_paths["manifest"],
            "--index", str(tmp_path / "missing"),
            "--sample-id", "tex_00",
        ]
    )
    assert rc == 3


def test_harmonize_with_reference_and_dump(mini_paths, tmp_path, capsys):
    out = tmp_path / "harmonized.png"
    dump = tmp_path / "attention"
    rc = main(
        [
            "harmonize",
            "--composite", str(mini_paths["images"] / "harm_00_comp.png"),
            "--mask", str(mini_paths["images"] / "harm_00_mask.png"),
            "--reference", str(mini_paths["images"] / "g" / "harm_00_ref.png"),
            "--out", str(out),
            "--dump-attention", str(dump),
        ]
    )
    assert rc == 0
    img = load_image(out)
    assert (img.height, img.width) == (256, 256)
    meta = json.loads((dump / "attention.json").read_text())
    blob = read_raif(dump / "attention.raif")
    assert list(blob.vectors.shape) == meta["weights_shape"]
    assert blob.rows == blob.vectors.shape[0] and blob.cols == 1
    assert len(meta["foreground_patches"]) == blob.vectors.shape[0]
    assert meta["grid"] == [16, 16]


def test_harmonize_reference_flags_conflict(mini_paths, tmp_path):
    with pytest.raises(SystemExit) as err:
        main(
            [
                "harmonize",
                "--composite", str(mini_paths["images"] / "harm_00_comp.png"),
                "--mask", str(mini_paths["images"] / "harm_00_mask.png"),
                "--reference", str(mini_paths["images"] / "g" / "harm_00_ref.png"),
                "--no-reference",
                "--out", str(tmp_path / "out.png"),
            ]
        )
    assert err.value.code == 2


def test_harmonize_identity_path_reports_no_attention(mini_paths, tmp_path, capsys):
    mask_path = tmp_path / "full_mask.png"
    save_mask(ForegroundMask(np.ones((256, 256), dtype=np.uint8)), mask_path)
    rc = main(
        [
            "harmonize",
            "--composite", str(mini_paths["images"] / "flat_00_comp.png"),
            "--mask", str(mask_path),
            "--no-reference",
            "--out", str(tmp_path / "out.png"),
            "--dump-attention", str(tmp_path / "att"),
        ]
    )
    assert rc == 0
    assert "no attention to dump" in capsys.readouterr().out


def test_augment_requires_seed(mini_paths, tmp_path):
    with pytest.raises(SystemExit) as err:
        main(
            [
                "augment",
                "--target", str(mini_paths["images"] / "flat_00_target.png"),
                "--mask", str(mini_paths["images"] / "flat_00_mask.png"),
                "--out", str(tmp_path / "aug"),
            ]
        )
    assert err.value.code == 2


def test_augment_writes_draws(mini_paths, tmp_path, capsys):
    out = tmp_path / "aug"
    rc = main(
        [
            "--seed", "5",
            "augment",
            "--target", str(mini_paths["images"] / "flat_00_target.png"),
            "--mask", str(mini_paths["images"] / "flat_00_mask.png"),
            "--out", str(out),
            "--draws", "3",
        ]
    )
    assert rc == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["aug_0000.png", "aug_0001.png", "aug_0002.png"]
    for name in files:
        img = load_image(out / name)
        assert (img.height, img.width) == (256, 256)


def test_evaluate_requires_seed(mini_paths):
    with pytest.raises(SystemExit) as err:
        main(
            [
                "evaluate",
                "--manifest", mini_paths["manifest"],
                "--index", mini_paths["index"],
                "--identity",
            ]
        )
    assert err.value.code == 2


def test_evaluate_identity_writes_report(mini_paths, tmp_path, capsys):
    out = tmp_path / "report.json"
    rc = main(
        [
            "--seed", "7",
            "evaluate",
            "--manifest", mini_paths["manifest"],
            "--index", mini_paths["index"],
            "--runs", "2",
            "--identity",
            "--out", str(out),
        ]
    )
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["backend"] == "identity"
    assert doc["runs"] == 2
    assert doc["stddev"] == {"mse_mean": 0.0, "psnr_mean": 0.0}
    assert "mean" in capsys.readouterr().out


def test_build_benchmark_cli(mini_paths, tmp_path, capsys):
    out = tmp_path / "bench"
    rc = main(["build-benchmark", "--manifest", mini_paths["manifest"], "--out", str(out)])
    assert rc == 0
    assert (out / "manifest.json").is_file()
    assert (out / "retrievals.json").is_file()
    assert "retained" in capsys.readouterr().out


def test_sgf_check_passes(capsys):
    rc = main(["sgf-check"])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.count(" ok") >= 5
    assert "FAIL" not in out


def test_sgf_check_dump(tmp_path):
    rc = main(["sgf-check", "--dump", str(tmp_path / "golden")])
    assert rc == 0
    shapes = json.loads((tmp_path / "golden" / "shapes.json").read_text())
    for name in ("scores", "weights", "weighted", "modulated"):
        assert (tmp_path / "golden" / f"{name}.raif").is_file()
        blob = read_raif(tmp_path / "golden" / f"{name}.raif")
        assert list(blob.vectors.shape) == shapes[name]


def test_config_section_applies(mini_paths, tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"retrieval": {"max_results": 2}}))
    out = tmp_path / "results.json"
    rc = main(
        [
            "--config", str(cfg),
            "retrieve",
            "--manifest", mini_paths["manifest"],
            "--index", mini_paths["index"],
            "--sample-id", "tex_00",
            "--out", str(out),
        ]
    )
    assert rc == 0
    assert len(json.loads(out.read_text())["results"]) <= 2


def test_config_unknown_key_is_usage_error(mini_paths, tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"retrieval": {"bogus": 1}}))
    with pytest.raises(SystemExit) as err:
        main(
            [
                "--config", str(cfg),
                "retrieve",
                "--manifest", mini_paths["manifest"],
                "--index", mini_paths["index"],
                "--sample-id", "tex_00",
            ]
        )
    assert err.value.code == 2


def test_config_invalid_json_is_usage_error(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text("{nope")
    with pytest.raises(SystemExit) as err:
        main(["--config", str(cfg), "sgf-check"])
    assert err.value.code == 2
