"""Exporter unit behavior: encoding, atomicity, models, and the CLI."""

import json
import struct

import numpy as np
import pytest

from conftest import write_png
from refharm_exporter.cli import main
from refharm_exporter.errors import ImageLoadError, ModelLoadError, WriteError
from refharm_exporter.export import (
    ExportJob,
    encode_raif,
    export_features,
    load_rgb,
    unit_rows,
)
from refharm_exporter.models import MODELS, load_model

HEADER = struct.Struct("<4sHHHI")


def _job(image_dir, out_dir, **kwargs):
    settings = dict(
        image_paths=sorted(image_dir.glob("*.png")),
        out_dir=out_dir,
        model_name="ref-dvt-tiny-v1",
        patch_size=16,
        resize=64,
    )
    settings.update(kwargs)
    return ExportJob(**settings)


def test_job_validation(image_dir, tmp_path):
    with pytest.raises(ValueError):
        _job(image_dir, tmp_path / "out", patch_size=0)
    with pytest.raises(ValueError):
        _job(image_dir, tmp_path / "out", resize=8)
    with pytest.raises(ValueError):
        _job(image_dir, tmp_path / "out", resize=65)


def test_export_writes_grid_and_sidecar(image_dir, tmp_path):
    out = tmp_path / "out"
    result = export_features(_job(image_dir, out))
    assert result.count == 3
    assert sorted(p.name for p in result.raif_paths) == [
        "alpha.raif", "beta.raif", "gamma.raif",
    ]
    for path in result.raif_paths:
        raw = path.read_bytes()
        magic, version, rows, cols, dim = HEADER.unpack_from(raw)
        assert magic == b"RAIF"
        assert version == 1
        assert (rows, cols, dim) == (4, 4, 8)
        payload = np.frombuffer(raw[HEADER.size :], dtype="<f4").reshape(16, 8)
        norms = np.linalg.norm(payload.astype(np.float64), axis=1)
        assert np.abs(norms - 1.0).max() < 1e-6

        sidecar = json.loads(path.with_name(path.name + ".json").read_text())
        assert sidecar == {
            "image_id": path.stem,
            "patch_size": 16,
            "provider": "ref-dvt-tiny-v1",
        }


def test_export_is_deterministic(image_dir, tmp_path):
    first = export_features(_job(image_dir, tmp_path / "a"))
    second = export_features(_job(image_dir, tmp_path / "b"))
    for pa, pb in zip(first.raif_paths, second.raif_paths):
        assert pa.read_bytes() == pb.read_bytes()
        assert (
            pa.with_name(pa.name + ".json").read_bytes()
            == pb.with_name(pb.name + ".json").read_bytes()
        )


def test_duplicate_images_export_identical_bytes(image_dir, tmp_path):
    twin = image_dir / "alpha_twin.png"
    twin.write_bytes((image_dir / "alpha.png").read_bytes())
    out = tmp_path / "out"
    export_features(_job(image_dir, out))
    assert (out / "alpha.raif").read_bytes() == (out / "alpha_twin.raif").read_bytes()


def test_export_leaves_no_temp_files(image_dir, tmp_path):
    out = tmp_path / "out"
    export_features(_job(image_dir, out))
    assert not [p for p in out.iterdir() if ".tmp-" in p.name]


def test_resize_changes_grid(image_dir, tmp_path):
    out = tmp_path / "out"
    export_features(_job(image_dir, out, resize=128))
    raw = (out / "alpha.raif").read_bytes()
    _, _, rows, cols, dim = HEADER.unpack_from(raw)
    assert (rows, cols, dim) == (8, 8, 8)


def test_model_registry_dims(image_dir, tmp_path):
    out = tmp_path / "out"
    export_features(_job(image_dir, out, model_name="ref-dvt-base-v1"))
    raw = (out / "alpha.raif").read_bytes()
    _, _, _, _, dim = HEADER.unpack_from(raw)
    assert dim == 16
    sidecar = json.loads((out / "alpha.raif.json").read_text())
    assert sidecar["provider"] == "ref-dvt-base-v1"


def test_unknown_model_raises(image_dir, tmp_path):
    with pytest.raises(ModelLoadError):
        export_features(_job(image_dir, tmp_path / "out", model_name="resnet-50"))
    with pytest.raises(ModelLoadError):
        load_model("nope")
    assert set(MODELS) == {"ref-dvt-tiny-v1", "ref-dvt-base-v1"}


def test_missing_image_raises(image_dir, tmp_path):
    job = _job(image_dir, tmp_path / "out")
    job.image_paths.append(image_dir / "ghost.png")
    with pytest.raises(ImageLoadError):
        export_features(job)


def test_undecodable_image_raises(image_dir, tmp_path):
    (image_dir / "broken.png").write_text("not a png at all")
    with pytest.raises(ImageLoadError):
        export_features(_job(image_dir, tmp_path / "out"))


def test_blocked_output_dir_raises(image_dir, tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("occupied")
    with pytest.raises(WriteError):
        export_features(_job(image_dir, blocker / "out"))


def test_load_rgb_shapes_and_range(image_dir):
    data = load_rgb(image_dir / "alpha.png", 64)
    assert data.shape == (64, 64, 3)
    assert data.dtype == np.float32
    assert data.min() >= 0.0 and data.max() <= 1.0
    small = load_rgb(image_dir / "alpha.png", 32)
    assert small.shape == (32, 32, 3)


def test_load_rgb_identity_at_native_size(image_dir):
    from PIL import Image as PilImage

    with PilImage.open(image_dir / "alpha.png") as img:
        raw = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    assert np.array_equal(load_rgb(image_dir / "alpha.png", 64), raw)


def test_unit_rows_zero_row_becomes_basis():
    rows = unit_rows(np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]))
    assert np.array_equal(rows[0], [1.0, 0.0, 0.0])
    assert np.allclose(rows[1], [0.6, 0.8, 0.0])


def test_encode_raif_rejects_bad_grid():
    with pytest.raises(ValueError):
        encode_raif(np.zeros((5, 4), np.float32), 2, 2)


def test_cli_exports(image_dir, tmp_path, capsys):
    out = tmp_path / "out"
    rc = main(
        [
            "--model", "ref-dvt-tiny-v1",
            "--images", str(image_dir),
            "--out", str(out),
            "--patch-size", "16",
            "--resize", "64",
        ]
    )
    assert rc == 0
    assert sorted(p.name for p in out.glob("*.raif")) == [
        "alpha.raif", "beta.raif", "gamma.raif",
    ]
    assert "exported 3 feature grids" in capsys.readouterr().out


def test_cli_unknown_model_is_data_error(image_dir, tmp_path, capsys):
    rc = main(
        ["--model", "resnet-50", "--images", str(image_dir), "--out", str(tmp_path / "o")]
    )
    assert rc == 3
    assert "error:" in capsys.readouterr().err


def test_cli_missing_images_dir_is_data_error(tmp_path):
    rc = main(
        [
            "--model", "ref-dvt-tiny-v1",
            "--images", str(tmp_path / "nowhere"),
            "--out", str(tmp_path / "o"),
        ]
    )
    assert rc == 3


def test_cli_empty_images_dir_is_data_error(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    rc = main(
        ["--model", "ref-dvt-tiny-v1", "--images", str(empty), "--out", str(tmp_path / "o")]
    )
    assert rc == 3


def test_cli_bad_geometry_is_usage_error(image_dir, tmp_path):
    with pytest.raises(SystemExit) as err:
        main(
            [
                "--model", "ref-dvt-tiny-v1",
                "--images", str(image_dir),
                "--out", str(tmp_path / "o"),
                "--resize", "10",
            ]
        )
    assert err.value.code == 2
