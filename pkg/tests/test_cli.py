import numpy as np
import pytest

from splatcodec.checkpoint import CheckpointError, load_model, save_model
from splatcodec.cli import main


def test_checkpoint_roundtrip_is_exact(tmp_path, trained_models):
    for v, m in trained_models.items():
        save_model(m, tmp_path / f"{v}.ckpt")
        back = load_model(tmp_path / f"{v}.ckpt")
        assert back.variant == v and back.seed == m.seed
        for name, arr in m.params().items():
            ref = back.params()[name]
            assert ref.dtype == arr.dtype and np.array_equal(ref, arr), name
        assert np.array_equal(back.x, m.x)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "bad.ckpt")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rc = main(["train", "--scene", "synth:n=300,seed=1", "--iters", "10", "--quiet", "-o", str(d / "m.ckpt")])
    assert rc == 0
    return d


def test_train_outputs(workdir):
    assert (workdir / "m.ckpt").exists()
    lines = (workdir / "m.ckpt.curve.csv").read_text().splitlines()
    assert lines[0] == "iteration,distortion,rate_bits,loss" and len(lines) == 11


def test_train_is_deterministic(workdir):
    other = workdir / "again.ckpt"
    assert main(["train", "--scene", "synth:n=300,seed=1", "--iters", "10", "--quiet", "-o", str(other)]) == 0
    assert other.read_bytes() == (workdir / "m.ckpt").read_bytes()


def test_bad_flag_values(workdir, capsys):
    assert main(["train", "--scene", "synth:n=10", "--lambda-e", "-1", "-o", str(workdir / "x")]) == 2
    assert "--lambda-e" in capsys.readouterr().err
    assert main(["train", "--scene", "synth:bogus=1", "-o", str(workdir / "x")]) == 2
    with pytest.raises(SystemExit) as err:
        main(["train", "--scene", "synth:n=10", "--no-such-flag", "-o", "x"])
    assert err.value.code == 2
    with pytest.raises(SystemExit):
        main([])


def test_config_file(workdir):
    cfg = workdir / "c.cfg"
    cfg.write_text("lambda_e = 0.002\nvariant = predict\niters = 3\n")
    assert main(["train", "--scene", "synth:n=100", "--config", str(cfg), "--quiet", "-o",
                 str(workdir / "c.ckpt")]) == 0
    assert load_model(workdir / "c.ckpt").variant == "predict"
    cfg.write_text("lambda_e = oops\n")
    assert main(["train", "--scene", "synth:n=100", "--config", str(cfg), "-o", str(workdir / "c2")]) == 2


def test_encode_decode_reencode(workdir):
    w = str(workdir)
    assert main(["encode", f"{w}/m.ckpt", "-o", f"{w}/m.az3d"]) == 0
    assert main(["decode", f"{w}/m.az3d", "-o", f"{w}/d.ckpt"]) == 0
    assert main(["encode", f"{w}/d.ckpt", "-o", f"{w}/d.az3d"]) == 0
    assert (workdir / "m.az3d").read_bytes() == (workdir / "d.az3d").read_bytes()


def test_corrupt_stream_exit_code(workdir, capsys):
    data = (workdir / "m.az3d").read_bytes() if (workdir / "m.az3d").exists() else None
    if data is None:
        main(["encode", str(workdir / "m.ckpt"), "-o", str(workdir / "m.az3d")])
        data = (workdir / "m.az3d").read_bytes()
    (workdir / "t.az3d").write_bytes(data[: len(data) // 2])
    assert main(["decode", str(workdir / "t.az3d"), "-o", str(workdir / "t.ckpt")]) == 4
    assert "section" in capsys.readouterr().err
    (workdir / "g.az3d").write_bytes(b"JUNK" + data[4:])
    assert main(["stats", str(workdir / "g.az3d")]) == 4


def test_stats_sections_sum_to_file(workdir, capsys):
    main(["encode", str(workdir / "m.ckpt"), "-o", str(workdir / "s.az3d")])
    capsys.readouterr()
    assert main(["stats", str(workdir / "s.az3d"), "--format", "csv"]) == 0
    rows = [ln.split(",") for ln in capsys.readouterr().out.strip().splitlines()]
    assert rows[0][:2] == ["section", "bytes"]
    body = {r[0]: int(r[1]) for r in rows[1:]}
    total = body.pop("total")
    assert sum(body.values()) == total == (workdir / "s.az3d").stat().st_size


def test_stats_banner_has_seed_and_version(workdir, capsys):
    main(["encode", str(workdir / "m.ckpt"), "-o", str(workdir / "s.az3d")])
    capsys.readouterr()
    main(["stats", str(workdir / "s.az3d"), "--model", str(workdir / "m.ckpt")])
    out = capsys.readouterr().out
    assert out.startswith("# splatcodec ") and "format 1" in out and "seed 0" in out
    assert "clamped symbols" in out


def test_render_writes_images(workdir, capsys):
    main(["encode", str(workdir / "m.ckpt"), "-o", str(workdir / "r.az3d")])
    prefix = workdir / "img"
    assert main(["render", str(workdir / "r.az3d"), "--scene", "synth:n=300,seed=1", "-o", str(prefix)]) == 0
    for suffix in ("_original", "_decoded", "_pair"):
        assert (workdir / f"img{suffix}.ppm").exists()
    assert "psnr" in capsys.readouterr().out
    assert main(["render", str(workdir / "r.az3d"), "--scene", "synth:n=20", "-o", str(prefix)]) == 2


def test_ablate_csv_rows(capsys):
    assert main(["ablate", "--scene", "synth:n=200,seed=1", "--iters", "3", "--no-render", "--quiet",
                 "--format", "csv"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == ["Baseline", "W_predict", "W_predict_hyper"]


def test_threads_validated():
    assert main(["check", "--threads", "0"]) == 2


def test_check_passes(capsys):
    assert main(["check", "--format", "csv"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "range_coder_roundtrip,pass" in out
