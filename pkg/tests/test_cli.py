"""End-to-end tests for the command line interface on the smoke preset."""

import json

import numpy as np
import pytest

from rcdmkit.cli import main
from rcdmkit.runtime.manifest import load_manifest


@pytest.fixture
def run(smoke_config, tmp_path):
    cache = tmp_path / "cache"

    def invoke(command, *args, out=None):
        out = out or tmp_path / command
        argv = [command, *args, "--config", str(smoke_config), "--out", str(out),
                "--set", f"runtime.cache_dir={cache}"]
        return main(argv), out

    return invoke


@pytest.fixture
def trained(run):
    code, enc_dir = run("train-encoder", "--flavor", "ssl")
    assert code == 0
    encoder = str(enc_dir / "encoder.ckpt")
    code, rcdm_dir = run("train-rcdm", "--encoder", encoder)
    assert code == 0
    return encoder, str(rcdm_dir / "denoiser.ckpt")


@pytest.mark.unit
def test_info_and_help(capsys):
    assert main(["info"]) == 0
    assert "rcdmkit" in capsys.readouterr().out
    assert main([]) == 0


@pytest.mark.unit
def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["sample"])
    assert exc.value.code == 2
    assert "error kind=usage exit=2" in capsys.readouterr().err


@pytest.mark.unit
def test_missing_checkpoint_is_an_artifact_error(run, capsys):
    code, _ = run("sample", "--encoder", "absent.ckpt", "--denoiser", "absent.ckpt")
    assert code == 3
    assert "error kind=artifact exit=3" in capsys.readouterr().err


@pytest.mark.unit
def test_bad_override_is_a_config_error(run, capsys):
    code, _ = run("train-encoder", "--set", "kde.bandwidth=1")
    assert code == 2
    assert "kind=config" in capsys.readouterr().err


@pytest.mark.integration
def test_train_rcdm_with_wrong_rep_dim_is_a_fingerprint_error(run, capsys):
    code, enc_dir = run("train-encoder", "--flavor", "ssl")
    assert code == 0
    code, _ = run("train-rcdm", "--encoder", str(enc_dir / "encoder.ckpt"),
                  "--set", "denoiser.rep_dim=99")
    assert code == 3
    assert "error kind=fingerprint exit=3" in capsys.readouterr().err


@pytest.mark.integration
def test_projector_of_supervised_encoder_is_refused(run, capsys):
    code, enc_dir = run("train-encoder", "--flavor", "supervised")
    assert code == 0
    code, _ = run("train-rcdm", "--encoder", str(enc_dir / "encoder.ckpt"),
                  "--source", "projector")
    assert code == 2
    assert "kind=config" in capsys.readouterr().err


@pytest.mark.integration
def test_fid_without_samples_is_an_artifact_error(run, capsys):
    code, enc_dir = run("train-encoder", "--flavor", "ssl")
    assert code == 0
    code, _ = run(
        "evaluate", "--suite", "fid", "--encoder", str(enc_dir / "encoder.ckpt")
    )
    assert code == 3
    assert "error kind=artifact exit=3" in capsys.readouterr().err


@pytest.mark.slow
@pytest.mark.integration
def test_train_and_sample(trained, run):
    encoder, denoiser = trained
    code, out = run(
        "sample", "--encoder", encoder, "--denoiser", denoiser, "--index", "0"
    )
    assert code == 0
    samples = np.load(out / "samples.npy")
    assert samples.shape == (2, 3, 8, 8)
    conditioning = json.loads((out / "conditioning.json").read_text(encoding="utf-8"))
    assert conditioning["kind"] == "dataset" and conditioning["count"] == 2
    manifest = load_manifest(out)
    assert manifest.command == "sample"
    expected = {"samples.png", "samples.npy", "conditioning.json"}
    assert set(manifest.artifacts) == expected
    assert not (out / ".rcdmkit.lock").exists()


@pytest.mark.slow
@pytest.mark.integration
def test_generation_commands(trained, run):
    encoder, denoiser = trained
    code, _ = run(
        "interpolate",
        "--encoder",
        encoder,
        "--denoiser",
        denoiser,
        "--a",
        "0",
        "--b",
        "1",
    )
    assert code == 0
    code, _ = run(
        "kde-sample", "--encoder", encoder, "--denoiser", denoiser, "--count", "3"
    )
    assert code == 0
    code, out = run(
        "manipulate",
        "--encoder",
        encoder,
        "--denoiser",
        denoiser,
        "--op",
        "zero",
        "--common",
        "--k",
        "3",
        "--top-m",
        "2",
    )
    assert code == 0
    report = json.loads((out / "manipulation.json").read_text(encoding="utf-8"))
    assert len(report["dims"]) == 2 and len(report["neighbors"]) == 3


@pytest.mark.slow
@pytest.mark.integration
def test_analysis_commands(trained, run):
    encoder, denoiser = trained
    code, out = run(
        "match", "--encoder", encoder, "--distances", "l2", "cosine", "--nullspace"
    )
    assert code == 0
    assert len((out / "jtable.tsv").read_text(encoding="utf-8").splitlines()) == 3
    nullspace = json.loads((out / "nullspace.json").read_text(encoding="utf-8"))
    assert nullspace["nullspace_dimension"] >= nullspace["bound"]

    code, out = run("attack", "--encoder", encoder, "--denoiser", denoiser)
    assert code == 0
    attack = json.loads((out / "attack.json").read_text(encoding="utf-8"))
    assert [r["epsilon"] for r in attack["records"]] == [0.0, 0.1]
    assert attack["records"][0]["rep_distance"] == 0.0


@pytest.mark.slow
@pytest.mark.integration
def test_evaluate_suites(trained, run, capsys):
    encoder, denoiser = trained
    code, faith = run(
        "evaluate",
        "--suite",
        "faithfulness",
        "--encoder",
        encoder,
        "--denoiser",
        denoiser,
    )
    assert code == 0
    report = json.loads((faith / "faithfulness.json").read_text(encoding="utf-8"))
    assert len(report["rcdm"]["ranks"]) == 4
    samples = str(faith / "samples.npy")

    for suite in ("distance", "fid"):
        code, _ = run(
            "evaluate",
            "--suite",
            suite,
            "--encoder",
            encoder,
            "--samples",
            samples,
            out=faith.parent / suite,
        )
        assert code == 0
    code, _ = run(
        "evaluate",
        "--suite",
        "invariance",
        "--encoder",
        encoder,
        out=faith.parent / "inv",
    )
    assert code == 0

    code, _ = run(
        "evaluate", "--suite", "fid", "--encoder", encoder, out=faith.parent / "nofid"
    )
    assert code == 3
    assert "kind=artifact" in capsys.readouterr().err


@pytest.mark.slow
@pytest.mark.integration
def test_replay_reproduces_checksums(trained, run, tmp_path):
    encoder, denoiser = trained
    code, out = run(
        "sample",
        "--encoder",
        encoder,
        "--denoiser",
        denoiser,
        "--index",
        "1",
        "--seed",
        "11",
    )
    assert code == 0
    assert main(["replay", str(out), "--out", str(tmp_path / "replayed")]) == 0
    replayed = load_manifest(tmp_path / "replayed")
    assert replayed.checksums() == load_manifest(out).checksums()
