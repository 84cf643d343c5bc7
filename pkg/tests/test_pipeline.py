from fractions import Fraction

import numpy as np
import pytest
import torch
from PIL import Image

from proccaps.colorspace import rgb_to_lab
from proccaps.pipeline import cli
from proccaps.pipeline.archive import archive_luminance
from proccaps.pipeline.checkpoint import (
    CheckpointFormatError,
    CheckpointMismatchError,
    CheckpointVersionError,
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    new_state,
    save_checkpoint,
)
from proccaps.pipeline.config import RunConfig, RunConfigError, load_config, parse_config_text
from proccaps.pipeline.data import (
    DatasetError,
    ingest_dataset,
    load_color_stack,
    read_luminance,
    write_luminance,
    write_rgb,
)
from proccaps.synthetic import blob_classes, reef_image


# config

def test_desk_defaults():
    cfg = RunConfig()
    assert (cfg.rho, cfg.epochs_e2e, cfg.epochs_gan, cfg.batch_size) == (2, 16, 20, 4)


def test_reference_defaults():
    cfg = RunConfig(scale="reference")
    assert (cfg.rho, cfg.epochs_class, cfg.epochs_e2e, cfg.epochs_gan) == (30, 20, 240, 1000)


def test_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# a comment\nscale = desk\nseed=3\nuse_capsules = no  # trailing\nlr=0.001\n")
    cfg = load_config(path)
    assert cfg.seed == 3 and cfg.use_capsules is False and cfg.lr == 0.001


@pytest.mark.parametrize("text", ["bogus=1", "seed=1\nseed=2", "seed", "seed=abc",
                                  "use_gan=maybe", "rho=0", "scale=huge", "rebalance_lambda=2"])
def test_config_rejects(text):
    with pytest.raises(RunConfigError):
        RunConfig.from_mapping(parse_config_text(text))


def test_config_network_carries_ablations():
    net = RunConfig(use_capsules=False, use_progl=False).network(261)
    assert not net.use_capsules and not net.use_progl and net.use_classifier


# data

@pytest.fixture
def color_dir(tmp_path):
    root = tmp_path / "color"
    root.mkdir()
    for i in (2, 0, 1):
        write_rgb(root / f"img{i}.png", reef_image(32, seed=i))
    return root


def test_ingest_paired_sorted(color_dir):
    ds = ingest_dataset(color_dir)
    assert [s.color.name for s in ds.samples] == ["img0.png", "img1.png", "img2.png"]
    L, ab = load_color_stack(ds, 32)
    assert L.shape == (3, 1, 32, 32) and ab.shape == (3, 2, 32, 32)
    assert 0 <= L.min() and L.max() <= 1


def test_ingest_rejects_corrupt_but_continues(color_dir):
    (color_dir / "broken.png").write_bytes(b"not an image")
    ds = ingest_dataset(color_dir)
    assert len(ds) == 3
    assert [p.name for p, _ in ds.rejects] == ["broken.png"]


def test_ingest_labeled(tmp_path):
    imgs, labels = blob_classes(7, 2, 32, seed=0)
    names = ["reef", "wreck", "diver", "fish", "cave", "turtle", "shark"]
    for n, (im, lab) in enumerate(zip(imgs, labels)):
        d = tmp_path / names[lab]
        d.mkdir(exist_ok=True)
        write_rgb(d / f"{n}.png", np.repeat(im[..., None], 3, axis=-1))
    ds = ingest_dataset(tmp_path, "labeled")
    assert ds.classes == sorted(names)
    assert sorted({s.label for s in ds.samples}) == list(range(7))
    for s in ds.samples:
        assert ds.classes[s.label] == s.color.parent.name


def test_ingest_errors(tmp_path):
    with pytest.raises(DatasetError):
        ingest_dataset(tmp_path / "missing")
    with pytest.raises(DatasetError):
        ingest_dataset(tmp_path)


# archive

def test_archive_ratio_and_round_trip(color_dir, tmp_path):
    out = tmp_path / "L.png"
    rep = archive_luminance(color_dir / "img0.png", out)
    assert rep.raw_ratio == Fraction(1, 3)
    L_ref = rgb_to_lab(np.asarray(Image.open(color_dir / "img0.png"), dtype=np.float64) / 255.0)[..., 0]
    step = 100.0 / 255.0
    assert np.abs(read_luminance(out) - L_ref).max() <= step / 2 + 1e-9


def test_archive_reference_size(tmp_path):
    src = tmp_path / "big.png"
    write_rgb(src, np.random.default_rng(0).random((224, 224, 3)))
    rep = archive_luminance(src, tmp_path / "L.png")
    assert (rep.raw_luminance_bytes, rep.raw_color_bytes) == (50_176, 150_528)


def test_archive_16_bit(color_dir, tmp_path):
    out = tmp_path / "L16.png"
    rep = archive_luminance(color_dir / "img1.png", out, bits=16)
    assert rep.raw_ratio == Fraction(1, 3)
    L_ref = rgb_to_lab(np.asarray(Image.open(color_dir / "img1.png"), dtype=np.float64) / 255.0)[..., 0]
    assert np.abs(read_luminance(out) - L_ref).max() < 1e-3


def test_archive_rejects_garbage(tmp_path):
    bad = tmp_path / "x.png"
    bad.write_bytes(b"garbage")
    with pytest.raises(Exception):
        archive_luminance(bad, tmp_path / "o.png")


def test_luminance_write_read_levels(tmp_path):
    L = np.linspace(0, 100, 64).reshape(8, 8)
    write_luminance(tmp_path / "l.png", L)
    assert np.abs(read_luminance(tmp_path / "l.png") - L).max() <= 100 / 255 / 2 + 1e-9


# checkpoint

@pytest.fixture
def state(grid, desk):
    torch.manual_seed(0)
    return new_state(desk, grid.centers, rarity=np.linspace(0.5, 2, grid.Q))


def test_checkpoint_round_trip(state, desk, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path)
    back = load_checkpoint(path, desk)
    assert back.phase == state.phase
    a, b = state.tensors(), back.tensors()
    assert a.keys() == b.keys()
    for k in a:
        assert torch.equal(a[k], b[k]), k
    assert path.read_bytes()[:4] == MAGIC


def test_checkpoint_truncated(state, desk, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path)
    data = path.read_bytes()
    for cut in (2, 20, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path, desk)


def test_checkpoint_digest_mismatch(state, desk, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path)
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(path, desk.replace(Q=desk.Q - 1))


def test_checkpoint_version_mismatch(state, desk, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path)
    data = bytearray(path.read_bytes())
    data[4] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path, desk)


def test_checkpoint_missing_blob(state, desk, tmp_path):
    from proccaps.pipeline.checkpoint import config_digest

    tensors = state.tensors()
    tensors.pop(sorted(tensors)[3])
    path = tmp_path / "m.ckpt"
    path.write_bytes(encode_checkpoint(tensors, config_digest(desk), "end2end"))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path, desk)


def test_checkpoint_blob_layout():
    t = {"w": torch.tensor([[1.0, 2.0]])}
    data = encode_checkpoint(t, b"\0" * 32, "gan")
    digest, phase, back = decode_checkpoint(data)
    assert phase == "gan" and torch.equal(back["w"], t["w"])
    assert data.endswith(np.array([1.0, 2.0], dtype="<f4").tobytes())


def test_checkpoint_without_discriminator(grid, desk, tmp_path):
    cfg = desk.replace(use_gan=False)
    st = new_state(cfg, grid.centers)
    assert st.discriminator is None
    save_checkpoint(st, tmp_path / "e.ckpt")
    assert load_checkpoint(tmp_path / "e.ckpt", cfg).discriminator is None


# CLI

def test_cli_unknown_flag(capsys):
    assert cli.main(["gamut", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_missing_command(capsys):
    assert cli.main([]) == 1


def test_cli_help_is_success(capsys):
    assert cli.main(["--help"]) == 0


def test_cli_gamut(tmp_path, capsys, grid):
    out = tmp_path / "gamut.txt"
    assert cli.main(["gamut", "-o", str(out)]) == 0
    assert f"Q={grid.Q}" in capsys.readouterr().out
    assert out.read_text().splitlines()[0] == f"gamut v1 bin=10 Q={grid.Q}"


def test_cli_bad_config_is_usage_error(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense=1\n")
    assert cli.main(["gamut", "--config", str(bad)]) == 1


def test_cli_runtime_failure(tmp_path):
    assert cli.main(["train", str(tmp_path / "nowhere"), "-o", str(tmp_path / "m.ckpt")]) == 2


def test_cli_archive(color_dir, tmp_path, capsys):
    assert cli.main(["archive", str(color_dir / "img0.png"), "-o", str(tmp_path / "L.png")]) == 0
    assert "ratio 1/3" in capsys.readouterr().out


def test_cli_end_to_end(color_dir, tmp_path, capsys):
    ckpt = tmp_path / "e2e.ckpt"
    log = tmp_path / "loss.csv"
    assert cli.main(["train", str(color_dir), "-o", str(ckpt), "--epochs", "2", "--log", str(log)]) == 0
    assert log.read_text().startswith("phase,epoch,step,component,value\n")
    gan = tmp_path / "gan.ckpt"
    assert cli.main(["train-gan", str(color_dir), "--init", str(ckpt), "-o", str(gan), "--epochs", "1"]) == 0

    lum = tmp_path / "L.png"
    assert cli.main(["archive", str(color_dir / "img1.png"), "-o", str(lum)]) == 0
    rgb_out = tmp_path / "color.png"
    ab_out = tmp_path / "ab.npy"
    assert cli.main(["colorize", str(lum), "-o", str(rgb_out), "--checkpoint", str(gan),
                     "--ab", str(ab_out)]) == 0
    L_in = read_luminance(lum)
    L_out = rgb_to_lab(np.asarray(Image.open(rgb_out), dtype=np.float64) / 255.0)[..., 0]
    # 8-bit RGB storage and gamut clipping bound the luminance drift
    assert np.abs(L_out - L_in).mean() < 1.0
    assert np.load(ab_out).shape == (32, 32, 2)

    report = tmp_path / "report.csv"
    assert cli.main(["eval", str(color_dir), "--checkpoint", str(gan), "--report", str(report)]) == 0
    assert len(report.read_text().split("\n\n")[0].splitlines()) == 1 + 3


def test_cli_colorize_any_size(color_dir, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    assert cli.main(["train", str(color_dir), "-o", str(ckpt), "--epochs", "1", "--no-gan"]) == 0
    big = tmp_path / "big.png"
    write_luminance(big, np.linspace(0, 100, 48 * 40).reshape(40, 48))
    out = tmp_path / "out.png"
    assert cli.main(["colorize", str(big), "-o", str(out), "--checkpoint", str(ckpt), "--no-gan"]) == 0
    assert Image.open(out).size == (48, 40)


def test_cli_checkpoint_mismatch(color_dir, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    assert cli.main(["train", str(color_dir), "-o", str(ckpt), "--epochs", "1"]) == 0
    assert cli.main(["eval", str(color_dir), "--checkpoint", str(ckpt), "--no-capsules"]) == 2


def test_cli_train_classifier(tmp_path):
    imgs, labels = blob_classes(7, 2, 32, seed=0)
    root = tmp_path / "labeled"
    for n, (im, lab) in enumerate(zip(imgs, labels)):
        d = root / f"class{lab}"
        d.mkdir(parents=True, exist_ok=True)
        write_rgb(d / f"{n}.png", np.repeat(im[..., None], 3, axis=-1))
    out = tmp_path / "cls.ckpt"
    assert cli.main(["train-classifier", str(root), "-o", str(out), "--epochs", "1"]) == 0
    from proccaps.network import desk_config
    from proccaps.colorspace import build_gamut_grid

    st = load_checkpoint(out, desk_config(build_gamut_grid().Q))
    assert st.phase == "classifier"
    assert cli.main(["train-classifier", str(root), "-o", str(out), "--no-classifier"]) == 1
