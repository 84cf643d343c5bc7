import logging

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from proccaps.network import (
    FINAL_STAGE,
    Classifier,
    Colorizer,
    ConfigError,
    NetworkConfig,
    build_discriminator,
    parameter_groups,
    paper_departures,
    reference_config,
    shape_plan,
)

FULL_GROUPS = {"classifier", "preb", "encoder", "capsules", "decoder", "postb", "head", "temp_heads"}


@pytest.fixture(scope="module")
def model(grid, desk):
    torch.manual_seed(0)
    return Colorizer(desk, grid.centers)


def test_desk_plan(desk, grid):
    plan = shape_plan(desk)
    assert plan["Omega"] == (8, 8, 32)
    assert plan["D4"] == (4, 4, 64)
    assert plan["Upsilon"] == (2, 2, 64 + 7)
    assert plan["X"] == (5, 5, 16)
    assert plan["Z_hat"] == (8, 8, grid.Q)
    assert plan["ab_hat"] == (32, 32, 2)


def test_reference_channel_counts(grid):
    plan = shape_plan(reference_config(grid.Q))
    assert plan["Omega"] == (56, 56, 32)
    assert plan["D1"][2] == 512
    assert plan["Upsilon"][2] == 519
    assert plan["V"][0] == 32
    assert plan["Z_hat"][2] == grid.Q
    assert plan["ab_hat"] == (224, 224, 2)
    assert plan["X"][:2] == (15, 15)
    assert [plan[f"Y{m}"][:2] for m in range(1, 5)] == [(16, 16), (20, 20), (24, 24), (28, 28)]
    assert plan["disc_logits"] == (26, 26, 1)


def test_reference_departures_are_logged(grid, caplog):
    cfg = reference_config(grid.Q)
    expected = {
        ("D1", (16, 16, 512), (7, 7, 512)),
        ("Upsilon", (16, 16, 519), (7, 7, 519)),
        ("V", (32, 8, 8, 128), (32, 7, 7, 128)),
        ("Z_hat", (56, 56, 313), (56, 56, grid.Q)),
    }
    assert set(paper_departures(cfg)) == expected
    with caplog.at_level(logging.INFO, logger="proccaps.network"):
        Colorizer(cfg, grid.centers)
    logged = [r.getMessage() for r in caplog.records if "shape departure" in r.getMessage()]
    assert len(logged) == len(expected)
    for name, stated, built in expected:
        assert f"shape departure: {name} stated {stated} built {built}" in logged


def test_reference_forward(grid):
    torch.manual_seed(0)
    m = Colorizer(reference_config(grid.Q), grid.centers).eval()
    with torch.no_grad():
        out = m(torch.rand(1, 1, 224, 224))
    assert out.logits.shape == (1, grid.Q, 56, 56)
    assert out.ab.shape == (1, 2, 224, 224)
    assert out.extras["V"].shape == (1, 32, 7, 7, 128)
    assert out.extras["X"].shape == (1, 256, 15, 15)


def test_desk_forward_every_stage(model, grid):
    L = torch.rand(2, 1, 32, 32)
    for stage in range(FINAL_STAGE + 1):
        out = model(L, stage)
        res = model.head_resolution(stage)
        assert out.logits.shape == (2, grid.Q, res, res)
        expect = 32 if stage == FINAL_STAGE else res
        assert out.ab.shape == (2, 2, expect, expect)
    assert [model.head_resolution(s) for s in range(6)] == [5, 5, 6, 7, 8, 8]


def test_encoder_outputs(model):
    upsilon, skips, omega = model.encode(torch.rand(1, 1, 32, 32))
    assert len(skips) == 4
    assert omega.shape == (1, 32, 8, 8)
    assert upsilon.shape == (1, 71, 2, 2)
    # class probabilities fill the extra channels, identical at every position
    probs = upsilon[:, 64:]
    torch.testing.assert_close(probs.sum(dim=1), torch.ones(1, 2, 2))
    assert torch.equal(probs, probs[:, :, :1, :1].expand_as(probs))


def test_skip_pairing(model):
    """DBU^1 takes X only; DBU^m concatenates D^(m-1); PostB takes D^4."""
    assert model.decoder[0].skip_channels == 0
    enc = model.cfg.encoder_channels
    assert [model.decoder[m].skip_channels for m in (1, 2, 3)] == [enc[3], enc[2], enc[1]]
    assert model.postb.skip_channels == enc[0]


def test_luminance_passes_through(model):
    from proccaps.colorspace import lab_to_rgb, merge_luminance
    from proccaps.network import colorize

    L = torch.rand(1, 1, 32, 32) * 0.8 + 0.1
    ab = colorize(model.eval(), L)[0].permute(1, 2, 0).double().numpy()
    lab = merge_luminance(L[0, 0].double().numpy(), ab)
    assert (lab[..., 0] == L[0, 0].double().numpy() * 100).all()
    rgb = lab_to_rgb(lab)
    assert rgb.shape == (32, 32, 3)


def test_rejects_wrong_input_size(model):
    with pytest.raises(ValueError):
        model(torch.rand(1, 1, 64, 64))


def test_rejects_q_mismatch(grid, desk):
    with pytest.raises(ConfigError):
        Colorizer(desk.replace(Q=grid.Q + 1), grid.centers)


def test_progressive_stage_needs_progl(grid, desk):
    m = Colorizer(desk.replace(use_progl=False), grid.centers)
    with pytest.raises(ValueError):
        m(torch.rand(1, 1, 32, 32), stage=2)


def test_classifier_freeze_contract():
    torch.manual_seed(0)
    clf = Classifier(7).freeze()
    assert not any(p.requires_grad for p in clf.parameters())
    clf.train()
    assert not clf.training
    L = torch.rand(2, 1, 32, 32)
    torch.testing.assert_close(clf(L), clf(L), rtol=0, atol=0)


@pytest.mark.parametrize(
    "flag,missing,added",
    [
        ("use_capsules", {"capsules"}, {"adapter"}),
        ("use_classifier", {"classifier"}, set()),
        ("use_progl", {"temp_heads"}, set()),
        ("use_gan", set(), set()),
    ],
)
def test_ablation_inventories(grid, desk, flag, missing, added):
    m = Colorizer(desk.replace(**{flag: False}), grid.centers)
    assert parameter_groups(m) == (FULL_GROUPS - missing) | added


def test_no_classifier_upsilon_is_d1(grid, desk):
    cfg = desk.replace(use_classifier=False)
    m = Colorizer(cfg, grid.centers)
    upsilon, skips, _ = m.encode(torch.rand(1, 1, 32, 32))
    assert torch.equal(upsilon, skips[-1])
    assert shape_plan(reference_config(grid.Q).replace(use_classifier=False))["Upsilon"][2] == 512


def test_discriminator_from_config(desk):
    d = build_discriminator(desk)
    assert d(torch.rand(1, 1, 32, 32), torch.rand(1, 2, 32, 32)).shape == (1, 1, 2, 2)


def test_config_digest_tracks_shape_fields(desk):
    assert desk.digest() == NetworkConfig(**{**desk.__dict__}).digest()
    assert desk.digest() != desk.replace(Q=desk.Q + 1).digest()
    assert desk.digest() != desk.replace(use_capsules=False).digest()


def test_explicit_bad_configs():
    bad = [
        dict(input_size=30),
        dict(encoder_strides=(2, 2, 2, 2)),  # bottleneck collapses to 1x1
        dict(encoder_strides=(3, 1, 1, 1)),
        dict(decoder_sizes=(8, 7, 6, 5)),
        dict(decoder_sizes=(4, 5, 6, 8)),  # starts below the capsule decoder output
        dict(decoder_sizes=(5, 6, 7, 9)),  # ends above PreB resolution
        dict(encoder_channels=(64, 64, 64)),
        dict(disc_layers=5),
        dict(Q=0),
    ]
    for kw in bad:
        with pytest.raises(ConfigError):
            NetworkConfig(**kw)


@settings(max_examples=60, deadline=None)
@given(
    st.sampled_from([16, 20, 24, 28, 32, 36, 40, 48]),
    st.lists(st.sampled_from([1, 2]), min_size=4, max_size=4),
    st.lists(st.integers(1, 14), min_size=4, max_size=4),
    st.integers(1, 4),
)
def test_validation_matches_shape_algebra(grid, size, strides, sizes, disc_layers):
    """A config validates iff its shape plan is consistent, and a valid one runs."""
    kw = dict(input_size=size, encoder_strides=tuple(strides), decoder_sizes=tuple(sizes),
              disc_layers=disc_layers, Q=grid.Q, encoder_channels=(4, 4, 4, 4), preb_channels=4,
              decoder_channels=(4, 4, 4, 4), classifier_channels=(4, 4), n_capsules=2,
              capsule_channels=2, n_out_capsules=2, pose_channels=2, disc_channels=2,
              capsule_decoder_channels=2)
    probe = NetworkConfig.__new__(NetworkConfig)
    for k, v in NetworkConfig.__dataclass_fields__.items():
        object.__setattr__(probe, k, kw.get(k, v.default))
    plan = shape_plan(probe)
    consistent = (plan["D1"][0] >= 2 and sizes[0] >= plan["X"][0]
                  and all(a <= b for a, b in zip(sizes, sizes[1:]))
                  and sizes[-1] <= plan["Omega"][0] and plan["disc_logits"][0] >= 1)
    if not consistent:
        with pytest.raises(ConfigError):
            NetworkConfig(**kw)
        return
    cfg = NetworkConfig(**kw)
    m = Colorizer(cfg, grid.centers).eval()
    with torch.no_grad():
        out = m(torch.rand(1, 1, size, size))
    assert out.ab.shape == (1, 2, size, size)
    assert build_discriminator(cfg)(torch.rand(1, 1, size, size), out.ab).shape[-1] == plan["disc_logits"][0]
