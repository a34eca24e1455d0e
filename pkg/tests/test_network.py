"""Model assembly: identity at init, shapes, variant lattice, parameter
accounting, checkpoint round trips, gradient flow."""

import numpy as np
import pytest

from hazeprior import checkpoint, network
from hazeprior.errors import ConfigError, ShapeError
from hazeprior.gradcheck import grad_check
from hazeprior.tensor import Tensor, abs_, mean, no_grad, sub

TINY = dict(base_channels=8, blocks_per_stage=1, window=4, overlap_ratio=0.5, heads=2)


def tiny_cfg(**over):
    kw = dict(TINY)
    kw.update(over)
    return network.NetConfig(**kw)


def rand_input(rng, n=1, h=16, w=16):
    return rng.uniform(0, 1, size=(n, 3, h, w)), rng.uniform(0, 1, size=(n, 1, h, w))


def randomize_zero_weights(weights, seed=0, include_heads=False):
    r = np.random.default_rng(seed)
    for name, t in weights.named():
        if name.startswith("head.") and not include_heads:
            continue
        if not t.data.any():
            t.data[...] = r.normal(0.0, 0.1, size=t.shape)


def open_refine_relus(weights):
    """Put the depth-refinement relu pre-activations well above zero (positive
    weights, positive bias) so finite differences and dead-unit checks are
    meaningful on positive depth inputs."""
    named = dict(weights.named())
    for name in ("dgam.refine.0.w", "dgam.refine.1.w"):
        named[name].data[...] = np.abs(named[name].data)
    for name in ("dgam.refine.0.b", "dgam.refine.1.b"):
        named[name].data[...] = 0.3


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        network.NetConfig(scales=2)
    with pytest.raises(ConfigError):
        network.NetConfig(base_channels=15)
    with pytest.raises(ConfigError):
        network.NetConfig(blocks_per_stage=0)
    with pytest.raises(ConfigError):
        network.NetConfig(base_channels=16, heads=3)
    with pytest.raises(ConfigError):
        network.NetConfig(attention_kind="MDTA")
    with pytest.raises(ConfigError):
        network.NetConfig(query_side="both")
    with pytest.raises(ConfigError):
        network.NetConfig(depth_source="lidar")
    with pytest.raises(ConfigError):
        network.NetConfig(use_dpfm=False, dpfm_in_decoder=True)


def test_config_text_round_trip():
    cfg = tiny_cfg(use_dgam=False, attention_kind="CCA", query_side="rgb", seed=9)
    assert network.config_from_text(network.config_to_text(cfg)) == cfg


def test_config_text_rejects_garbage():
    with pytest.raises(ConfigError):
        network.config_from_text("base_channels=eight\n")
    with pytest.raises(ConfigError):
        network.config_from_text("flux_capacitor=1\n")
    with pytest.raises(ConfigError):
        network.config_from_text("no equals sign here\n")


def test_stage_channels_ladder():
    cfg = network.NetConfig(base_channels=16)
    assert [cfg.stage_channels(i) for i in range(3)] == [16, 32, 64]


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def test_same_seed_bit_identical_weights():
    a = network.build_variant(tiny_cfg(seed=5))
    b = network.build_variant(tiny_cfg(seed=5))
    for (na, ta), (nb, tb) in zip(a.named(), b.named()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)
    c = network.build_variant(tiny_cfg(seed=6))
    assert any(not np.array_equal(ta.data, tc.data)
               for (_, ta), (_, tc) in zip(a.named(), c.named()))


def test_parameter_names_unique():
    w = network.build_variant(tiny_cfg())
    names = [n for n, _ in w.named()]
    assert len(names) == len(set(names))


def test_count_parameters_oracles():
    assert network.count_parameters([]) == 0
    conv = [Tensor(np.zeros((8, 4, 3, 3))), Tensor(np.zeros((8,)))]
    assert network.count_parameters(conv) == 4 * 8 * 9 + 8 == 296
    w = network.build_variant(tiny_cfg())
    assert network.count_parameters(w) == sum(t.size for _, t in w.named())


def test_module_parameter_deltas():
    base = network.count_parameters(network.build_variant(
        tiny_cfg(use_dgam=False, use_dpfm=False)))
    dgam_only = network.count_parameters(network.build_variant(
        tiny_cfg(use_dgam=True, use_dpfm=False)))
    full = network.count_parameters(network.build_variant(tiny_cfg()))
    plain_stem = 8 * 3 * 9 + 8
    dgam_w = network.build_variant(tiny_cfg(use_dpfm=False)).dgam
    assert dgam_only - base == network.count_parameters(dgam_w) - plain_stem
    assert full > dgam_only > base


def test_depth_source_does_not_change_parameter_count():
    deltas = []
    for src in ("file", "constant_gray"):
        n = network.count_parameters(network.build_variant(tiny_cfg(depth_source=src)))
        b = network.count_parameters(network.build_variant(
            tiny_cfg(depth_source=src, use_dgam=False, use_dpfm=False)))
        deltas.append(n - b)
    assert deltas[0] == deltas[1]


def test_decoder_placement_same_shapes():
    enc = network.build_variant(tiny_cfg(seed=2))
    dec = network.build_variant(tiny_cfg(seed=2, dpfm_in_decoder=True))
    for (na, ta), (nb, tb) in zip(enc.named(), dec.named()):
        assert na == nb and ta.shape == tb.shape


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_identity_at_init_bit_exact(rng):
    hazy, depth = rand_input(rng, n=2, h=16, w=24)
    for kw in (dict(), dict(use_dgam=False), dict(dgam_gate=False),
               dict(use_dpfm=False), dict(dpfm_in_decoder=True),
               dict(attention_kind="CCA"), dict(depth_source="constant_gray")):
        cfg = tiny_cfg(**kw)
        w = network.build_variant(cfg)
        out = network.forward(hazy, depth, cfg, w)
        assert np.array_equal(out[0].data, hazy)


def test_output_scale_pyramid(rng):
    cfg = tiny_cfg()
    w = network.build_variant(cfg)
    hazy, depth = rand_input(rng, h=32, w=16)
    out = network.forward(hazy, depth, cfg, w)
    assert len(out.restored) == 3
    assert out[0].shape == (1, 3, 32, 16)
    assert out[1].shape == (1, 3, 16, 8)
    assert out[2].shape == (1, 3, 8, 4)


def test_image_skip_is_area_average(rng):
    cfg = tiny_cfg()
    w = network.build_variant(cfg)
    hazy, depth = rand_input(rng, h=16, w=16)
    out = network.forward(hazy, depth, cfg, w)
    half = hazy.reshape(1, 3, 8, 2, 8, 2).mean(axis=(3, 5))
    quarter = half.reshape(1, 3, 4, 2, 4, 2).mean(axis=(3, 5))
    assert np.allclose(out[1].data, half, atol=1e-15)
    assert np.allclose(out[2].data, quarter, atol=1e-15)


def test_forward_rejects_bad_dims(rng):
    cfg = tiny_cfg()
    w = network.build_variant(cfg)
    with pytest.raises(ShapeError, match="pad"):
        network.forward(rng.uniform(size=(1, 3, 18, 16)), rng.uniform(size=(1, 1, 18, 16)), cfg, w)
    with pytest.raises(ShapeError):
        network.forward(rng.uniform(size=(1, 3, 16, 16)), rng.uniform(size=(1, 1, 8, 8)), cfg, w)
    with pytest.raises(ShapeError):
        network.forward(rng.uniform(size=(1, 4, 16, 16)), rng.uniform(size=(1, 1, 16, 16)), cfg, w)


def test_constant_gray_ignores_depth_values(rng):
    cfg = tiny_cfg(depth_source="constant_gray")
    w = network.build_variant(cfg)
    randomize_zero_weights(w, include_heads=True)
    hazy = rng.uniform(0, 1, size=(1, 3, 16, 16))
    a = network.forward(hazy, rng.uniform(size=(1, 1, 16, 16)), cfg, w)
    b = network.forward(hazy, rng.uniform(size=(1, 1, 16, 16)), cfg, w)
    assert np.array_equal(a[0].data, b[0].data)


def test_file_depth_changes_output(rng):
    cfg = tiny_cfg()
    w = network.build_variant(cfg)
    randomize_zero_weights(w, include_heads=True)
    hazy = rng.uniform(0, 1, size=(1, 3, 16, 16))
    a = network.forward(hazy, rng.uniform(size=(1, 1, 16, 16)), cfg, w)
    b = network.forward(hazy, rng.uniform(size=(1, 1, 16, 16)), cfg, w)
    assert not np.array_equal(a[0].data, b[0].data)


def test_gradient_reaches_every_parameter():
    for seed in range(5):
        r = np.random.default_rng(seed)
        cfg = tiny_cfg(seed=seed)
        w = network.build_variant(cfg)
        randomize_zero_weights(w, seed=seed, include_heads=True)
        open_refine_relus(w)
        hazy = r.uniform(0.2, 0.8, size=(1, 3, 16, 16))
        depth = r.uniform(0.1, 1.0, size=(1, 1, 16, 16))
        out = network.forward(hazy, depth, cfg, w)
        total = out[0].sum() + out[1].sum() + out[2].sum()
        total.backward()
        dead = [n for n, t in w.named() if t.grad is None or not np.any(t.grad)]
        assert not dead, f"seed {seed}: no gradient reached {dead[:5]}"


def test_grad_check_full_tiny_net():
    r = np.random.default_rng(3)
    cfg = tiny_cfg(seed=3)
    w = network.fd_check_point(cfg)
    hazy = Tensor(r.uniform(0.2, 0.8, size=(1, 3, 16, 16)))
    depth = Tensor(r.uniform(0.1, 1.0, size=(1, 1, 16, 16)))
    # l1 target offset keeps |pred - target| away from the abs kink
    target = Tensor(network.forward(hazy, depth, cfg, w)[0].data + 0.5)
    params = [t for _, t in w.named()]

    def f(*_):
        out = network.forward(hazy, depth, cfg, w)
        return mean(abs_(sub(out[0], target)))

    assert grad_check(f, params, max_entries_per_input=3) < 1e-4


def test_fd_check_point_is_not_identity(rng):
    # the conditioned weights must exercise every path, not collapse to skips
    cfg = tiny_cfg(seed=3)
    w = network.fd_check_point(cfg)
    hazy, depth = rand_input(rng)
    out = network.forward(hazy, depth, cfg, w)
    assert np.abs(out[0].data - hazy).max() > 0.01


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    cfg = tiny_cfg(seed=4)
    w = network.build_variant(cfg)
    randomize_zero_weights(w, seed=4)
    path = tmp_path / "model.udpc"
    checkpoint.save_checkpoint(path, w, extra={"adam.step": np.array([17.0])})
    hazy, depth = rand_input(rng)
    with no_grad():
        before = network.forward(hazy, depth, cfg, w)[0].data
    loaded, extra = checkpoint.load_checkpoint(path)
    assert loaded.cfg == cfg
    for (na, ta), (nb, tb) in zip(w.named(), loaded.named()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)
    with no_grad():
        after = network.forward(hazy, depth, loaded.cfg, loaded)[0].data
    assert np.array_equal(before, after)
    assert extra["adam.step"].tolist() == [17.0]


def test_checkpoint_rejects_corruption(tmp_path):
    cfg = tiny_cfg()
    w = network.build_variant(cfg)
    path = tmp_path / "model.udpc"
    checkpoint.save_checkpoint(path, w)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    bad = tmp_path / "bad.udpc"
    bad.write_bytes(bytes(data))
    with pytest.raises(IOError, match="magic"):
        checkpoint.load_checkpoint(bad)


def test_checkpoint_missing_parameter(tmp_path):
    cfg = tiny_cfg()
    w = network.build_variant(cfg)
    entries = [(checkpoint.CONFIG_KEY,
                checkpoint._text_to_array(network.config_to_text(cfg)))]
    entries += [(n, t.data) for n, t in list(w.named())[:-1]]
    path = tmp_path / "partial.udpc"
    checkpoint.write_archive(path, entries)
    with pytest.raises(IOError, match="missing"):
        checkpoint.load_checkpoint(path)


def test_checkpoint_extra_collision_rejected(tmp_path):
    w = network.build_variant(tiny_cfg())
    name = next(iter(dict(w.named())))
    with pytest.raises(ConfigError):
        checkpoint.save_checkpoint(tmp_path / "x.udpc", w,
                                   extra={name: np.zeros(3)})
