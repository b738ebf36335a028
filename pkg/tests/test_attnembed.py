import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hsiproto.attnembed import (
    DownsampleParams,
    EmbedConfig,
    EmbeddingNet,
    SEParams,
    cubes_to_tensor,
    embed,
    embed_batch,
    gradient,
    load_checkpoint,
    save_checkpoint,
    se_excite,
    se_recalibrate,
    se_squeeze,
    se_squeeze_avg_only,
    spectral_downsample,
)
from hsiproto.cubeio import HyperCube
from hsiproto.errors import CompatibilityError, TrainingError

from conftest import random_cube


def tiny_config(**kw):
    base = dict(channels=8, reduction=4, down_channels=3, widths=(4, 6), blocks_per_stage=1,
                embedding_dim=5, seed=3)
    base.update(kw)
    return EmbedConfig(**base)


def column(values):
    """An (n,1,1) cube whose single channel holds ``values``."""
    return HyperCube(np.asarray(values, np.float32).reshape(-1, 1, 1))


class TestSqueeze:
    def test_constant(self):
        cube = HyperCube(np.full((3, 3, 2), 2.0, np.float32))
        assert se_squeeze(cube).tolist() == [2.0, 2.0]

    def test_zero_four(self):
        cube = column([0, 4])
        assert se_squeeze(cube)[0] == 3.0
        assert se_squeeze_avg_only(cube)[0] == 2.0

    @given(st.lists(st.floats(-100, 100, allow_nan=False, width=32), min_size=1, max_size=20))
    def test_at_least_average(self, values):
        cube = column(values)
        mod, avg = se_squeeze(cube)[0], se_squeeze_avg_only(cube)[0]
        assert mod >= avg - 1e-9
        if len(set(values)) == 1:
            assert mod == pytest.approx(avg)
        else:
            assert mod > avg


class TestExcite:
    def test_zero_weights_give_half(self):
        s = se_excite(np.array([1.0, -2.0, 3.0]), SEParams.zeros(3, 1))
        assert np.all(s == 0.5)

    def test_range(self, rng):
        se = SEParams(rng.normal(size=(2, 4)), rng.normal(size=2),
                      rng.normal(size=(4, 2)), rng.normal(size=4))
        s = se_excite(rng.normal(size=4) * 10, se)
        assert np.all((s > 0) & (s < 1))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            se_excite(np.ones(3), SEParams.zeros(4, 1))


class TestRecalibrate:
    def test_example(self):
        cube = HyperCube(np.full((2, 2, 2), [2.0, 4.0], np.float32))
        out = se_recalibrate(cube, np.array([0.5, 0.25]))
        assert np.all(out.data == 1.0)

    def test_ones_identity_zeros_annihilate(self, rng):
        cube = random_cube(rng)
        assert se_recalibrate(cube, np.ones(cube.channels)).equals(cube)
        assert not se_recalibrate(cube, np.zeros(cube.channels)).data.any()


class TestDownsample:
    def test_example(self):
        cube = HyperCube(np.array([[[3.0, 5.0]]], np.float32))
        out = spectral_downsample(cube, DownsampleParams(np.array([[1.0, 1.0]]), np.zeros(1)))
        assert out[0, 0, 0] == 8.0

    def test_selection(self, rng):
        cube = random_cube(rng, c=5)
        out = spectral_downsample(cube, DownsampleParams(np.eye(5)[[4, 1]], np.zeros(2)))
        assert np.array_equal(out, cube.data[:, :, [4, 1]].astype(np.float64))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**16))
    def test_pixel_loop(self, seed):
        rng = np.random.default_rng(seed)
        cube = random_cube(rng, 3, 4, 6)
        down = DownsampleParams(rng.normal(size=(2, 6)), rng.normal(size=2))
        out = spectral_downsample(cube, down)
        for i in range(3):
            for j in range(4):
                for k in range(2):
                    ref = sum(down.weight[k, c] * float(cube.data[i, j, c]) for c in range(6))
                    assert out[i, j, k] == pytest.approx(ref + down.bias[k], abs=1e-9)


def test_torch_matches_numpy(rng):
    net = EmbeddingNet(tiny_config()).double()
    with torch.no_grad():
        for p in net.se.parameters():
            p.copy_(torch.randn(p.shape, dtype=torch.float64))
    cube = random_cube(rng, 5, 5, 8)
    x = cubes_to_tensor([cube], torch.float64)
    s_ref = se_excite(se_squeeze(cube), net.se.params())
    s_torch = net.attention_weights(x)[0].detach().numpy()
    assert np.allclose(s_torch, s_ref, atol=1e-12)
    recal = se_recalibrate(cube, s_ref)
    down_ref = spectral_downsample(recal, net.down_params())
    down_torch = net.down(net.se(x))[0].detach().numpy().transpose(1, 2, 0)
    assert np.allclose(down_torch, down_ref, atol=1e-5)


def test_avg_squeeze_mode(rng):
    net = EmbeddingNet(tiny_config(squeeze="avg")).double()
    cube = random_cube(rng, 4, 4, 8)
    got = net.se.squeeze(cubes_to_tensor([cube], torch.float64))[0].numpy()
    assert np.allclose(got, se_squeeze_avg_only(cube))


class TestEmbed:
    def test_default_parameter_count(self):
        assert EmbeddingNet(EmbedConfig(channels=32)).num_parameters() == 45029

    def test_attention_off_equals_bypass(self, rng):
        net = EmbeddingNet(tiny_config())
        cube = random_cube(rng, 6, 6, 8)
        x = cubes_to_tensor([cube])
        with torch.no_grad():
            bypass = net.head(net.blocks(torch.relu(net.stem(net.down(x)))).mean(dim=(2, 3)))
        assert np.allclose(embed(cube, net, False), bypass[0].numpy())
        # differs once attention is active
        assert not np.allclose(embed(cube, net, True), embed(cube, net, False))

    def test_zero_cube_zero_embedding(self):
        net = EmbeddingNet(tiny_config())
        out = embed(HyperCube(np.zeros((6, 6, 8), np.float32)), net)
        assert np.all(out == 0)

    def test_batch_matches_loop(self, rng):
        net = EmbeddingNet(tiny_config())
        cubes = [random_cube(rng, 6, 6, 8) for _ in range(7)]
        batch = embed_batch(cubes, net, batch_size=3)
        loop = np.stack([embed(c, net) for c in cubes])
        assert np.max(np.abs(batch - loop)) <= 1e-6
        perm = [3, 0, 6, 1, 5, 2, 4]
        assert np.allclose(embed_batch([cubes[i] for i in perm], net), batch[perm], atol=1e-6)

    def test_mixed_spatial_sizes(self, rng):
        net = EmbeddingNet(tiny_config())
        cubes = [random_cube(rng, 6, 6, 8), random_cube(rng, 4, 5, 8)]
        assert embed_batch(cubes, net).shape == (2, 5)

    def test_channel_mismatch(self, rng):
        net = EmbeddingNet(tiny_config())
        with pytest.raises(ValueError):
            embed(random_cube(rng, 4, 4, 7), net)
        with pytest.raises(ValueError):
            embed_batch([random_cube(rng, 4, 4, 8), random_cube(rng, 4, 4, 7)], net)

    def test_seeded_init(self):
        a, b = EmbeddingNet(tiny_config()), EmbeddingNet(tiny_config())
        assert a.digest() == b.digest()
        assert EmbeddingNet(tiny_config(seed=4)).digest() != a.digest()


class TestGradient:
    def test_constant_loss(self):
        net = EmbeddingNet(tiny_config())
        grads = gradient(lambda p, b: torch.tensor(3.0), net, None)
        assert all(not g.any() for g in grads.values())

    def test_quadratic(self):
        net = EmbeddingNet(tiny_config())

        def half_norm(p, _):
            return sum((w ** 2).sum() for w in p.parameters()) / 2

        grads = gradient(half_norm, net, None)
        for name, p in net.named_parameters():
            assert torch.equal(grads[name], p.detach())

    def test_non_finite(self):
        net = EmbeddingNet(tiny_config())
        with pytest.raises(TrainingError):
            gradient(lambda p, b: next(p.parameters()).sum() * float("inf"), net, None)

    def test_finite_differences(self, rng):
        net = EmbeddingNet(tiny_config()).double()
        assert net.num_parameters() <= 5000
        with torch.no_grad():
            for p in net.parameters():
                p.add_(0.05 * torch.randn(p.shape, dtype=torch.float64))
        x = cubes_to_tensor([random_cube(rng, 6, 6, 8) for _ in range(2)], torch.float64)

        def loss_fn(p, batch):
            return (p(batch) ** 2).sum()

        grads = gradient(loss_fn, net, x)
        h = 1e-6
        for name in ("se.fc1.weight", "se.fc2.bias", "down.weight", "head.weight"):
            param = dict(net.named_parameters())[name]
            flat = param.data.view(-1)
            for idx in range(0, flat.numel(), max(1, flat.numel() // 5)):
                orig = flat[idx].item()
                with torch.no_grad():
                    flat[idx] = orig + h
                    up = loss_fn(net, x).item()
                    flat[idx] = orig - h
                    dn = loss_fn(net, x).item()
                    flat[idx] = orig
                fd = (up - dn) / (2 * h)
                assert abs(fd - grads[name].view(-1)[idx].item()) <= 1e-4 * max(1, abs(fd))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        net = EmbeddingNet(tiny_config())
        digest = save_checkpoint(net, tmp_path / "c.npz")
        back = load_checkpoint(tmp_path / "c.npz", expected_digest=digest)
        cube = random_cube(rng, 5, 5, 8)
        assert np.array_equal(embed(cube, net), embed(cube, back))
        assert back.config == net.config

    def test_expected_digest(self, tmp_path):
        save_checkpoint(EmbeddingNet(tiny_config()), tmp_path / "c.npz")
        with pytest.raises(CompatibilityError):
            load_checkpoint(tmp_path / "c.npz", expected_digest="0" * 64)

    def test_tampered_weights(self, tmp_path):
        path = tmp_path / "c.npz"
        save_checkpoint(EmbeddingNet(tiny_config()), path)
        with np.load(path) as npz:
            content = {k: npz[k] for k in npz.files}
        content["t:head.bias"] = content["t:head.bias"] + 1
        np.savez(path, **content)
        with pytest.raises(CompatibilityError):
            load_checkpoint(path)


def test_config_validation():
    with pytest.raises(ValueError):
        EmbedConfig(channels=0)
    with pytest.raises(ValueError):
        EmbedConfig(channels=4, squeeze="max")
    assert EmbedConfig(channels=8, reduction=16).reduced == 1
