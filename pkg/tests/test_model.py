import pytest
import torch

from draglora.errors import ConfigError
from draglora.lora import init_adapter
from draglora.model import (FeatureMap, ToyUNet, ToyUNetConfig, extract_features,
                            predict_noise, sample_feature)

from conftest import TINY


def fd_grad(f, x, i, h=1e-3):
    """Central finite difference of scalar f at flat index i of tensor x."""
    flat = x.reshape(-1)
    orig = float(flat[i])
    flat[i] = orig + h
    hi = f()
    flat[i] = orig - h
    lo = f()
    flat[i] = orig
    return (hi - lo) / (2 * h)


class TestForward:
    def test_deterministic(self, tiny_model):
        z = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(1))
        a = predict_noise(tiny_model, None, z, 40, cond=1)
        b = predict_noise(tiny_model, None, z, 40, cond=1)
        assert torch.equal(a, b)

    def test_zero_delta_adapter_is_bit_identical(self, tiny_model):
        z = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(2))
        adapter = init_adapter(tiny_model, rank=4, seed=0)
        base = predict_noise(tiny_model, None, z, 10, cond=0)
        with_lora = predict_noise(tiny_model, adapter, z, 10, cond=0)
        assert torch.equal(base, with_lora)

    def test_finite_outputs(self, tiny_model):
        z = torch.randn(3, 16, 16)
        out = predict_noise(tiny_model, None, z, 999, cond=2)
        assert torch.isfinite(out).all()
        assert out.shape == z.shape

    def test_param_count_deterministic(self, tiny_model):
        torch.manual_seed(0)
        again = ToyUNet(TINY)
        assert tiny_model.param_count() == again.param_count() > 0

    def test_layer_ids_unique_and_stable(self, tiny_model):
        shapes = tiny_model.lora_layer_shapes()
        # attention at encoder level 1, mid, decoder level 1: 3 blocks x q/k/v/out
        assert len(shapes) == 12
        assert "mid.attn.q" in shapes and "enc.1.attn.out" in shapes
        assert "dec.1.attn.v" in shapes

    def test_channel_width_validation(self):
        with pytest.raises(ConfigError):
            ToyUNetConfig(base_width=6).validate()


class TestGradients:
    def test_lora_entry_gradient_matches_finite_difference(self, tiny_model):
        model = tiny_model.double()
        adapter = init_adapter(tiny_model, rank=2, seed=3).to_dtype(torch.float64)
        # put nonzero values into B so its gradient path is exercised
        gen = torch.Generator().manual_seed(4)
        for pair in adapter.layers.values():
            pair.B = torch.randn(pair.B.shape, generator=gen, dtype=torch.float64) * 0.05
        z = torch.randn(3, 16, 16, generator=gen, dtype=torch.float64)
        probe = torch.randn(3, 16, 16, generator=gen, dtype=torch.float64)

        def scalar():
            out = predict_noise(model, adapter, z, 123, cond=0)
            return float((out * probe).sum())

        adapter.requires_grad_(True)
        out = predict_noise(model, adapter, z, 123, cond=0)
        loss = (out * probe).sum()
        grads = torch.autograd.grad(loss, adapter.tensors())
        named = dict(zip([n for n, _ in adapter.tensor_items()], grads))

        checked = 0
        gen2 = torch.Generator().manual_seed(5)
        for name, tensor in adapter.tensor_items():
            for _ in range(3):
                i = int(torch.randint(0, tensor.numel(), (1,), generator=gen2))
                with torch.no_grad():
                    num = fd_grad(scalar, tensor, i)
                ana = float(named[name].reshape(-1)[i])
                assert ana == pytest.approx(num, rel=1e-3, abs=1e-7), name
                checked += 1
        assert checked >= 24

    def test_feature_gradient_wrt_z_matches_finite_difference(self, tiny_model):
        model = tiny_model.double()
        gen = torch.Generator().manual_seed(6)
        z = torch.randn(3, 16, 16, generator=gen, dtype=torch.float64)
        probe = None

        def scalar():
            fmap = extract_features(model, None, z, 77, cond=1)
            return float((fmap.data * probe).sum())

        zg = z.clone().requires_grad_(True)
        fmap = extract_features(model, None, zg, 77, cond=1)
        probe = torch.randn(fmap.data.shape, generator=gen, dtype=torch.float64)
        loss = (fmap.data * probe).sum()
        (grad,) = torch.autograd.grad(loss, zg)

        gen2 = torch.Generator().manual_seed(7)
        for _ in range(8):
            i = int(torch.randint(0, z.numel(), (1,), generator=gen2))
            with torch.no_grad():
                num = fd_grad(scalar, z, i)
            ana = float(grad.reshape(-1)[i])
            assert ana == pytest.approx(num, rel=1e-3, abs=1e-7)


class TestFeatures:
    def test_identical_inputs_identical_features(self, tiny_model):
        z = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(8))
        a = extract_features(tiny_model, None, z, 40, cond=0)
        b = extract_features(tiny_model, None, z, 40, cond=0)
        assert torch.equal(a.data, b.data)
        assert a.data.shape[-2:] == z.shape[-2:]

    def test_receptive_field_locality(self, local_model):
        # conv-only single-level config: far-away perturbations cannot reach
        gen = torch.Generator().manual_seed(9)
        z = torch.randn(3, 32, 32, generator=gen)
        base = extract_features(local_model, None, z, 10, cond=0).data
        z2 = z.clone()
        z2[:, 31, 31] += 10.0
        far = extract_features(local_model, None, z2, 10, cond=0).data
        assert torch.equal(base[:, 0, 0], far[:, 0, 0])
        assert not torch.equal(base[:, 31, 31], far[:, 31, 31])


class TestSampleFeature:
    def test_integer_point_r0_exact_grid_value(self):
        data = torch.arange(2 * 4 * 5, dtype=torch.float32).reshape(2, 4, 5)
        fmap = FeatureMap(data, "test", 0)
        got = sample_feature(fmap, (3.0, 2.0), r1=0)
        assert torch.equal(got, data[:, 2, 3])

    def test_midpoint_on_constant_field(self):
        fmap = FeatureMap(torch.full((3, 6, 6), 2.5), "test", 0)
        got = sample_feature(fmap, (2.5, 3.0), r1=0)
        assert torch.allclose(got, torch.full((3,), 2.5))

    def test_bilinear_reproduces_linear_ramp(self):
        # bilinear interpolation is exact on fields linear in x and y
        xs = torch.arange(8, dtype=torch.float32)
        ys = torch.arange(8, dtype=torch.float32)
        ramp = (2.0 * xs[None, :] + 3.0 * ys[:, None] + 1.0).unsqueeze(0)
        fmap = FeatureMap(ramp, "test", 0)
        got = sample_feature(fmap, (1.25, 2.5), r1=0)
        expected = 2.0 * 1.25 + 3.0 * 2.5 + 1.0
        assert got.item() == pytest.approx(expected, abs=1e-6)

    def test_patch_layout_and_size(self):
        data = torch.randn(4, 8, 8)
        fmap = FeatureMap(data, "test", 0)
        got = sample_feature(fmap, (3.0, 3.0), r1=1)
        assert got.shape == (9 * 4,)
        # row-major offsets: first block is (dy=-1, dx=-1)
        assert torch.allclose(got[:4], data[:, 2, 2])
        assert torch.allclose(got[-4:], data[:, 4, 4])

    def test_out_of_range_clamps(self):
        data = torch.randn(2, 4, 4)
        fmap = FeatureMap(data, "test", 0)
        got = sample_feature(fmap, (-5.0, 99.0), r1=0)
        assert torch.allclose(got, data[:, 3, 0])

    def test_differentiable_wrt_feature_data(self):
        data = torch.randn(2, 5, 5, requires_grad=True)
        fmap = FeatureMap(data, "test", 0)
        out = sample_feature(fmap, (1.3, 2.7), r1=1).sum()
        (g,) = torch.autograd.grad(out, data)
        assert torch.isfinite(g).all() and float(g.abs().sum()) > 0
