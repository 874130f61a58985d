import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from wavereprog.errors import ConfigError, DimensionError
from wavereprog.output_transform import OutputTransform, output_transform, recombine, token_fc

from oracles import central_differences, output_transform_loop, relative_error


def _random_transform(size, n_mlp=2, seed=0, dtype=torch.float64, gate_source="fused"):
    t = OutputTransform(size, n_mlp, gate_source=gate_source,
                        generator=torch.Generator().manual_seed(seed)).to(dtype)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in t.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=dtype) * 0.7)
    return t


def _params_as_numpy(t):
    def a(p):
        return p.detach().numpy()
    return {
        "fuse_w": a(t.fuse_fc.weight), "fuse_b": a(t.fuse_fc.bias),
        "agg_w": a(t.aggregate_fc.weight), "agg_b": a(t.aggregate_fc.bias),
        "gate_w": a(t.gate_fc.weight), "gate_b": a(t.gate_fc.bias),
        "tokens": [(a(m.fc1.weight), a(m.fc2.weight)) for m in t.mlps],
    }


def test_token_fc_cases(rng):
    x = torch.tensor(rng.normal(size=(3, 8, 8)))
    assert torch.equal(token_fc(x, torch.ones(3, 8, 8, dtype=x.dtype)), x)
    assert torch.equal(token_fc(x, torch.zeros(3, 8, 8, dtype=x.dtype)), torch.zeros_like(x))
    w = rng.normal(size=(3, 8, 8))
    expected = np.empty_like(w)
    for c in range(3):
        for i in range(8):
            for j in range(8):
                expected[c, i, j] = w[c, i, j] * x[c, i, j].item()
    np.testing.assert_allclose(token_fc(x, torch.tensor(w)).numpy(), expected, atol=1e-7)
    with pytest.raises(DimensionError, match="tile"):
        token_fc(torch.rand(3, 8, 9), torch.ones(3, 8, 8))


def test_recombine(rng):
    r = torch.tensor(rng.normal(size=(3, 4, 4)))
    assert torch.equal(recombine(r, torch.zeros_like(r)), r)
    assert torch.equal(recombine(r, -r), torch.zeros_like(r))
    i = torch.tensor(rng.normal(size=(3, 4, 4)))
    np.testing.assert_allclose(recombine(r, i).numpy(), r.numpy() + i.numpy())
    with pytest.raises(DimensionError):
        recombine(r, torch.zeros(3, 4, 5))


@pytest.mark.parametrize("clamp", [True, False])
def test_matches_staged_scalar_oracle(rng, clamp):
    t = _random_transform(8)
    r, i = (torch.tensor(rng.normal(size=(3, 8, 8))) for _ in range(2))
    x = torch.tensor(rng.random((3, 8, 8)))
    with torch.no_grad():
        got = output_transform(r[None], i[None], x[None], t, clamp=clamp)[0]
    expected = output_transform_loop(r.numpy(), i.numpy(), x.numpy(), _params_as_numpy(t), clamp)
    np.testing.assert_allclose(got.numpy(), expected, atol=1e-5)


def test_gate_closed_passes_input_through_exactly(rng):
    t = _random_transform(8, dtype=torch.float32)
    with torch.no_grad():
        t.gate_fc.weight.zero_()
        t.gate_fc.bias.fill_(-20.0)
    x = torch.rand(1, 3, 8, 8)
    r, i = torch.randn(1, 3, 8, 8), torch.randn(1, 3, 8, 8)
    with torch.no_grad():
        out = t(r, i, x)
    # the gate is ~2e-9, well under one 8-bit level
    assert torch.equal(torch.round(out * 255), torch.round(x * 255))
    assert (out - x).abs().max() < 1e-6


def test_gate_open_gives_clamped_fused():
    t = _random_transform(4)
    with torch.no_grad():
        t.gate_fc.weight.zero_()
        t.gate_fc.bias.fill_(20.0)
    r, i = torch.randn(1, 3, 4, 4, dtype=torch.float64), torch.randn(1, 3, 4, 4, dtype=torch.float64)
    x = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    stacked = torch.cat([r, i, r + i], dim=1)
    fused = torch.einsum("oc,bchw->bohw", t.fuse_fc.weight, stacked) + t.fuse_fc.bias[:, None, None]
    with torch.no_grad():
        assert torch.allclose(t(r, i, x), fused.clamp(0, 1), atol=1e-8)


@pytest.mark.parametrize("n_mlp", [1, 2, 4])
def test_mlp_counts_run(n_mlp):
    t = OutputTransform(6, n_mlp)
    assert t.n_mlp == n_mlp
    out = t(torch.rand(2, 3, 6, 6), torch.rand(2, 3, 6, 6), torch.rand(2, 3, 6, 6))
    assert out.shape == (2, 3, 6, 6)


def test_invalid_settings():
    with pytest.raises(ConfigError):
        OutputTransform(8, 0)
    with pytest.raises(ConfigError):
        OutputTransform(8, gate_source="input")


def test_stage_name_attached_to_errors():
    t = OutputTransform(8)
    with pytest.raises(DimensionError, match=r"output_transform\[mlp0\]"):
        t(torch.rand(1, 3, 6, 6), torch.rand(1, 3, 6, 6), torch.rand(1, 3, 6, 6))
    with pytest.raises(DimensionError, match=r"output_transform\[recombine\]"):
        t(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 7), torch.rand(1, 3, 8, 8))


def test_resized_tokens_run_on_other_sizes():
    t = OutputTransform(8)
    out = t(torch.rand(1, 3, 12, 10), torch.rand(1, 3, 12, 10), torch.rand(1, 3, 12, 10),
            resize_tokens=True)
    assert out.shape == (1, 3, 12, 10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from(["fused", "residual", "aggregate"]))
def test_convex_fusion_and_range(seed, gate_source):
    t = _random_transform(4, seed=seed, gate_source=gate_source)
    g = torch.Generator().manual_seed(seed)
    r = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64) * 3
    i = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64) * 3
    x = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
    stacked = torch.cat([r, i, r + i], dim=1)
    fused = torch.einsum("oc,bchw->bohw", t.fuse_fc.weight, stacked) + t.fuse_fc.bias[:, None, None]
    resid = fused + x
    agg = torch.einsum("oc,bchw->bohw", t.aggregate_fc.weight, resid) + t.aggregate_fc.bias[:, None, None]
    src = {"fused": fused, "residual": resid, "aggregate": agg}[gate_source]
    with torch.no_grad():
        raw = t(r, i, x, clamp=False)
        out = t(r, i, x)
    eps = 1e-6
    assert torch.all(raw >= torch.minimum(src, x) - eps)
    assert torch.all(raw <= torch.maximum(src, x) + eps)
    assert torch.all((out >= 0) & (out <= 1))


def test_gradients_match_finite_differences():
    t = _random_transform(4, seed=3)
    g = torch.Generator().manual_seed(9)
    r = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
    i = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
    x = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
    probe = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)

    def objective():
        return (t(r, i, x, clamp=False) * probe).sum()

    t.zero_grad()
    objective().backward()
    for name, p in t.named_parameters():
        numeric = central_differences(lambda: objective().item(), p)
        assert relative_error(p.grad, numeric) < 1e-3, name
