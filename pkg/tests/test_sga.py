import math
import warnings

import pytest
import torch

from stdplm.errors import ShapeError
from stdplm.sga import SandglassAttention, scaled_dot_attention

from conftest import assert_layer_normalized


def test_single_key_attention():
    out, w = scaled_dot_attention(torch.tensor([[1.0]]), torch.tensor([[1.0]]), torch.tensor([[1.0]]))
    assert w.item() == 1.0 and out.item() == 1.0


def test_equal_keys_average_values():
    k = torch.tensor([[0.3, -1.0], [0.3, -1.0]])
    v = torch.tensor([[2.0, 0.0], [4.0, 1.0]])
    out, _ = scaled_dot_attention(torch.tensor([[1.0, 2.0]]), k, v)
    torch.testing.assert_close(out, torch.tensor([[3.0, 0.5]]))


def test_two_key_softmax_oracle():
    q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    k = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    v = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    out, w = scaled_dot_attention(q, k, v)
    a, b = math.exp(1 / math.sqrt(2)), math.exp(0.0)
    assert w[0, 0].item() == pytest.approx(a / (a + b), abs=1e-12)
    assert round(w[0, 0].item(), 4) == 0.6698 and round(w[0, 1].item(), 4) == 0.3302
    assert out.item() == pytest.approx(0.6698, abs=5e-5)


def test_key_width_mismatch():
    with pytest.raises(ShapeError):
        scaled_dot_attention(torch.ones(1, 2), torch.ones(3, 4), torch.ones(3, 1))


def test_precode_uniform_on_identical_tokens():
    torch.manual_seed(0)
    sga = SandglassAttention(4, 16, 8)
    z = torch.randn(1, 16).expand(7, 16)
    _, s = sga.precode(z)
    torch.testing.assert_close(s, torch.full((4, 7), 1 / 7))


def test_precode_single_node():
    sga = SandglassAttention(3, 16, 8)
    _, s = sga.precode(torch.randn(1, 16))
    torch.testing.assert_close(s, torch.ones(3, 1))


def test_precode_full_size_row_stochastic():
    torch.manual_seed(0)
    sga = SandglassAttention(128, 768, 128)
    z_s = torch.randn(170, 768)
    z_h, s = sga.precode(z_s)
    assert z_h.shape == (128, 768) and s.shape == (128, 170)
    assert torch.max(torch.abs(s.double().sum(-1) - 1)).item() <= 1e-6
    assert s.min() >= 0 and s.max() <= 1
    assert_layer_normalized(sga.precoder.norm, lambda: sga.precode(z_s))
    assert_layer_normalized(sga.decoder.norm, lambda: sga.decode(z_s, z_h))


def test_decode_single_region():
    torch.manual_seed(0)
    sga = SandglassAttention(1, 16, 8)
    z_s, z_h_out = torch.randn(5, 16), torch.randn(1, 16)
    out = sga.decode(z_s, z_h_out)
    expected = torch.nn.functional.layer_norm(z_h_out, (16,)).expand(5, 16)
    torch.testing.assert_close(out, expected)


@pytest.mark.parametrize("n", [1, 9, 40])
def test_decode_shape(n):
    sga = SandglassAttention(4, 16, 8)
    assert sga.decode(torch.randn(2, n, 16), torch.randn(2, 4, 16)).shape == (2, n, 16)


def test_decode_permutation_equivariant():
    torch.manual_seed(0)
    sga = SandglassAttention(4, 16, 8)
    z_s, z_h_out = torch.randn(9, 16), torch.randn(4, 16)
    perm = torch.randperm(9)
    torch.testing.assert_close(sga.decode(z_s[perm], z_h_out), sga.decode(z_s, z_h_out)[perm])


def test_multi_head_weights_stay_stochastic():
    torch.manual_seed(0)
    sga = SandglassAttention(4, 16, 8, n_heads=2)
    z_h, s = sga.precode(torch.randn(3, 10, 16))
    assert z_h.shape == (3, 4, 16)
    torch.testing.assert_close(s.sum(-1), torch.ones(3, 4))


def test_warns_when_regions_not_fewer_than_nodes():
    sga = SandglassAttention(8, 16, 8)
    with pytest.warns(UserWarning):
        sga.check_graph_size(5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        sga.check_graph_size(20)


def test_queries_receive_gradient():
    torch.manual_seed(0)
    sga = SandglassAttention(4, 16, 8)
    opt = torch.optim.SGD(sga.parameters(), lr=0.1)
    before = sga.queries.detach().clone()
    z_s = torch.randn(10, 16)
    z_h, _ = sga.precode(z_s)
    loss = sga.decode(z_s, z_h * 2).pow(2).sum() + z_h[:, 0].sum()
    loss.backward()
    opt.step()
    assert not torch.equal(before, sga.queries.detach())
