import pytest
import torch

from stdplm.config import ModelConfig
from stdplm.errors import GraphMismatchError
from stdplm.losses import total_loss
from stdplm.model import StdPlmModel
from stdplm.spectral import SensorGraph

from conftest import random_symmetric_adjacency


def make_model(config, n=6, seed=0):
    torch.manual_seed(seed)
    graph = SensorGraph.from_adjacency(random_symmetric_adjacency(n, p=0.5, seed=seed))
    return StdPlmModel(config, graph)


def inputs(config, n, b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, config.t_in, n, config.channels, generator=g)
    tod = torch.randint(0, 288, (b, 1), generator=g) + torch.arange(config.t_in)
    dow = torch.randint(0, 7, (b, config.t_in), generator=g)
    return x, tod % 288, dow


@pytest.mark.parametrize(
    "n,m,c",
    [(5, 4, 1), (17, 8, 3), (60, 16, 1), (150, 128, 3), (300, 32, 1)],
)
def test_shapes_and_token_order(n, m, c):
    config = ModelConfig(d_t=4, d_n=4, k=8, n_regions=m, d_hidden=8, d_plm=16, layers=1, channels=c,
                         backbone="scratch", backbone_heads=2)
    model = make_model(config, n)
    x, tod, dow = inputs(config, n)
    mask = (torch.rand_like(x) > 0.5).float()
    with torch.no_grad(), pytest.warns(UserWarning) if m >= n else _nullcontext():
        out = model(x, mask, tod, dow)
    assert out.spatial_tokens.shape == (2, n, 16)
    assert out.temporal_tokens.shape == (2, 2, 16)
    assert out.region_tokens.shape == (2, m, 16)
    assert out.attention.shape == (2, m, n)
    assert out.hidden.shape == (2, 2 + m, 16)
    assert out.y.shape == (2, n, 12 * c)
    assert model.unflatten(out.y).shape == (2, 12, n, c)
    assert out.token_roles[:3] == ["temporal-state", "temporal-trend", "region"]
    assert len(out.token_roles) == 2 + m
    assert torch.isfinite(out.y).all()


class _nullcontext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def test_unflatten_is_time_major():
    config = ModelConfig(d_t=4, d_n=4, k=4, n_regions=2, d_hidden=8, d_plm=16, layers=1, t_out=3, channels=2,
                         backbone="scratch", backbone_heads=2)
    model = make_model(config, 4)
    y = torch.arange(4 * 6.0).reshape(1, 4, 6)
    out = model.unflatten(y)
    # last axis of y is (t, c) with t outer
    assert out[0, 1, 2, 0].item() == y[0, 2, 2].item()
    assert out[0, 2, 3, 1].item() == y[0, 3, 5].item()


def test_hidden_split_is_exact(tiny_config):
    model = make_model(tiny_config)
    x, tod, dow = inputs(tiny_config, 6)
    with torch.no_grad():
        out = model(x, None, tod, dow)
        expected = model.backbone(torch.cat([out.temporal_tokens, out.region_tokens], dim=1))
    assert torch.equal(out.hidden, expected)


def test_zero_output_weights_give_bias(tiny_config):
    model = make_model(tiny_config)
    with torch.no_grad():
        model.output[-1].weight.zero_()
        model.output[-1].bias.copy_(torch.arange(4.0))
        out = model(*_forecast_args(tiny_config))
    torch.testing.assert_close(out.y, torch.arange(4.0).expand(2, 6, 4))


def _forecast_args(config, n=6):
    x, tod, dow = inputs(config, n)
    return x, None, tod, dow


def test_residual_path_when_backbone_and_decoder_vanish(tiny_config, monkeypatch):
    model = make_model(tiny_config)
    monkeypatch.setattr(model.backbone, "forward", lambda t: torch.zeros_like(t))
    monkeypatch.setattr(model.sga, "decode", lambda z_s, z_h: torch.zeros_like(z_s))
    with torch.no_grad():
        out = model(*_forecast_args(tiny_config))
        torch.testing.assert_close(out.y, model.output(out.spatial_tokens))


def test_forecast_mask_defaults_to_ones(tiny_config):
    model = make_model(tiny_config).eval()
    x, tod, dow = inputs(tiny_config, 6)
    with torch.no_grad():
        assert torch.equal(model(x, None, tod, dow).y, model(x, torch.ones_like(x), tod, dow).y)


def test_graph_mismatch(tiny_config):
    model = make_model(tiny_config)
    x, tod, dow = inputs(tiny_config, 7)
    with pytest.raises(GraphMismatchError):
        model(x, None, tod, dow)
    model.set_graph(SensorGraph.from_adjacency(random_symmetric_adjacency(7, seed=9)))
    assert model(x, None, tod, dow).y.shape == (2, 7, 4)


def test_attention_row_stochastic_during_training(tiny_config):
    model = make_model(tiny_config).train()
    out = model(*_forecast_args(tiny_config))
    s = out.attention.detach()
    assert torch.allclose(s.sum(-1), torch.ones(2, 3), atol=1e-6)
    assert s.min() >= 0 and s.max() <= 1


def test_parameter_report(tiny_config):
    report = make_model(tiny_config).parameter_report()
    assert report["trainable_parameters"] == report["parameters"]
    assert report["trainable_ratio_percent"] == 100.0


def test_config_is_frozen(tiny_config):
    with pytest.raises(Exception):
        tiny_config.d_plm = 8


def _model_loss(model, batch, graph_a, alpha):
    x, mask, tod, dow, target = batch
    out = model(x, mask, tod, dow)
    y = model.unflatten(out.y)
    return total_loss(y, target, torch.ones_like(target), out.attention, graph_a, alpha, lambda_c=0.1).total


def _relative_error(analytic, numeric):
    return (analytic - numeric).abs().max().item() / max(numeric.abs().max().item(), 1e-12)


@pytest.mark.parametrize("param_name", ["sga.queries", "spatial.dynamic.0.weight", "temporal.trend.2.bias"])
def test_full_model_gradient(param_name):
    config = ModelConfig(d_t=4, d_n=4, k=4, n_regions=3, d_hidden=8, d_plm=8, layers=1, t_in=4, t_out=4,
                         backbone="scratch", backbone_heads=2)
    model = make_model(config, n=6).double()
    x, tod, dow = inputs(config, 6)
    x = x.double()
    g = torch.Generator().manual_seed(1)
    mask = (torch.rand(x.shape, generator=g) > 0.3).double()
    target = torch.randn(2, 4, 6, 1, generator=g, dtype=torch.float64)
    batch = (x, mask, tod, dow, target)
    a, alpha = model.constraint_adjacency, model.dirichlet_alpha
    param = dict(model.named_parameters())[param_name]
    model.zero_grad()
    _model_loss(model, batch, a, alpha).backward()
    analytic = param.grad.detach().clone()
    numeric = torch.zeros_like(param)
    h = 1e-5
    flat = param.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = _model_loss(model, batch, a, alpha).item()
            flat[i] = orig - h
            down = _model_loss(model, batch, a, alpha).item()
            flat[i] = orig
            numeric.view(-1)[i] = (up - down) / (2 * h)
    assert _relative_error(analytic, numeric) < 1e-4
