import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from adaptok.codec import deserialize
from adaptok.estimator import AdaptiveTokenizer, detokenize, tokenize
from adaptok.exceptions import BudgetTooSmallError, ValidationError
from adaptok.fsq import FsqConfig
from adaptok.source import make_dataset

TRAIN = make_dataset(600, seed=5).values
TEST = make_dataset(40, seed=6).values


@pytest.fixture(scope="module")
def fitted():
    return AdaptiveTokenizer(steps=300, seed=1).fit(TRAIN)


def test_params_and_clone():
    est = AdaptiveTokenizer(steps=10, beta=4.0)
    assert est.get_params()["beta"] == 4.0
    other = clone(est).set_params(beta=6.0)
    assert other.beta == 6.0 and est.beta == 4.0


def test_not_fitted():
    with pytest.raises(NotFittedError):
        AdaptiveTokenizer().transform(TEST)


def test_transform_shape_and_padding(fitted):
    z = fitted.transform(TEST)
    assert z.shape == (40, 16) and z.dtype == np.int64
    kept = z >= 0
    assert np.array_equal(kept.sum(axis=1), fitted.route_lengths(TEST))
    assert np.all(z[kept] < FsqConfig().codebook_size)


def test_inverse_matches_internal_recon(fitted):
    z = fitted.transform(TEST)
    recon = fitted.inverse_transform(z)
    assert recon.shape == TEST.shape
    assert fitted.score(TEST) == pytest.approx(-np.mean((recon - TEST) ** 2), rel=1e-12)


def test_budget_parameter(fitted):
    short = clone(fitted).set_params(bpp16=0.3125)
    short.params_, short.router_state_ = fitted.params_, fitted.router_state_
    assert short.route_lengths(TEST).mean() < fitted.route_lengths(TEST).mean()
    short.set_params(bpp16=0.0625)
    with pytest.raises(BudgetTooSmallError):
        short.transform(TEST)


def test_input_validation(fitted):
    with pytest.raises(ValueError):
        fitted.transform(np.zeros((3, 10)))
    with pytest.raises(ValueError):
        fitted.inverse_transform(np.full((2, 16), -1))


def test_pipeline_compatible(fitted):
    pipe = make_pipeline(AdaptiveTokenizer(steps=50, seed=0))
    assert pipe.fit(TRAIN[:200]).transform(TEST).shape == (40, 16)


def test_streams_roundtrip(fitted):
    tok = tokenize(fitted.params_, fitted.router_state_, TEST, beta=8.0)
    streams = tok.streams(fitted.params_)
    assert [deserialize(s).mask.n_x for s in streams] == tok.n_x.tolist()
    assert np.array_equal(detokenize(fitted.params_, streams), tok.recon)


def test_stream_config_mismatch(fitted):
    tok = tokenize(fitted.params_, fitted.router_state_, TEST[:1], beta=8.0)
    data = bytearray(tok.streams(fitted.params_)[0])
    data[10] = 7   # first FSQ level
    with pytest.raises(ValidationError):
        detokenize(fitted.params_, [bytes(data)])
