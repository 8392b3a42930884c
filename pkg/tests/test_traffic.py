import numpy as np
import pytest
from statsmodels.tsa.stattools import acf as sm_acf

from strl.config import make_config
from strl.traffic import (
    ArrivalSeries,
    TraceFormatError,
    TraceValidationError,
    acf,
    ingest_trace,
    is_stationary,
    synthesize_arrivals,
    write_trace,
)


def test_ingest_900_rows():
    text = "timestamp,count\n" + "".join(f"{t},{t % 7}\n" for t in range(1000, 1900))
    series = ingest_trace(text)
    assert len(series) == 900
    assert series.start_time == 1000


def test_ingest_single_row():
    assert ingest_trace("0,5\n").rates.tolist() == [5.0]


def test_ingest_fills_gaps_and_sums_duplicates():
    assert ingest_trace("0,4\n2,1\n").rates.tolist() == [4.0, 0.0, 1.0]
    assert ingest_trace("0,4\n0,1\n").rates.tolist() == [5.0]


@pytest.mark.parametrize("text,err", [
    ("0,1,2\n", TraceFormatError),
    ("x,1\n", TraceFormatError),
    ("0,-1\n", TraceValidationError),
    ("3,1\n1,1\n", TraceValidationError),
    ("timestamp,count\n", TraceValidationError),
])
def test_ingest_errors(text, err):
    with pytest.raises(err):
        ingest_trace(text)


def test_trace_round_trip():
    series = ingest_trace("5,1\n6,2.5\n8,3\n")
    again = ingest_trace(write_trace(series))
    assert np.array_equal(again.rates, series.rates)
    assert again.start_time == 5


def test_series_is_read_only_and_wraps():
    s = ArrivalSeries([1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        s.rates[0] = 9
    assert s.at(4) == 2.0


def test_constant_series_without_noise():
    s = synthesize_arrivals(100.0, [], 0.0, length=20, seed=3)
    assert np.all(s.rates == 100.0)


def test_synthesis_is_deterministic():
    a = synthesize_arrivals(1000.0, [0.5, 0.2], 50.0, length=300, seed=4)
    b = synthesize_arrivals(1000.0, [0.5, 0.2], 50.0, length=300, seed=4)
    assert np.array_equal(a.rates, b.rates)


def test_nonstationary_rejected():
    assert not is_stationary([1.0])
    assert not is_stationary([0.6, 0.5])
    assert is_stationary([0.5, 0.3])
    with pytest.raises(TraceValidationError):
        synthesize_arrivals(100.0, [1.01], 1.0)


def test_ar1_acf_matches_closed_form():
    s = synthesize_arrivals(1e5, [0.9], 100.0, length=50_000, seed=0)
    coeffs = acf(s, 10).coefficients
    for k in range(11):
        assert abs(coeffs[k] - 0.9 ** k) <= 0.05


def test_acf_matches_statsmodels():
    rng = np.random.default_rng(8)
    for _ in range(20):
        x = np.cumsum(rng.normal(size=rng.integers(50, 500))) + 10
        ours = acf(ArrivalSeries(np.abs(x)), 20).coefficients
        theirs = sm_acf(np.abs(x), nlags=20, fft=False)
        np.testing.assert_allclose(ours, theirs, atol=1e-12)


def test_acf_shift_and_scale_invariant():
    x = np.random.default_rng(1).random(400)
    base = acf(x, 15).coefficients
    np.testing.assert_allclose(acf(3.0 * x + 7.0, 15).coefficients, base, atol=1e-12)


def test_white_noise_stays_in_band():
    x = np.random.default_rng(0).normal(size=10_000)
    res = acf(x, 40)
    inside = np.abs(res.coefficients[1:]) < res.ci_halfwidth
    assert inside.mean() >= 0.95


def test_alternating_series_is_anticorrelated():
    x = np.tile([1.0, -1.0], 500) + 1e-9 * np.random.default_rng(2).random(1000)
    assert acf(x, 1).coefficients[1] == pytest.approx(-1.0, abs=0.01)


def test_acf_argument_errors():
    with pytest.raises(ValueError):
        acf(np.arange(5.0), 5)
    with pytest.raises(ValueError):
        acf(np.arange(5.0), 0)
    with pytest.raises(TraceValidationError):
        acf(np.ones(50), 3)


def test_acf_csv_schema():
    text = acf(np.random.default_rng(0).random(100), 40).to_csv()
    lines = text.splitlines()
    assert lines[0] == "lag,coefficient,ci_halfwidth"
    assert len(lines) == 42
    assert float(lines[1].split(",")[1]) == 1.0


def test_default_generator_is_long_memory():
    cfg = make_config()
    s = synthesize_arrivals(cfg.P, cfg.synth_ar, cfg.synth_noise_sd * cfg.P, cfg.synth_length, seed=0)
    assert len(s) >= 5000
    res = acf(s, 40)
    assert np.all(res.coefficients[1:] > res.ci_halfwidth)
