"""Per-second packet arrival series: trace ingestion, AR synthesis and ACF."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal, stats


class TraceFormatError(ValueError):
    pass


class TraceValidationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ArrivalSeries:
    """Packets per second, one entry per one-second step."""

    rates: np.ndarray
    start_time: int | None = None

    def __post_init__(self) -> None:
        rates = np.asarray(self.rates, dtype=float)
        if rates.ndim != 1 or rates.size < 1:
            raise TraceValidationError("arrival series must be a non-empty 1-D sequence")
        if np.any(rates < 0) or not np.all(np.isfinite(rates)):
            raise TraceValidationError("arrival rates must be finite and non-negative")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    def __len__(self) -> int:
        return self.rates.size

    def __getitem__(self, t: int) -> float:
        return float(self.rates[t])

    def at(self, t: int) -> float:
        """Rate at step ``t``, wrapping around the end of the series."""
        return float(self.rates[t % self.rates.size])

    def mean(self) -> float:
        return float(self.rates.mean())


@dataclass(frozen=True)
class AcfResult:
    coefficients: np.ndarray
    ci_halfwidth: float
    n: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lag", "coefficient", "ci_halfwidth"])
        for lag, c in enumerate(self.coefficients):
            w.writerow([lag, repr(float(c)), repr(self.ci_halfwidth)])
        return buf.getvalue()


def ingest_trace(source: str | Path) -> ArrivalSeries:
    """Read a ``timestamp,count`` CSV into a gap-filled per-second series."""
    text = Path(source).read_text(encoding="utf-8") if isinstance(source, Path) else source
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if rows and rows[0][0].strip().lower() == "timestamp":
        rows = rows[1:]
    if not rows:
        raise TraceValidationError("trace contains no data rows")
    times, counts = [], []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != 2:
            raise TraceFormatError(f"row {lineno}: expected 'timestamp,count'")
        try:
            t = int(row[0])
            c = float(row[1])
        except ValueError:
            raise TraceFormatError(f"row {lineno}: non-numeric field in {row!r}") from None
        if c < 0:
            raise TraceValidationError(f"row {lineno}: negative count {c}")
        if times and t < times[-1]:
            raise TraceValidationError(f"row {lineno}: timestamps must be nondecreasing")
        times.append(t)
        counts.append(c)
    t0 = times[0]
    rates = np.zeros(times[-1] - t0 + 1)
    np.add.at(rates, np.asarray(times) - t0, counts)
    return ArrivalSeries(rates, start_time=t0)


def write_trace(series: ArrivalSeries) -> str:
    t0 = series.start_time or 0
    lines = ["timestamp,count"] + [f"{t0 + t},{r:g}" for t, r in enumerate(series.rates)]
    return "\n".join(lines) + "\n"


def is_stationary(ar_coefficients) -> bool:
    """All roots of 1 - sum(phi_i z^i) lie strictly outside the unit circle."""
    phi = np.asarray(ar_coefficients, dtype=float)
    if phi.size == 0 or not np.any(phi):
        return True
    # reversed polynomial: z^p - phi_1 z^(p-1) - ... - phi_p has roots 1/z
    roots = np.roots(np.concatenate(([1.0], -phi)))
    return bool(np.all(np.abs(roots) < 1.0))


def synthesize_arrivals(
    base_rate: float,
    ar_coefficients=(),
    noise_sd: float = 0.0,
    length: int = 900,
    seed: int = 0,
) -> ArrivalSeries:
    """AR(p) fluctuations around ``base_rate`` driven by truncated Gaussian noise.

    Innovations are N(0, noise_sd^2) truncated at +-3 sd.  A burn-in of
    ``20 / (1 - max|root|)`` samples is discarded so the returned series
    starts close to stationarity.  Negative rates are clamped to zero.
    """
    if length < 1:
        raise TraceValidationError("length must be >= 1")
    if base_rate <= 0:
        raise TraceValidationError("base_rate must be positive")
    if noise_sd < 0:
        raise TraceValidationError("noise_sd must be non-negative")
    phi = np.asarray(ar_coefficients, dtype=float)
    if not is_stationary(phi):
        raise TraceValidationError(f"AR coefficients {phi.tolist()} are not stationary")
    burn = 0
    if phi.size and np.any(phi):
        radius = float(np.max(np.abs(np.roots(np.concatenate(([1.0], -phi))))))
        burn = int(np.ceil(20.0 / (1.0 - radius)))
    rng = np.random.default_rng(seed)
    if noise_sd > 0:
        eps = stats.truncnorm.rvs(-3.0, 3.0, scale=noise_sd, size=length + burn, random_state=rng)
    else:
        eps = np.zeros(length + burn)
    x = signal.lfilter([1.0], np.concatenate(([1.0], -phi)), eps) if phi.size else eps
    rates = np.maximum(base_rate + x[burn:], 0.0)
    return ArrivalSeries(rates)


def acf(series: ArrivalSeries | np.ndarray, max_lag: int) -> AcfResult:
    """Biased sample autocorrelation for lags ``0..max_lag``."""
    x = np.asarray(series.rates if isinstance(series, ArrivalSeries) else series, dtype=float)
    n = x.size
    if not 1 <= max_lag < n:
        raise ValueError(f"need 1 <= max_lag < len(series); got max_lag={max_lag}, n={n}")
    xc = x - x.mean()
    c0 = float(np.dot(xc, xc))
    if c0 <= 0.0 or c0 <= 1e-24 * n * max(1.0, float(np.max(np.abs(x)))) ** 2:
        raise TraceValidationError("series has zero variance")
    coeffs = np.empty(max_lag + 1)
    coeffs[0] = 1.0
    for k in range(1, max_lag + 1):
        coeffs[k] = np.dot(xc[:-k], xc[k:]) / c0
    return AcfResult(np.clip(coeffs, -1.0, 1.0), 1.96 / np.sqrt(n), n)
