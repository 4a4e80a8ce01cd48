import csv
import logging
from collections import namedtuple
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from src.core.errors import IndicatorFitError, QuadratureError
from src.core.geometry import Ball
from src.data.obstacle import ObstacleShape
from src.models.potentials import (
    SurfaceQuadrature,
    ball_ball_integral,
    j_boundary_sweep,
)
from src.models.wavesim import LaplaceField

logger = logging.getLogger(__name__)

MIN_FIT_SAMPLES = 8
PLATEAU_VARIATION = 0.02
DIVERGENCE_DRIFT = np.log(1.1)
# float64 units in the last place lost to the reference subtraction
CANCELLATION_ULPS = 64
CSV_COLUMNS = ["tau", "log_indicator", "sign", "source"]

JointLimit = namedtuple("JointLimit", ["log_limit", "kappa", "residual", "taus"])


def default_tau_grid(tau_min: float = 4.0, tau_max: float = 40.0, count: int = 24) -> np.ndarray:
    return np.geomspace(tau_min, tau_max, count)


@dataclass
class IndicatorCurve:
    """I(tau) kept as (log |I|, sign) so that e^{-tau c} never underflows."""

    taus: np.ndarray
    log_values: np.ndarray
    signs: np.ndarray
    source: str
    geometry: dict = field(default_factory=dict)

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=np.float64)
        self.log_values = np.asarray(self.log_values, dtype=np.float64)
        self.signs = np.asarray(self.signs, dtype=np.float64)
        assert self.taus.shape == self.log_values.shape == self.signs.shape, (
            f"mismatched curve arrays {self.taus.shape}, {self.log_values.shape}, {self.signs.shape}"
        )
        if np.any(self.taus <= 0) or np.any(np.diff(self.taus) <= 0):
            raise IndicatorFitError("tau samples must be positive and strictly increasing")

    def __len__(self) -> int:
        return len(self.taus)

    @property
    def values(self) -> np.ndarray:
        return self.signs * np.exp(self.log_values)

    @property
    def tau_positive(self) -> Optional[float]:
        """Smallest sampled tau from which I stays positive."""
        bad = np.flatnonzero(self.signs <= 0)
        if len(bad) == 0:
            return float(self.taus[0])
        if bad[-1] == len(self.taus) - 1:
            return None
        return float(self.taus[bad[-1] + 1])

    def window(self, tau_min: float = 0.0, tau_max: float = np.inf) -> "IndicatorCurve":
        keep = (self.taus >= tau_min) & (self.taus <= tau_max)
        return IndicatorCurve(
            self.taus[keep], self.log_values[keep], self.signs[keep], self.source, dict(self.geometry)
        )

    def to_csv(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for tau, log_value, sign in zip(self.taus, self.log_values, self.signs):
                writer.writerow([repr(float(tau)), repr(float(log_value)), int(sign), self.source])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "IndicatorCurve":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise IndicatorFitError(f"{path} holds no indicator samples")
        sources = {row["source"] for row in rows}
        if len(sources) != 1:
            raise IndicatorFitError(f"{path} mixes indicator sources {sorted(sources)}")
        return cls(
            taus=[float(row["tau"]) for row in rows],
            log_values=[float(row["log_indicator"]) for row in rows],
            signs=[float(row["sign"]) for row in rows],
            source=sources.pop(),
        )

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "tau": self.taus.tolist(),
            "log_indicator": self.log_values.tolist(),
            "sign": self.signs.tolist(),
            "geometry": self.geometry,
        }


def _geometry(ball: Ball, ball_prime: Ball, obstacle: Optional[ObstacleShape] = None) -> dict:
    return {
        "p": ball.center.tolist(),
        "eta": ball.radius,
        "p_prime": ball_prime.center.tolist(),
        "eta_prime": ball_prime.radius,
        "obstacle": None if obstacle is None else obstacle.to_dict(),
    }


def _receiver_sum(field: LaplaceField, weights: Optional[np.ndarray]) -> np.ndarray:
    if weights is not None and len(weights) != len(field.nodes):
        raise QuadratureError(
            f"{len(weights)} receiver weights for {len(field.nodes)} nodes of the Laplace field"
        )
    return field.integral(weights)


def indicator_value(
    tau: float,
    field: LaplaceField,
    ball: Ball,
    ball_prime: Ball,
    weights: Optional[np.ndarray] = None,
) -> float:
    """int_B v_g dx - int_B' w_f dx with the first term in closed form.

    weights restrict the receiver integral to a sub-ball of B' (ball_prime is
    then that sub-ball).
    """
    index = np.flatnonzero(np.isclose(field.taus, tau, rtol=1e-12, atol=0.0))
    if len(index) == 0:
        raise QuadratureError(f"tau={tau} was not accumulated (grid {field.taus.tolist()})")
    received = _receiver_sum(field, weights)[index[0]]
    return float(ball_ball_integral(ball, ball_prime, tau) - received)


def _as_log(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore"):
        return np.log(np.abs(values)), np.sign(values)


def fdtd_curve(
    field: LaplaceField,
    ball: Ball,
    ball_prime: Ball,
    reference: Optional[LaplaceField] = None,
    weights: Optional[np.ndarray] = None,
    obstacle: Optional[ObstacleShape] = None,
) -> IndicatorCurve:
    """Indicator curve from simulated Laplace fields.

    Without a reference run the direct term is the closed form int_B v_g. With
    the discrete free-space run on the same grid it is int_B' w_free, so the
    grid error of the direct wave cancels.
    """
    received = _receiver_sum(field, weights)
    if reference is None:
        direct = np.array([ball_ball_integral(ball, ball_prime, t) for t in field.taus])
        subtraction = "closed_form"
    else:
        if not np.array_equal(reference.taus, field.taus) or len(reference.nodes) != len(field.nodes):
            raise QuadratureError("reference run was accumulated on a different tau grid or lattice")
        direct = _receiver_sum(reference, weights)
        subtraction = "reference_run"
    log_values, signs = _as_log(direct - received)
    geometry = _geometry(ball, ball_prime, obstacle)
    geometry["subtraction"] = subtraction
    return IndicatorCurve(field.taus, log_values, signs, "fdtd", geometry)


def semianalytic_curve(
    obstacle: ObstacleShape,
    ball: Ball,
    ball_prime: Ball,
    taus: Sequence[float],
    quadrature: Optional[SurfaceQuadrature] = None,
    rtol: float = 1e-4,
    check: bool = True,
) -> IndicatorCurve:
    """I(tau) := 2 J(tau) evaluated on the obstacle boundary."""
    evaluations = j_boundary_sweep(
        obstacle, ball, ball_prime, taus, rtol=rtol, quadrature=quadrature, check=check
    )
    if not all(e.converged for e in evaluations):
        worst = max(e.rtol for e in evaluations)
        logger.warning(f"Semi-analytic curve built from unconverged quadrature (rtol {worst:.2e})")
    geometry = _geometry(ball, ball_prime, obstacle)
    geometry["n_nodes"] = evaluations[0].n_nodes
    return IndicatorCurve(
        [e.tau for e in evaluations],
        [np.log(2.0) + e.log_value for e in evaluations],
        [e.sign for e in evaluations],
        "semianalytic_2J",
        geometry,
    )


def cancellation_noise(
    field: LaplaceField, reference: LaplaceField, weights: Optional[np.ndarray] = None
) -> IndicatorCurve:
    """Round-off left after subtracting the free-space run from the obstacle run."""
    scale = np.maximum(np.abs(_receiver_sum(field, weights)), np.abs(_receiver_sum(reference, weights)))
    log_values, _ = _as_log(CANCELLATION_ULPS * np.finfo(np.float64).eps * scale)
    return IndicatorCurve(field.taus, log_values, np.ones_like(scale), "fdtd")


@dataclass
class DecayFit:
    rate: float
    uncertainty: float
    intercept: float
    prefactor_power: float
    window: Tuple[float, float]
    n_samples: int
    pointwise: np.ndarray
    pairwise: np.ndarray
    residual: float

    def to_dict(self) -> dict:
        return {
            "rate": float(self.rate),
            "uncertainty": float(self.uncertainty),
            "intercept": float(self.intercept),
            "prefactor_power": float(self.prefactor_power),
            "window": [float(self.window[0]), float(self.window[1])],
            "n_samples": int(self.n_samples),
            "pointwise": [float(v) for v in self.pointwise],
            "pairwise": [float(v) for v in self.pairwise],
            "residual": float(self.residual),
        }


def _check_window(curve: IndicatorCurve):
    if len(curve) < MIN_FIT_SAMPLES:
        raise IndicatorFitError(
            f"decay fit needs at least {MIN_FIT_SAMPLES} tau samples, window has {len(curve)}"
        )
    if np.any(curve.signs <= 0) or not np.all(np.isfinite(curve.log_values)):
        bad = curve.taus[(curve.signs <= 0) | ~np.isfinite(curve.log_values)]
        raise IndicatorFitError(f"indicator is not positive at tau = {bad.tolist()}")
    if np.any(np.diff(-curve.log_values) <= 0):
        raise IndicatorFitError(
            "-log I is not increasing across the window: tau window too small or observation "
            "time T too short for the first reflection"
        )


def decay_fit(curve: IndicatorCurve, known_power: Optional[float] = None) -> DecayFit:
    """Exponential rate of I(tau) ~ C tau^mu e^{-tau rate}.

    The regression of -log I on (tau, log tau, 1) absorbs the prefactor; with
    known_power the tau^mu factor is removed first. The uncertainty is the
    spread of the prefactor-corrected pointwise and consecutive-pair
    estimates around the regression slope.
    """
    _check_window(curve)
    taus, y = curve.taus, -curve.log_values
    pointwise = y / taus
    pairwise = np.diff(y) / np.diff(taus)

    if known_power is None:
        design = np.column_stack([taus, np.log(taus), np.ones_like(taus)])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        rate, power, intercept = float(coef[0]), float(-coef[1]), float(-coef[2])
    else:
        corrected = y + known_power * np.log(taus)
        design = np.column_stack([taus, np.ones_like(taus)])
        coef, *_ = np.linalg.lstsq(design, corrected, rcond=None)
        rate, power, intercept = float(coef[0]), float(known_power), float(-coef[1])
        coef = np.array([coef[0], -known_power, coef[1]])
        design = np.column_stack([taus, np.log(taus), np.ones_like(taus)])

    fitted = design @ coef
    residual = float(np.sqrt(np.mean((y - fitted) ** 2)))
    # estimates with the fitted prefactor removed
    y_corr = y + power * np.log(taus) + intercept
    point_corr = y_corr / taus
    pair_corr = np.diff(y_corr) / np.diff(taus)
    upper = slice(len(taus) // 2, None)
    spread = np.concatenate([point_corr[upper], pair_corr[upper]]) - rate
    uncertainty = float(np.max(np.abs(spread)))
    logger.info(
        f"Decay fit on tau in [{taus[0]:.3g}, {taus[-1]:.3g}]: rate {rate:.6f} +- {uncertainty:.2e} "
        f"(tau^{power:.2f} prefactor)"
    )
    return DecayFit(
        rate=rate,
        uncertainty=uncertainty,
        intercept=intercept,
        prefactor_power=power,
        window=(float(taus[0]), float(taus[-1])),
        n_samples=len(taus),
        pointwise=pointwise,
        pairwise=pairwise,
        residual=residual,
    )


@dataclass
class ScaledLimit:
    taus: np.ndarray
    log_sequence: np.ndarray
    kappa: float
    limit: float
    plateau_value: float
    plateau: Tuple[float, float]
    tail: float
    drift: float
    diverging: bool
    exponents: Tuple[float, ...]

    @property
    def sequence(self) -> np.ndarray:
        return np.exp(self.log_sequence)

    def to_dict(self) -> dict:
        return {
            "kappa": float(self.kappa),
            "limit": float(self.limit),
            "plateau_value": float(self.plateau_value),
            "plateau": [float(self.plateau[0]), float(self.plateau[1])],
            "tail": float(self.tail),
            "drift": float(self.drift),
            "diverging": bool(self.diverging),
            "exponents": list(self.exponents),
            "tau": self.taus.tolist(),
            "log_sequence": self.log_sequence.tolist(),
        }


def longest_plateau(values: np.ndarray, variation: float = PLATEAU_VARIATION) -> Tuple[int, int]:
    """[start, stop) of the longest run whose max / min - 1 stays below variation,
    preferring later runs on ties."""
    best = (len(values) - 1, len(values))
    start = 0
    for stop in range(1, len(values) + 1):
        window = values[start:stop]
        while window.max() > (1.0 + variation) * window.min():
            start += 1
            window = values[start:stop]
        if stop - start >= best[1] - best[0]:
            best = (start, stop)
    return best


def scaled_limit(
    curve: IndicatorCurve,
    kappa: float,
    power: float = 4.0,
    exponents: Sequence[float] = (1.0, 2.0),
) -> ScaledLimit:
    """tau^power e^{tau kappa} I(tau) and its limit.

    The limit extrapolates the upper half of the sequence in powers
    tau^{-e}. A residual exponential trend in the upper half beyond
    log(1.1) marks a wrong kappa.
    """
    if np.any(curve.signs <= 0):
        raise IndicatorFitError("scaled sequence needs a positive indicator")
    taus = curve.taus
    log_seq = power * np.log(taus) + kappa * taus + curve.log_values
    upper = slice(len(taus) // 2, None)
    t_up = taus[upper]
    # values relative to the last sample keep the extrapolation in range
    anchor = log_seq[-1]
    rel = np.exp(log_seq[upper] - anchor)

    design = np.column_stack([np.ones_like(t_up)] + [t_up ** (-e) for e in exponents])
    if len(t_up) > design.shape[1]:
        coef, *_ = np.linalg.lstsq(design, rel, rcond=None)
        extrapolated = coef[0]
    else:
        extrapolated = rel[-1]

    trend = np.column_stack([np.ones_like(t_up), t_up, 1.0 / t_up])
    slope = np.linalg.lstsq(trend, log_seq[upper], rcond=None)[0][1] if len(t_up) >= 4 else 0.0
    drift = float(slope * (t_up[-1] - t_up[0]))
    diverging = bool(abs(drift) > DIVERGENCE_DRIFT or extrapolated <= 0)

    start, stop = longest_plateau(np.exp(log_seq - anchor))
    plateau_value = float(np.exp(anchor) * np.mean(np.exp(log_seq[start:stop] - anchor)))
    tail = float(np.max(np.abs(np.diff(log_seq[-3:])))) if len(taus) >= 3 else np.inf
    limit = float(np.exp(anchor) * extrapolated) if extrapolated > 0 else plateau_value
    if diverging:
        logger.warning(
            f"Scaled sequence diverges (log drift {drift:.3f} over tau in "
            f"[{t_up[0]:.3g}, {t_up[-1]:.3g}]): kappa={kappa:.6f} is off"
        )
    return ScaledLimit(
        taus=taus,
        log_sequence=log_seq,
        kappa=float(kappa),
        limit=limit,
        plateau_value=plateau_value,
        plateau=(float(taus[start]), float(taus[stop - 1])),
        tail=tail,
        drift=drift,
        diverging=diverging,
        exponents=tuple(float(e) for e in exponents),
    )


def joint_limit(curve: IndicatorCurve, power: float = 4.0) -> JointLimit:
    """Fit log I + power log tau = a - kappa tau + b / tau + c / tau^2.

    Used at large tau where kappa is known only to the accuracy of a decay fit.
    """
    if np.any(curve.signs <= 0):
        raise IndicatorFitError("joint limit fit needs a positive indicator")
    if len(curve) < 6:
        raise IndicatorFitError(f"joint limit fit needs at least 6 samples, got {len(curve)}")
    taus = curve.taus
    y = curve.log_values + power * np.log(taus)
    design = np.column_stack([np.ones_like(taus), taus, 1.0 / taus, 1.0 / taus**2])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = float(np.sqrt(np.mean((design @ coef - y) ** 2)))
    return JointLimit(float(coef[0]), float(-coef[1]), residual, (float(taus[0]), float(taus[-1])))


def noise_floor(signal: IndicatorCurve, noise: IndicatorCurve, snr: float = 10.0) -> float:
    """Largest tau up to which |I| stays snr times above the noise curve."""
    if not np.array_equal(signal.taus, noise.taus):
        raise IndicatorFitError("signal and noise curves are sampled on different tau grids")
    ok = (signal.signs > 0) & (signal.log_values - noise.log_values >= np.log(snr))
    if not ok[0]:
        return float(signal.taus[0])
    bad = np.flatnonzero(~ok)
    cap = signal.taus[-1] if len(bad) == 0 else signal.taus[bad[0] - 1]
    if cap < signal.taus[-1]:
        logger.warning(f"Indicator drops into the noise floor beyond tau={cap:.3g}")
    return float(cap)


def usable_window(curve: IndicatorCurve) -> IndicatorCurve:
    """Leading part of the curve where I > 0 and -log I keeps increasing."""
    y = -curve.log_values
    ok = curve.signs > 0
    stop = 1 if ok[0] else 0
    while stop < len(curve) and ok[stop] and y[stop] > y[stop - 1]:
        stop += 1
    if stop < len(curve):
        logger.warning(f"Indicator window capped at tau={curve.taus[max(stop - 1, 0)]:.3g}")
    return IndicatorCurve(
        curve.taus[:stop], curve.log_values[:stop], curve.signs[:stop], curve.source, dict(curve.geometry)
    )
