import logging
import time
from collections import namedtuple
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from src.core.errors import EnclosureError
from src.core.geometry import (
    Ball,
    SpheroidFrame,
    TangentFrame,
    UnitPairGeometry,
    det_shape_diff,
    hessian_phi_chart,
    hessian_phi_closed_form,
    resolve_determinant_variant,
    spheroid_point,
    spheroid_shape_operator,
    unit,
)
from src.core.report import format_table, write_json
from src.data.obstacle import Ellipsoid, Sphere
from src.data.reflector import min_broken_path, min_over_triple_surfaces
from src.data.trace import ReceiverTrace
from src.models.indicator import joint_limit, semianalytic_curve
from src.models.potentials import (
    AsymptoticKind,
    ReflectorTerm,
    asymptotic_rhs,
    ball_ball_integral,
    ball_ball_monte_carlo,
    j_boundary,
    j_volume,
    laplace_integrals,
    leading_coefficient,
    yukawa_ball,
    yukawa_ball_quadrature,
)
from src.models.probe import (
    FDTDSource,
    GeometrySource,
    SemiAnalyticSource,
    dichotomy_agreement,
    principal_directions,
    reconstruct_ball,
    scan_reflector,
)
from src.models.wavesim import SimulationConfig, check_causality, free_space_solution, simulate

logger = logging.getLogger(__name__)

Check = namedtuple("Check", ["name", "criterion", "run", "slow"])
CheckResult = namedtuple("CheckResult", ["name", "criterion", "passed", "details", "seconds"])

S1_KAPPA = 5.73590
S1_LEADING = 0.02583
S1_Q = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)


def s1_setup():
    return Sphere(), Ball((4.0, 0.0, 0.0), 0.5), Ball((0.0, 4.0, 0.0), 0.5)


def _rel(a: float, b: float) -> float:
    return abs(a - b) / abs(b)


def _angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.degrees(np.arccos(np.clip(abs(unit(u) @ unit(v)), -1.0, 1.0))))


def check_potential_oracle(rng: np.random.Generator, quick: bool) -> dict:
    errors = []
    for _ in range(20):
        tau, eta = rng.uniform(0.5, 5.0), rng.uniform(0.2, 1.0)
        r = rng.uniform(1.1 * eta, 4.0)
        ball = Ball(np.zeros(3), eta)
        x = np.array([r, 0.0, 0.0])
        value, _ = yukawa_ball(x, ball, tau)
        errors.append(_rel(float(value), yukawa_ball_quadrature(x, ball, tau)))
    return {"passed": max(errors) < 1e-6, "max_rel_error": max(errors)}


def check_ball_ball(rng: np.random.Generator, quick: bool) -> dict:
    _, ball, ball_prime = s1_setup()
    tau = 2.0
    closed = ball_ball_integral(ball, ball_prime, tau)
    estimate, stderr = ball_ball_monte_carlo(ball, ball_prime, tau, seed=int(rng.integers(2**31)))
    error = _rel(estimate, closed)
    return {"passed": error < 1e-3, "closed_form": closed, "monte_carlo": estimate, "stderr": stderr,
            "rel_error": error}


def check_spheroid_algebra(rng: np.random.Generator, quick: bool) -> dict:
    """Closed-form spheroid operator against P Hess(phi) P / |grad phi| by differences."""
    worst, worst_identity = 0.0, 0.0
    h = 1e-4
    for _ in range(200):
        p, p_prime = rng.normal(size=3), rng.normal(size=3)
        c = np.linalg.norm(p - p_prime) * rng.uniform(1.2, 3.0)
        frame = SpheroidFrame(p, p_prime, c)
        x = spheroid_point(unit(rng.normal(size=3)), frame)
        curv = spheroid_shape_operator(x, frame)
        E = curv.operator.frame.basis
        hess = np.zeros((3, 3))
        eye = np.eye(3)
        for i in range(3):
            for j in range(3):
                hess[i, j] = (
                    frame.phi(x + h * (eye[i] + eye[j]))
                    - frame.phi(x + h * (eye[i] - eye[j]))
                    - frame.phi(x - h * (eye[i] - eye[j]))
                    + frame.phi(x - h * (eye[i] + eye[j]))
                ) / (4.0 * h**2)
        geo = UnitPairGeometry.at(x, p, p_prime)
        fd = E.T @ hess @ E / np.sqrt(2.0 * geo.gap)
        scale = np.max(np.abs(curv.operator.m))
        worst = max(worst, float(np.max(np.abs(fd - curv.operator.m)) / scale))
        worst_identity = max(
            worst_identity,
            abs(curv.operator.gauss - geo.lam**2 / 4.0) / curv.gauss,
            abs(curv.operator.mean - curv.mean) / curv.mean,
        )
    return {"passed": worst < 1e-5 and worst_identity < 1e-10, "max_rel_error": worst,
            "identity_error": worst_identity}


def check_hessian_identity(rng: np.random.Generator, quick: bool) -> dict:
    cases = [s1_setup()[0], Ellipsoid.from_euler((0.0, 0.0, 0.0), (2.0, 1.0, 1.0), (10.0, 20.0, 30.0))]
    p, p_prime = np.array([4.0, 0.0, 0.0]), np.array([0.0, 4.0, 0.0])
    worst = 0.0
    for obstacle in cases:
        c, reflectors = min_broken_path(obstacle, p, p_prime)
        q = reflectors.single().q
        spheroid = spheroid_shape_operator(q, SpheroidFrame(p, p_prime, c)).operator
        obstacle_op = obstacle.shape_operator_at(q).operator
        geo = UnitPairGeometry.at(q, p, p_prime)
        closed = hessian_phi_closed_form(geo, spheroid, obstacle_op)
        chart = hessian_phi_chart(q, spheroid.frame, p, p_prime, obstacle.height_function(spheroid.frame))
        worst = max(worst, float(np.max(np.abs(chart - closed)) / np.max(np.abs(closed))))
    return {"passed": worst < 1e-5, "max_rel_error": worst}


def check_variant(rng: np.random.Generator, quick: bool) -> dict:
    resolution = resolve_determinant_variant(100, 0)
    return {"passed": True, "variant": resolution.variant.value, "max_errors": resolution.max_errors,
            "kappa": resolution.variant.kappa}


def check_triple_surface(rng: np.random.Generator, quick: bool) -> dict:
    obstacle, ball, ball_prime = s1_setup()
    configs = [(ball, ball_prime)]
    while len(configs) < (4 if quick else 11):
        b = Ball(rng.uniform(3.0, 5.0) * unit(rng.normal(size=3)), rng.uniform(0.2, 0.6))
        b_prime = Ball(rng.uniform(3.0, 5.0) * unit(rng.normal(size=3)), rng.uniform(0.2, 0.6))
        gap = np.linalg.norm(b.center - b_prime.center) - b.radius - b_prime.radius
        if gap > 0 and obstacle.hull_clearance(b, b_prime) > 0.1:
            configs.append((b, b_prime))
    spacing = obstacle.sample_spacing(5)
    diffs = []
    for b, b_prime in configs:
        c, _ = min_broken_path(obstacle, b.center, b_prime.center)
        triple = min_over_triple_surfaces(obstacle, b, b_prime, level=5)
        diffs.append(abs(triple - (c - b.radius - b_prime.radius)))
    return {"passed": max(diffs) <= 2.0 * spacing, "max_difference": max(diffs), "spacing": spacing,
            "n_configs": len(configs)}


def check_j_methods(rng: np.random.Generator, quick: bool) -> dict:
    obstacle, ball, ball_prime = s1_setup()
    errors = {}
    for tau in (2.0, 6.0) if quick else (2.0, 4.0, 6.0, 8.0, 10.0):
        boundary = j_boundary(obstacle, ball, ball_prime, tau)
        volume = j_volume(obstacle, ball, ball_prime, tau)
        errors[tau] = abs(np.expm1(volume.log_value - boundary.log_value))
    return {"passed": max(errors.values()) < 5e-3, "rel_errors": errors}


def check_laplace_limit(rng: np.random.Generator, quick: bool) -> dict:
    obstacle, ball, ball_prime = s1_setup()
    p, p_prime = ball.center, ball_prime.center
    c, reflectors = min_broken_path(obstacle, p, p_prime)
    q = reflectors.single().q
    frame = SpheroidFrame(p, p_prime, c)
    det = det_shape_diff(q, obstacle, frame)
    target = asymptotic_rhs(
        AsymptoticKind.POINT_PAIR, [ReflectorTerm(np.linalg.norm(q - p), np.linalg.norm(q - p_prime), det)]
    )
    taus = np.array([10.0, 20.0, 40.0])
    integrals = laplace_integrals(obstacle, p, p_prime, taus)
    scaled = taus * np.exp(integrals.log_combined + taus * c)
    errors = np.abs(scaled - target) / target
    decreasing = bool(np.all(np.diff(errors) < 0))
    return {"passed": errors[-1] < 0.02 and decreasing, "target": target, "scaled": scaled.tolist(),
            "rel_errors": errors.tolist()}


def check_ball_pair_limit(rng: np.random.Generator, quick: bool) -> dict:
    obstacle, ball, ball_prime = s1_setup()
    high = np.geomspace(40.0, 400.0, 16)
    target = leading_coefficient(obstacle, ball, ball_prime)
    joint = joint_limit(semianalytic_curve(obstacle, ball, ball_prime, high))
    error = _rel(np.exp(joint.log_limit), target)

    # monostatic: one ball at distance 3 from the unit sphere
    mono = Ball((4.0, 0.0, 0.0), 0.5)
    mono_target = asymptotic_rhs(AsymptoticKind.MONOSTATIC, [ReflectorTerm(3.0, 3.0, (1.0 / 3.0 + 1.0) ** 2)], 0.5, 0.5)
    mono_joint = joint_limit(semianalytic_curve(obstacle, mono, mono, high))
    mono_error = _rel(np.exp(mono_joint.log_limit), mono_target)
    return {
        "passed": error < 0.05 and mono_error < 0.05 and abs(target - S1_LEADING) < 1e-4,
        "target": target,
        "limit": float(np.exp(joint.log_limit)),
        "rel_error": error,
        "kappa_fit": joint.kappa,
        "monostatic_target": mono_target,
        "monostatic_rel_error": mono_error,
    }


def check_scan(rng: np.random.Generator, quick: bool) -> dict:
    obstacle, ball, ball_prime = s1_setup()
    source = SemiAnalyticSource(obstacle, ball, ball_prime)
    scan = scan_reflector(source, 0.25, omega_level=3 if quick else 4, progress=False)
    if len(scan.clusters) != 1:
        return {"passed": False, "n_clusters": len(scan.clusters)}
    cluster = scan.clusters[0]
    q_error = float(np.linalg.norm(cluster.q - S1_Q))
    normal_error = _angle_deg(cluster.normal, S1_Q)
    return {"passed": q_error < 0.02 and normal_error < 1.0, "q": cluster.q, "q_error": q_error,
            "normal_error_deg": normal_error, "n_hits": int(scan.hits.sum())}


def check_dichotomies(rng: np.random.Generator, quick: bool) -> dict:
    _, ball, ball_prime = s1_setup()
    ellipsoid = Ellipsoid.from_euler((0.0, 0.0, 0.0), (1.5, 1.0, 0.8), (0.0, 0.0, 25.0))
    agreement = {}
    singleton = {}
    for name, obstacle in (("sphere", Sphere()), ("ellipsoid", ellipsoid)):
        agreement[name] = dichotomy_agreement(obstacle, ball, ball_prime, 0.25, 40 if quick else 100)
        c, reflectors = min_broken_path(obstacle, ball.center, ball_prime.center)
        q = reflectors.single().q
        geo = UnitPairGeometry.at(q, ball.center, ball_prime.center)
        _, shifted = min_broken_path(obstacle, ball.center, ball_prime.center + 0.25 * geo.A_prime)
        singleton[name] = bool(shifted.is_singleton and np.linalg.norm(shifted.points[0].q - q) < 1e-6)
    return {"passed": all(v == 1.0 for v in agreement.values()) and all(singleton.values()),
            "agreement": agreement, "shift_singleton": singleton}


def check_ball_geometry(rng: np.random.Generator, quick: bool) -> dict:
    obstacle, ball, ball_prime = s1_setup()
    result = reconstruct_ball(GeometrySource(obstacle, ball, ball_prime), shifts=(0.1, 0.2),
                              omega_level=3 if quick else 4, progress=False)
    center_error = float(np.linalg.norm(result.center))
    radius_error = abs(result.radius - 1.0)
    return {"passed": center_error < 1e-6 and radius_error < 1e-6, "center": result.center,
            "radius": result.radius}


def check_ball_semianalytic(rng: np.random.Generator, quick: bool) -> dict:
    obstacle, ball, ball_prime = s1_setup()
    result = reconstruct_ball(SemiAnalyticSource(obstacle, ball, ball_prime), omega_level=3 if quick else 4,
                              progress=False)
    center_error = float(np.linalg.norm(result.center))
    radius_error = abs(result.radius - 1.0)
    return {"passed": center_error < 0.05 and radius_error < 0.05, "center": result.center,
            "radius": result.radius, "gauss": result.curvature.gauss}


def ellipsoid_rotation_setup(alpha: float = 0.5, r: float = 4.0, eta: float = 0.5):
    obstacle = Ellipsoid.from_euler((0.0, 0.0, 0.0), (2.0, 1.0, 1.0))
    q = obstacle.project(np.array([2.0, 1.0, 1.0]))
    tf = TangentFrame.from_normal(q, obstacle.normal_at(q))
    A = -np.cos(alpha) * tf.nu + np.sin(alpha) * tf.e1
    A_prime = -np.cos(alpha) * tf.nu - np.sin(alpha) * tf.e1
    return obstacle, q, Ball(q - r * A, eta), Ball(q - r * A_prime, eta)


def check_rotation_scan(rng: np.random.Generator, quick: bool) -> dict:
    obstacle, q, ball, ball_prime = ellipsoid_rotation_setup()
    result = principal_directions(GeometrySource(obstacle, ball, ball_prime), q, progress=False)
    truth = obstacle.shape_operator_at(q).operator
    k_true, _ = truth.principal()
    directions = truth.principal_directions()
    angles = [_angle_deg(result.directions[i], directions[i]) for i in range(2)]
    mean_error = _rel(result.mean, truth.mean)

    sphere, sphere_ball, sphere_ball_prime = s1_setup()
    iso = principal_directions(GeometrySource(sphere, sphere_ball, sphere_ball_prime), S1_Q, progress=False)
    return {
        "passed": max(angles) < 2.0 and mean_error < 0.02 and iso.isotropic,
        "angle_errors_deg": angles,
        "mean": result.mean,
        "mean_true": truth.mean,
        "curvatures": result.curvatures,
        "curvatures_true": k_true,
        "sphere_isotropic": iso.isotropic,
    }


def check_fdtd_s1(rng: np.random.Generator, quick: bool) -> dict:
    obstacle, ball, ball_prime = s1_setup()
    source = FDTDSource(obstacle, ball, ball_prime, h=0.05, T=8.0, progress=False)
    first = source.first_reflection_distance()
    positive = bool(np.all(source.curve().window(*first.diagnostics["decay_fit"]["window"]).signs > 0))
    error = _rel(first.kappa, S1_KAPPA)
    rate_ok = error < 0.03 and positive
    details = {"passed": False, "kappa": first.kappa, "rel_error": error, "rate_within_3_percent": rate_ok}
    try:
        ball_result = reconstruct_ball(source, omega_level=3, progress=False)
    except EnclosureError as e:
        details["ball_error"] = f"{type(e).__name__}: {e}"
        return details
    center_error = float(np.linalg.norm(ball_result.center))
    radius_error = abs(ball_result.radius - 1.0)
    details.update(
        ball_center_error=center_error,
        ball_radius_error=radius_error,
        ball_within_10_percent=center_error < 0.1 and radius_error < 0.1,
    )
    details["passed"] = rate_ok and details["ball_within_10_percent"]
    return details


def _free_space_error(h: float) -> Tuple[float, ReceiverTrace, Ball]:
    ball, receiver = Ball((0.0, 0.0, 0.0), 0.5), Ball((1.5, 0.0, 0.0), 0.2)
    trace = simulate(SimulationConfig(ball, receiver, h=h, T=3.0), progress=False)
    node = int(np.argmin(np.linalg.norm(trace.nodes - receiver.center, axis=1)))
    exact = free_space_solution(trace.nodes[node], trace.times, ball)
    return float(np.linalg.norm(trace.samples[node] - exact) / np.linalg.norm(exact)), trace, ball


def check_fdtd_self(rng: np.random.Generator, quick: bool) -> dict:
    coarse, _, _ = _free_space_error(0.1)
    fine, trace, ball = _free_space_error(0.05)
    causality = check_causality(trace, ball)
    order = float(np.log2(coarse / fine))
    return {"passed": fine < 0.02 and causality.ok and order >= 1.0, "rel_error": fine,
            "coarse_rel_error": coarse, "order": order, "causality_ratio": causality.max_ratio}


CHECKS: List[Check] = [
    Check("potential_oracle", "closed-form Yukawa ball vs quadrature, rel < 1e-6", check_potential_oracle, False),
    Check("ball_ball", "double-ball integral vs Monte Carlo, rel < 1e-3", check_ball_ball, False),
    Check("spheroid_algebra", "spheroid operator vs differences, rel < 1e-5", check_spheroid_algebra, False),
    Check("hessian_identity", "phi Hessian vs closed form, rel < 1e-5", check_hessian_identity, False),
    Check("determinant_variant", "exactly one closed-form determinant variant", check_variant, False),
    Check("triple_surface", "triple-surface min vs min phi - eta - eta'", check_triple_surface, False),
    Check("j_methods", "boundary vs volume J, rel < 0.5%", check_j_methods, False),
    Check("laplace_limit", "Laplace limit within 2% by tau = 40", check_laplace_limit, False),
    Check("scaled_limit_2j", "tau^4 e^{tau kappa} 2J limit within 5%", check_ball_pair_limit, False),
    Check("reflector_scan", "scan q within 0.02, normal within 1 deg", check_scan, False),
    Check("dichotomies", "shifted-minimum dichotomy and singleton", check_dichotomies, False),
    Check("ball_geometry", "geometry-mode ball exact to 1e-6", check_ball_geometry, False),
    Check("ball_semianalytic", "semi-analytic ball within 5%", check_ball_semianalytic, False),
    Check("rotation_scan", "principal directions within 2 deg, H within 2%", check_rotation_scan, False),
    Check("fdtd_s1", "FDTD decay rate within 3%, ball within 10%", check_fdtd_s1, True),
    Check("fdtd_self", "free-space oracle < 2%, causality, order >= 1", check_fdtd_self, True),
]


def run_verify(
    out_dir: Optional[Union[str, Path]] = None,
    quick: bool = False,
    seed: int = 0,
    only: Optional[List[str]] = None,
    checks: Optional[List[Check]] = None,
) -> List[CheckResult]:
    checks = CHECKS if checks is None else checks
    selected = [c for c in checks if (not quick or not c.slow) and (only is None or c.name in only)]
    results = []
    for i, check in enumerate(tqdm(selected, desc="verify")):
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        try:
            details = check.run(rng, quick)
            passed = bool(details.pop("passed"))
        except Exception as e:  # a crashing check is a failing check
            logger.exception(f"Check {check.name} raised")
            details, passed = {"error": f"{type(e).__name__}: {e}"}, False
        results.append(CheckResult(check.name, check.criterion, passed, details, time.perf_counter() - start))
        logger.info(f"{check.name}: {'PASS' if passed else 'FAIL'}")

    rows = [(r.name, "PASS" if r.passed else "FAIL", f"{r.seconds:.1f}s", r.criterion) for r in results]
    print(format_table(rows, ["check", "result", "time", "criterion"]))
    if out_dir is not None:
        write_json(
            Path(out_dir) / "verify_report.json",
            {
                "quick": quick,
                "seed": seed,
                "passed": all(r.passed for r in results),
                "determinant_variant": resolve_determinant_variant().variant.value,
                "checks": [
                    {"name": r.name, "criterion": r.criterion, "passed": r.passed, "details": r.details}
                    for r in results
                ],
            },
        )
    return results
