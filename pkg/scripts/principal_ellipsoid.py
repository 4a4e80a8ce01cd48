if __name__ == "__main__":
    from scripts import initialize

    initialize()

    import numpy as np

    from src.core.verify import ellipsoid_rotation_setup
    from src.models.probe import GeometrySource, SemiAnalyticSource, principal_directions

    obstacle, q, ball, ball_prime = ellipsoid_rotation_setup()
    truth = obstacle.shape_operator_at(q).operator
    print(f"true principal curvatures {truth.principal()[0]}, H = {truth.mean:.6f}")

    for source in (GeometrySource(obstacle, ball, ball_prime), SemiAnalyticSource(obstacle, ball, ball_prime)):
        result = principal_directions(source, q)
        print(f"[{source.mode}] k = {np.round(result.curvatures, 6)}, H = {result.mean:.6f}")
        print(f"[{source.mode}] directions\n{np.round(result.directions, 6)}")
