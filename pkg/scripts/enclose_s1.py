if __name__ == "__main__":
    from scripts import initialize

    initialize()

    from src.core.config import RunConfig
    from src.core.report import write_json
    from src.models.probe import reconstruct_ball

    config: RunConfig = RunConfig.s1()
    config.mode = "semianalytic"
    # config.mode = "geometry"
    config.scan.omega_level = 4

    source = config.source()
    first = source.first_reflection_distance()
    print(f"c = {first.c:.6f}, kappa = {first.kappa:.6f} (expected 5.73590)")

    result = reconstruct_ball(source, omega_level=config.scan.omega_level, threads=config.threads)
    write_json(f"{config.out_dir}/{config.name}/ball.json", result.to_dict())
