if __name__ == "__main__":
    from scripts import initialize

    initialize()

    from src.core.config import RunConfig
    from src.models.indicator import decay_fit, usable_window
    from src.models.wavesim import check_causality

    config: RunConfig = RunConfig.desk()
    config.fdtd.reference_run = True

    source = config.source()
    curve = source.curve()
    for tau, log_value, sign in zip(curve.taus, curve.log_values, curve.signs):
        print(f"tau={tau:7.3f}  log|I|={log_value:10.4f}  sign={sign:+.0f}")

    fit = decay_fit(usable_window(curve))
    obstacle, ball, ball_prime = config.validate()
    print(f"decay rate {fit.rate:.4f} +- {fit.uncertainty:.2e}")
    print(f"causality {check_causality(source.traces[0], ball)}")
