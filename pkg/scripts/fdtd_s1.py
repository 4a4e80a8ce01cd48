if __name__ == "__main__":
    from scripts import initialize

    initialize(threads=8)

    from src.core.config import RunConfig
    from src.core.report import write_json
    from src.data.trace import save_trace

    config: RunConfig = RunConfig.s1()
    config.mode = "fdtd"
    config.fdtd.h = 0.05
    config.fdtd.T = 8.0
    config.threads = 8
    config.name = "s1_fdtd"

    source = config.source()
    first = source.first_reflection_distance()
    print(f"kappa = {first.kappa:.5f} +- {first.uncertainty:.1e} (expected 5.73590)")

    trace, free_trace = source.traces
    save_trace(trace, f"{config.out_dir}/{config.name}/trace.encl")
    if free_trace is not None:
        save_trace(free_trace, f"{config.out_dir}/{config.name}/trace_free.encl")
    source.curve().to_csv(f"{config.out_dir}/{config.name}/indicator.csv")
    write_json(f"{config.out_dir}/{config.name}/enclose.json", {"c": first.c, **first.diagnostics})
