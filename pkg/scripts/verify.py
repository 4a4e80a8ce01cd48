if __name__ == "__main__":
    import sys

    from scripts import initialize

    initialize()

    from src.core.cli import main

    sys.exit(main(["verify", "--out", "runs", *sys.argv[1:]]))
