import sys

from dotenv import load_dotenv

from energy_aligning.cli import run

# Logging is configured by `run`, after `--log-level` is parsed
load_dotenv()

if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
