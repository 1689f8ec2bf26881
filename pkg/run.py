import sys

# Load .flaskenv before importing the package so SCMPC_* and LOG_LEVEL are set
from dotenv import load_dotenv
load_dotenv('.flaskenv')

from highway_scmpc.cli import main

if __name__ == "__main__":
    # python run.py simulate --config configs/case1.json --out runs/case1
    # python run.py serve (host/port from SCMPC_HOST / SCMPC_PORT)
    sys.exit(main())
