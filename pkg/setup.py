import os
from pathlib import Path

def setup_coagstat():
    """Initial setup for the stationary coagulation solver."""

    # Output and configuration directories
    directories = [
        "./configs",
        "./runs",
        "./runs/verify",
    ]

    for dir in directories:
        Path(dir).mkdir(parents=True, exist_ok=True)

    # Environment file template
    env_template = """# Worker threads for the pair sums (results do not depend on it)
COAGSTAT_THREADS=1

# DEBUG, INFO, WARNING or ERROR
COAGSTAT_LOG_LEVEL=WARNING"""

    if not os.path.exists('.env'):
        with open('.env', 'w') as f:
            f.write(env_template.strip() + "\n")
        print("Created .env file - adjust the thread count if you like")

    if not any(Path("./configs").glob("*.json")):
        print("⚠️  ./configs is empty - add a run configuration before solving")

    print("""
    Setup complete! Next steps:
    1. Install dependencies: pip install -r requirements.txt
    2. Run the property suites: python coag_cli.py verify --suite all --out runs/verify
    3. Solve a configuration: python coag_cli.py run --config configs/constant_kernel.json --out runs/constant
    4. Run the tests: pytest
    """)

if __name__ == "__main__":
    setup_coagstat()
