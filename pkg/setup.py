#!/usr/bin/env python3
"""
Setup script for the casual-video SLAM backend.

Installs the numerical stack, creates the .env file and the data/runs
working directories, runs the installation check and, with --smoke,
simulates and reconstructs a short preset world end to end.
"""

import argparse
import os
import shutil
import subprocess
import sys

WORK_DIRS = ("data", "runs")
SMOKE_WORLD = "corridor_forward"


def print_header():
    """Print setup header."""
    print("🚀 Casual SLAM Setup")
    print("=" * 50)


def check_python_version():
    """Require Python 3.9+ (numpy 1.26 / scipy 1.13 wheels)."""
    print("🐍 Checking Python version...")
    version = sys.version_info
    if version < (3, 9):
        print(f"❌ Python {version.major}.{version.minor} detected, 3.9 or higher is required")
        return False
    print(f"✅ Python {version.major}.{version.minor}.{version.micro}")
    return True


def install_dependencies(skip: bool):
    """pip install -r requirements.txt unless skipped."""
    print("\n📦 Installing numerical stack...")
    if skip:
        print("⏭️  Skipped (--no-install)")
        return True
    if not os.path.exists("requirements.txt"):
        print("❌ requirements.txt not found; run from the project root")
        return False
    try:
        subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])
    except subprocess.CalledProcessError as e:
        print(f"❌ pip failed with exit code {e.returncode}")
        return False
    print("✅ numpy, scipy, pandas, python-dotenv and hypothesis installed")
    return True


def setup_env_file():
    """Create .env from .env.example; an existing .env is left alone."""
    print("\n⚙️ Setting up process settings...")
    if os.path.exists(".env"):
        print("✅ Keeping existing .env file")
        return True
    if not os.path.exists(".env.example"):
        print("❌ .env.example not found")
        return False
    shutil.copy(".env.example", ".env")
    print("✅ Created .env (SLAM_LOG_FILE, SLAM_LOG_LEVEL, SLAM_DEFAULT_SEED)")
    return True


def create_work_dirs():
    """Bundles go to data/, reconstructions to runs/."""
    print("\n📁 Creating working directories...")
    for name in WORK_DIRS:
        os.makedirs(name, exist_ok=True)
        print(f"✅ {name}/")
    return True


def run_installation_check():
    print("\n🧪 Running installation check...")
    result = subprocess.run([sys.executable, "test_installation.py"], capture_output=True, text=True)
    if result.returncode == 0:
        print("✅ Installation check passed")
        return True
    print("❌ Installation check failed:")
    print(result.stdout)
    if result.stderr:
        print(result.stderr)
    return False


def run_smoke_test():
    """Simulate the smallest preset, reconstruct it and score it against ground truth."""
    print(f"\n🌍 Smoke run on '{SMOKE_WORLD}'...")
    bundle = os.path.join("data", SMOKE_WORLD)
    out = os.path.join("runs", SMOKE_WORLD)
    steps = [
        ["simulate", "--world", SMOKE_WORLD, "--out", bundle],
        ["run", "--bundle", bundle, "--out", out],
        ["eval", "--est", os.path.join(out, "traj_est.txt"), "--ref", os.path.join(bundle, "gt_traj.txt")],
    ]
    for step in steps:
        result = subprocess.run([sys.executable, "slam.py"] + step, capture_output=True, text=True)
        if result.returncode != 0:
            print(f"❌ slam.py {step[0]} exited with {result.returncode}")
            print(result.stdout[-2000:])
            return False
        print(f"✅ slam.py {step[0]}")
    return True


def print_next_steps():
    """Print next steps for the user."""
    print("\n🎉 Setup completed successfully!")
    print("\n📝 Next Steps:")
    print("1. Generate a synthetic world with a loop:")
    print("   python slam.py simulate --world city_loop --out data/city --seed 1")
    print("")
    print("2. Reconstruct it:")
    print("   python slam.py run --bundle data/city --out runs/city")
    print("")
    print("3. Evaluate against ground truth:")
    print("   python slam.py eval --est runs/city/traj_est.txt --ref data/city/gt_traj.txt")
    print("")
    print("📖 For detailed usage instructions, see QUICKSTART.md")


def main(argv=None):
    """Main setup function."""
    parser = argparse.ArgumentParser(description="Set up the casual-video SLAM backend")
    parser.add_argument("--no-install", action="store_true", help="Skip pip install")
    parser.add_argument("--smoke", action="store_true", help="Simulate and reconstruct a preset world afterwards")
    args = parser.parse_args(argv)

    print_header()
    if not check_python_version():
        return 1
    if not install_dependencies(args.no_install):
        return 1
    if not setup_env_file():
        return 1
    create_work_dirs()

    if not run_installation_check():
        print("⚠️  Setup completed but the installation check failed")
        return 1
    if args.smoke and not run_smoke_test():
        return 1

    print_next_steps()
    return 0


if __name__ == "__main__":
    sys.exit(main())
