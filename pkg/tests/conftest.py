import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedgbm.data import load_table, make_synthetic  # noqa: E402
from fedgbm.experiments import make_views  # noqa: E402
from fedgbm.phe import PaillierBackend, keygen, null_cipher_backend  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
ADULT = ROOT / "data" / "adult_a9a.libsvm.gz"

# criterion number -> (passed, detail); printed once at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def keypair512():
    return keygen(512, 7)


@pytest.fixture(scope="session")
def paillier512(keypair512):
    return PaillierBackend(keypair512.public_key, keypair512.private_key)


@pytest.fixture(scope="session")
def null_backend():
    return null_cipher_backend(allow_insecure=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_views():
    """600 synthetic rows, 10/10 feature split, 80/20 split."""
    return make_views(make_synthetic(600, 20, 3), 10, 3)


@pytest.fixture(scope="session")
def adult():
    if not ADULT.exists():
        pytest.skip(f"{ADULT} missing; run scripts/make_a9a.py")
    return load_table(ADULT, "libsvm")


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
