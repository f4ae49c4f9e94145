import json
import os

import pytest

ORACLE_PATH = os.path.join(os.path.dirname(__file__), "oracles", "frozen.json")


@pytest.fixture(scope="session")
def oracle():
    with open(ORACLE_PATH) as fh:
        return json.load(fh)
