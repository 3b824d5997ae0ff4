import numpy as np
import pytest

from ccat.frontend import FeatureConfig, extract_features
from ccat.model import ModelConfig
from ccat.synthetic import snr_clip
from ccat.training import Example

# A network small enough to train in seconds on 16-band mel features with C=5.
TINY_FEATURE = FeatureConfig(kind="MEL", mel_bands=16, context_half_width=2)
TINY_MODEL = ModelConfig("MEL", 5, 4, 3, 1, 16, 2, 8, 8, 1, 0.0)


def snr_examples(seeds, seconds=0.5, feature=TINY_FEATURE):
    out = []
    for s in seeds:
        clip = snr_clip(s, seconds)
        ct = extract_features(clip.wave, feature)
        out.append(Example(ct.data.astype(np.float32), clip.mos, f"u{s}"))
    return out


@pytest.fixture(scope="session")
def tiny_split():
    return snr_examples(range(12)), snr_examples(range(100, 106))


# Filled by tests/test_acceptance.py: criterion number -> PASS/FAIL line.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
