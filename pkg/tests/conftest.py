import numpy as np
import pytest
import torch

from stnet.backbone import StyleGANBackbone
from stnet.st_discriminator import StyleTextureDiscriminator
from stnet.synthetic import make_corpus

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))


def tiny_backbone(seed=0, **kw):
    params = dict(z_dim=32, w_dim=32, mapping_layers=2, channels=(16, 16, 8, 8),
                  disc_channels=(8, 8, 8), random_state=seed)
    params.update(kw)
    return StyleGANBackbone(**params).initialize()


def tiny_dst(seed=0, **kw):
    params = dict(feature_dim=32, texture_dim=16, hidden_dim=32, widths=(8, 8, 8), random_state=seed)
    params.update(kw)
    return StyleTextureDiscriminator(**params).initialize().freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_corpus():
    upper, lower, pairs, outfits = make_corpus(48, 32, seed=3)
    U = np.stack([upper[u] for u, _ in pairs])
    L = np.stack([lower[l] for _, l in pairs])
    return U, L, pairs


# acceptance reporting ----------------------------------------------------

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if report.failed:
        msg = str(report.longrepr.reprcrash.message) if hasattr(report.longrepr, "reprcrash") else "error"
        detail = f"{detail}; {msg.splitlines()[0]}" if detail else msg.splitlines()[0]
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    if report.when == "call" or status != "PASS":
        _ACCEPTANCE[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] {number}. {title}" + (f" :: {detail}" if detail else ""))
