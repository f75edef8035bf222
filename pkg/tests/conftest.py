import numpy as np
import pytest
import torch
from hypothesis import settings

from rcad.codec import CodecDescriptor
from rcad.data import BenchmarkConfig, build_benchmark
from rcad.diffusion import Denoiser, DenoiserConfig, make_schedule
from rcad.memory import ClassMemory, SemanticEmbedding, denoiser_fingerprint, make_spatial_mapper

settings.register_profile("rcad", deadline=None, derandomize=True)
settings.load_profile("rcad")

torch.set_num_threads(1)


def disc_mask(side=64, r=10, cy=32, cx=32):
    yy, xx = np.mgrid[:side, :side]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


@pytest.fixture(scope="session")
def small_bench():
    return build_benchmark(BenchmarkConfig(n_classes=3, n_train_per_class=16, n_test_normal=4, n_test_anom=4, master_seed=3))


@pytest.fixture(scope="session")
def codec():
    return CodecDescriptor()


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(200)


@pytest.fixture(scope="session")
def tiny_denoiser():
    torch.manual_seed(0)
    model = Denoiser(DenoiserConfig(widths=(8, 8, 8), cond_dim=64, time_dim=16, attn_dim=16, heads=2))
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


@pytest.fixture(scope="session")
def tiny_memory(tiny_denoiser, codec):
    rng = np.random.default_rng(0)
    masks = np.stack([disc_mask(r=8 + i, cy=28 + i, cx=30 + i) for i in range(8)])
    return ClassMemory(
        class_id=2,
        v=SemanticEmbedding(rng.normal(0, 0.02, (8, 64)).astype(np.float32)),
        mapper=make_spatial_mapper(32, 64, 64, 16 * 16 * 4, seed=0),
        stored_masks=masks,
        prompt_seed=0,
        prompt_len=4,
        codec=codec,
        meta={"format_version": 1, "mode": "both", "denoiser": denoiser_fingerprint(tiny_denoiser), "codec": codec.describe()},
    )


def tiny_run_config(**overrides):
    from dataclasses import replace

    from rcad.backbone import PretrainConfig
    from rcad.detector import DetectorConfig
    from rcad.harness import RunConfig

    cfg = RunConfig(
        benchmark=BenchmarkConfig(n_classes=3, n_train_per_class=8, n_test_normal=3, n_test_anom=3, master_seed=4),
        K=2,
        P=2,
        n_mask=2,
        per_class_replay=4,
        replay_steps=3,
        compress_steps=4,
        detector_steps=10,
        min_improvement=0.0,
        memory_budget=float("inf"),
        detector=DetectorConfig(widths=(4, 4, 4), gen_width=8, bottleneck=4),
        pretrain=PretrainConfig(
            steps=5,
            batch=4,
            min_improvement=0.0,
            probe_size=8,
            model=DenoiserConfig(widths=(8, 8, 8), time_dim=8, attn_dim=8, heads=1),
        ),
    )
    return replace(cfg, **overrides)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the session
# ---------------------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    n = marker.args[0]
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    ok = report.passed and report.when == "call"
    prev = _CRITERIA.get(n)
    if prev is None or prev[0]:
        _CRITERIA[n] = (ok and (prev is None or prev[0]), detail if prev is None else f"{prev[1]}; {detail}".strip("; "))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
