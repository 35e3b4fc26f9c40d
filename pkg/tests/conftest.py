import pytest

from kgaml.ingest import AnnotationRecord, TransactionRecord
from kgaml.synth import default_specs, generate_corpus


def make_tx(tx_id="t1", ts=1_600_000_000, src="a", dst="b", value=100.0, direction="out", coin="btc",
            label=0, split=None, anomaly_type=None, **extras):
    year = 2020
    return TransactionRecord(tx_id, ts, src, dst, value, direction, src == dst, coin, year, label,
                             anomaly_type, dict(extras), split=split)


def make_ann(tx_id="t1", at="mixing", sf="coinjoin", st="tornado", kws=("relay",), split="train"):
    return AnnotationRecord(tx_id, at, sf, st, tuple(kws), "", split=split)


@pytest.fixture
def tx_factory():
    return make_tx


@pytest.fixture
def ann_factory():
    return make_ann


@pytest.fixture(scope="session")
def small_corpus():
    """1,000-transaction corpus, 2% anomalous; shared read-only across tests."""
    return generate_corpus(default_specs(1000, 0.02), seed=3)


# criterion number -> passed, filled by test_acceptance.report
CRITERIA: dict[int, bool] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if CRITERIA[n] else 'FAIL'}")
