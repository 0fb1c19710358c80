import csv
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from cxr_triage.classes import BACTERIAL, COVID, NORMAL, VIRAL

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def save_gray(path, arr):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8), mode="L").save(path)
    return path


def blob_image(rng, size=32, bright=False):
    """Dark noisy background; ``bright`` adds a centered disk (flip-invariant)."""
    img = rng.normal(60, 12, size=(size, size))
    if bright:
        yy, xx = np.mgrid[:size, :size]
        img[(yy - size / 2) ** 2 + (xx - size / 2) ** 2 < (size / 4) ** 2] += 150
    return img


@pytest.fixture
def sources(tmp_path):
    """Tiny COVID + pneumonia source trees in the layouts the ingester expects."""
    rng = np.random.default_rng(0)
    covid = tmp_path / "covid"
    rows = []
    for p in range(6):
        for k in range(2):
            fn = f"c{p}_{k}.png"
            save_gray(covid / "images" / fn, blob_image(rng))
            rows.append({"patientid": str(p), "finding": "Pneumonia/Viral/COVID-19", "view": "PA",
                         "modality": "X-ray", "folder": "images", "filename": fn})
    save_gray(covid / "images" / "lat.png", blob_image(rng))
    rows.append({"patientid": "0", "finding": "COVID-19", "view": "L", "modality": "X-ray",
                 "folder": "images", "filename": "lat.png"})
    rows.append({"patientid": "9", "finding": "COVID-19", "view": "AP", "modality": "X-ray",
                 "folder": "images", "filename": "missing.png"})
    save_gray(covid / "images" / "sars.png", blob_image(rng))
    rows.append({"patientid": "10", "finding": "SARS", "view": "PA", "modality": "X-ray",
                 "folder": "images", "filename": "sars.png"})
    with open(covid / "metadata.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)

    pneu = tmp_path / "pneumonia"
    for split in ("train", "test"):
        for p in range(5):
            save_gray(pneu / split / "NORMAL" / f"IM-{split}{p:03d}-0001.jpeg", blob_image(rng))
            save_gray(pneu / split / "PNEUMONIA" / f"person{p}{split}_bacteria_1.jpeg", blob_image(rng))
            save_gray(pneu / split / "PNEUMONIA" / f"person{p}{split}_bacteria_2.jpeg", blob_image(rng))
            save_gray(pneu / split / "PNEUMONIA" / f"person{p + 50}{split}_virus_1.jpeg", blob_image(rng))
    return covid, pneu


def expected_source_counts():
    # covid: 6 patients x 2 frontal; pneumonia: 2 splits x 5 patients
    return {COVID: 12, NORMAL: 10, BACTERIAL: 20, VIRAL: 10}


def separable_records(root, n_per_class=20, size=32, seed=0):
    """Bright-disk COVID images against dark Normal ones; returns ImageRecords."""
    from cxr_triage.dataset import ImageRecord
    rng = np.random.default_rng(seed)
    recs = []
    for label, bright in ((NORMAL, False), (COVID, True)):
        for i in range(n_per_class):
            p = save_gray(Path(root) / label / f"{i}.png", blob_image(rng, size, bright))
            recs.append(ImageRecord(str(p), f"{label}{i}", label))
    return recs


def two_class_config(labels):
    from cxr_triage.classes import ClassConfig
    from cxr_triage.loss import class_config_with_weights
    cfg = ClassConfig(classes=(NORMAL, COVID), sampling_ratio=(1, 1))
    return class_config_with_weights(cfg, labels)
