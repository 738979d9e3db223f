"""Split manifests over converted MM-Fi trees (E*/S*/A*/ *.csi + *.ply).

Two protocols:
  subject: 40 subjects partitioned into 30 train / 2 val / 8 test by a
           seeded shuffle (the reference split is not published).
  room:    environments E01+E02 are train/val (2 seeded val subjects),
           E03+E04 are test.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

SUBJECT_SPLIT = (30, 2, 8)
ROOM1 = ("E01", "E02")
ROOM2 = ("E03", "E04")


class ManifestError(ValueError):
    pass


def _scan(root: Path) -> list[dict]:
    samples = []
    for csi in sorted(root.glob("E*/S*/A*/*.csi")):
        env, subject, action = csi.parts[-4:-1]
        ply = csi.with_suffix(".ply")
        entry = {
            "csi": str(csi.relative_to(root)),
            "environment": env,
            "subject": subject,
            "action": action,
            "frame": csi.stem,
        }
        if ply.exists():
            entry["ply"] = str(ply.relative_to(root))
        samples.append(entry)
    if not samples:
        raise ManifestError(f"{root}: no converted samples (E*/S*/A*/*.csi)")
    return samples


def build_manifest(dataset_root, protocol: str, seed: int = 0) -> dict:
    """Label every converted sample train/val/test; returns the manifest dict."""
    root = Path(dataset_root)
    samples = _scan(root)
    subjects = sorted({s["subject"] for s in samples})
    environments = sorted({s["environment"] for s in samples})
    rng = np.random.default_rng(seed)

    if protocol == "subject":
        n_train, n_val, n_test = SUBJECT_SPLIT
        if len(subjects) != sum(SUBJECT_SPLIT):
            raise ManifestError(
                f"subject protocol expects {sum(SUBJECT_SPLIT)} subjects, "
                f"found {len(subjects)}")
        order = [subjects[i] for i in rng.permutation(len(subjects))]
        split_of = {}
        split_of.update((s, "train") for s in order[:n_train])
        split_of.update((s, "val") for s in order[n_train : n_train + n_val])
        split_of.update((s, "test") for s in order[n_train + n_val :])
        for entry in samples:
            entry["split"] = split_of[entry["subject"]]
        subject_splits = {
            name: sorted(s for s, v in split_of.items() if v == name)
            for name in ("train", "val", "test")
        }
    elif protocol == "room":
        missing = [e for e in ROOM1 + ROOM2 if e not in environments]
        if missing:
            raise ManifestError(
                f"room protocol needs environments {list(ROOM1 + ROOM2)}; "
                f"missing {missing}")
        room1_subjects = sorted(
            {s["subject"] for s in samples if s["environment"] in ROOM1})
        if len(room1_subjects) < 3:
            raise ManifestError("room protocol needs at least 3 Room-1 subjects")
        val_idx = rng.choice(len(room1_subjects), size=2, replace=False)
        val_subjects = {room1_subjects[i] for i in val_idx}
        for entry in samples:
            if entry["environment"] in ROOM2:
                entry["split"] = "test"
            elif entry["subject"] in val_subjects:
                entry["split"] = "val"
            else:
                entry["split"] = "train"
        subject_splits = {
            "train": sorted(set(room1_subjects) - val_subjects),
            "val": sorted(val_subjects),
            "test": sorted({s["subject"] for s in samples
                            if s["environment"] in ROOM2}),
        }
    else:
        raise ManifestError(f"unknown protocol {protocol!r} (subject or room)")

    return {
        "protocol": protocol,
        "seed": seed,
        "subjects": subject_splits,
        "counts": {name: sum(1 for s in samples if s["split"] == name)
                   for name in ("train", "val", "test")},
        "samples": samples,
    }


def write_manifest(manifest: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
