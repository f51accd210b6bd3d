"""Synthetic dataset generation and manifest handling.

A manifest lists volumes (with masks and true poses) and pairs. The first
volume of each subject is its reference at the identity pose; every other
volume of the subject is paired with it, and its transform maps the
reference onto it.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import data, geometry
from .training import Pair

MANIFEST_FORMAT = "eqtrack-manifest/1"


def generate(out_dir, seed=0, count=1, size=32, kind="blobs", subjects=1, phantom_seed=None,
             max_angle_deg=30.0, max_shift_mm=6.0, voxel_size=data.DEFAULT_VOXEL_MM):
    """Write ``count`` volumes per subject plus a manifest; returns the manifest path."""
    if count < 1 or subjects < 1:
        raise ValueError("count and subjects must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    pose_rng = np.random.default_rng([seed, 1])
    base_seed = seed if phantom_seed is None else phantom_seed
    entries, pairs = [], []
    for s in range(subjects):
        subj = data.make_subject([base_seed, s], size, kind, voxel_size)
        ref_index = len(entries)
        for i in range(count):
            stem = f"s{s:02d}_v{i:04d}"
            if i == 0:
                t = geometry.RigidTransform()
                vol, mask = subj.volume, subj.mask
            else:
                t = geometry.pose_sample(pose_rng, max_angle_deg, max_shift_mm)
                vol, mask = subj.posed(t)
            data.save_volume(os.path.join(out_dir, stem), vol)
            data.save_volume(os.path.join(out_dir, stem + "_mask"), vol.with_data(mask.astype(np.float64)))
            t.save(os.path.join(out_dir, stem + "_pose.json"))
            entries.append({"volume": stem + ".json", "mask": stem + "_mask.json",
                            "transform": stem + "_pose.json", "subject": s})
            if i > 0:
                pairs.append({"fixed": ref_index, "moving": len(entries) - 1})
    doc = {"format": MANIFEST_FORMAT, "seed": seed, "size": size, "kind": kind,
           "voxel_size_mm": voxel_size, "entries": entries, "pairs": pairs}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return path


def load_manifest(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not an eqtrack manifest")
    doc["_root"] = os.path.dirname(os.path.abspath(path))
    return doc


def _resolve(root, rel):
    return rel if os.path.isabs(rel) else os.path.join(root, rel)


def load_pairs(manifest):
    """Pairs with volumes, masks, and the relative transform moving = T o fixed."""
    doc = load_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else manifest
    root = doc["_root"]
    cache = {}

    def entry(i):
        if i not in cache:
            e = doc["entries"][i]
            vol = data.load_volume(_resolve(root, e["volume"]))
            mask = data.load_volume(_resolve(root, e["mask"])).data > 0.5 if e.get("mask") else None
            pose = geometry.RigidTransform.load(_resolve(root, e["transform"])) if e.get("transform") else None
            cache[i] = (vol, mask, pose)
        return cache[i]

    out = []
    for p in doc["pairs"]:
        fa, ma, ta = entry(p["fixed"])
        fb, mb, tb = entry(p["moving"])
        t = tb.compose(ta.inverse()) if ta is not None and tb is not None else None
        out.append(Pair(fa, fb, t, ma, mb))
    return out
