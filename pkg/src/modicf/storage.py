"""On-disk formats: feature matrices, dataset directories, checkpoints, manifests.

The feature-matrix format (FMAT) is a fixed 16-byte header followed by
row-major little-endian float32 data. Dataset directories hold
interactions.tsv, modalities.json, one FMAT file per modality, and
optionally mask.json plus a heldout/ copy of the pre-mask features.
All writers are deterministic: identical inputs give identical bytes.
"""

import hashlib
import io
import json
import struct
import zipfile
from pathlib import Path

import numpy as np

from .dataset import (
    DataError,
    DatasetBundle,
    IndicatorMatrix,
    MaskPlan,
    ModalityFeatures,
    SPLIT_LABELS,
    SPLIT_NAMES,
    apply_mask_plan,
)

FMAT_MAGIC = b"FMAT"
FMAT_VERSION = 1
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def write_fmat(path, matrix):
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise FormatError("feature matrices must be 2-D")
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", FMAT_MAGIC, FMAT_VERSION, rows, cols))
        fh.write(matrix.tobytes())


def read_fmat(path):
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols = struct.unpack("<4sIII", raw[:16])
    if magic != FMAT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = 16 + 4 * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{path}: size {len(raw)} != expected {expected}")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(rows, cols).copy()


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_bundle(dir_path, bundle, plan=None, heldout_from=None):
    """Write a dataset directory; optionally the mask plan and pre-mask features."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    users, items = np.nonzero(bundle.interactions)
    for u, i in zip(users, items):
        lines.append(f"{u}\t{i}\t{SPLIT_LABELS[int(bundle.split[u, i])]}")
    (d / "interactions.tsv").write_text("\n".join(lines) + "\n")
    meta = []
    for mod in bundle.modalities:
        fname = f"{mod.name}.fmat"
        write_fmat(d / fname, mod.data)
        meta.append({"name": mod.name, "dim": mod.dim, "file": fname})
    _dump_json(d / "modalities.json", meta)
    if plan is not None:
        _dump_json(d / "mask.json", {
            "mr": plan.mr, "seed": plan.seed,
            "assignment": [list(map(int, a)) for a in plan.assignment],
        })
    if heldout_from is not None:
        hd = d / "heldout"
        hd.mkdir(exist_ok=True)
        for mod in heldout_from.modalities:
            write_fmat(hd / f"{mod.name}.fmat", mod.data)


def load_bundle(dir_path):
    """Read and validate a dataset directory."""
    d = Path(dir_path)
    inter_path = d / "interactions.tsv"
    mods_path = d / "modalities.json"
    for p in (inter_path, mods_path):
        if not p.exists():
            raise DataError(f"missing file: {p}")
    triples = []
    for ln, line in enumerate(inter_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in SPLIT_NAMES:
            raise DataError(f"{inter_path}:{ln}: expected 'user<TAB>item<TAB>split'")
        triples.append((int(parts[0]), int(parts[1]), SPLIT_NAMES[parts[2]]))
    if not triples:
        raise DataError("empty training split")
    n_users = max(t[0] for t in triples) + 1
    n_items = max(t[1] for t in triples) + 1
    interactions = np.zeros((n_users, n_items), dtype=np.uint8)
    split = np.full((n_users, n_items), -1, dtype=np.int8)
    for u, i, s in triples:
        interactions[u, i] = 1
        split[u, i] = s

    meta = json.loads(mods_path.read_text())
    modalities = []
    for entry in meta:
        data = read_fmat(d / entry["file"])
        if data.shape[1] != entry["dim"]:
            raise DataError(
                f"modality {entry['name']!r}: declared dim {entry['dim']} "
                f"!= matrix columns {data.shape[1]}")
        if data.shape[0] != n_items:
            raise DataError(
                f"modality {entry['name']!r}: {data.shape[0]} rows for {n_items} items")
        modalities.append(ModalityFeatures(entry["name"], entry["dim"], data))

    mask_path = d / "mask.json"
    if mask_path.exists():
        raw = json.loads(mask_path.read_text())
        plan = MaskPlan(mr=raw["mr"], seed=raw["seed"], assignment=raw["assignment"])
        entries = np.ones((n_items, len(modalities)), dtype=np.uint8)
        for i, mod in plan.cells():
            entries[i, mod] = 0
        indicator = IndicatorMatrix(entries)
    else:
        plan = None
        indicator = IndicatorMatrix(np.ones((n_items, len(modalities)), dtype=np.uint8))

    bundle = DatasetBundle(n_users=n_users, n_items=n_items, interactions=interactions,
                           modalities=modalities, indicator=indicator, split=split)
    bundle.validate()
    return bundle, plan


def load_heldout(dir_path, bundle, plan):
    """Pre-mask rows for the masked cells, from the heldout/ directory."""
    d = Path(dir_path) / "heldout"
    heldout = {}
    for m, mod in enumerate(bundle.modalities):
        p = d / f"{mod.name}.fmat"
        if not p.exists():
            raise DataError(f"missing heldout features: {p}")
        full = read_fmat(p)
        items = np.array(sorted(i for i, mm in plan.cells() if mm == m), dtype=np.int64)
        heldout[m] = (items, full[items])
    return heldout


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, opt_state, extra):
    """Single-file checkpoint: named arrays plus a JSON payload.

    params: dict name -> Tensor; opt_state: optimizer snapshot aligned with
    sorted(params); extra: JSON-serializable dict (config, epoch, rng states,
    completed features are passed as arrays inside extra_arrays).
    """
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    for i, m in enumerate(opt_state["m"]):
        arrays[f"adam_m/{i}"] = m
    for i, v in enumerate(opt_state["v"]):
        arrays[f"adam_v/{i}"] = v
    for k, v in extra.pop("arrays", {}).items():
        arrays[f"extra/{k}"] = v
    payload = dict(extra)
    payload["version"] = CHECKPOINT_VERSION
    payload["adam_t"] = opt_state["t"]
    payload["param_names"] = sorted(params.keys())
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json"),
                    json.dumps(payload, sort_keys=True))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            header = json.dumps({"dtype": str(arr.dtype), "shape": list(arr.shape)},
                                sort_keys=True).encode()
            zf.writestr(zipfile.ZipInfo(name + ".hdr"), header)
            zf.writestr(zipfile.ZipInfo(name + ".bin"),
                        arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    arrays = {}
    with zipfile.ZipFile(io.BytesIO(raw)) as zf:
        payload = json.loads(zf.read("meta.json"))
        if payload.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {payload.get('version')}")
        for info in zf.namelist():
            if not info.endswith(".hdr"):
                continue
            name = info[:-4]
            hdr = json.loads(zf.read(info))
            data = np.frombuffer(zf.read(name + ".bin"),
                                 dtype=np.dtype(hdr["dtype"]).newbyteorder("<"))
            arrays[name] = data.reshape(hdr["shape"]).copy()
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    n = len([k for k in arrays if k.startswith("adam_m/")])
    opt_state = {
        "t": payload["adam_t"],
        "m": [arrays[f"adam_m/{i}"] for i in range(n)],
        "v": [arrays[f"adam_v/{i}"] for i in range(n)],
    }
    extra_arrays = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return params, opt_state, payload, extra_arrays


# ---------------------------------------------------------------------------
# manifests and reports


def content_hash(paths):
    """Hex digest over the contents of the given files, order-independent."""
    digests = sorted(hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in paths)
    return hashlib.sha256("".join(digests).encode()).hexdigest()


def dataset_hash(dir_path):
    d = Path(dir_path)
    files = sorted(p for p in d.rglob("*") if p.is_file())
    return content_hash(files)


def write_manifest(path, manifest):
    _dump_json(path, manifest)


def read_manifest(path):
    return json.loads(Path(path).read_text())


def report_to_json(report):
    return {
        "k_values": report.k_values,
        "recall": {str(k): report.recall[k] for k in report.k_values},
        "precision": {str(k): report.precision[k] for k in report.k_values},
        "ndcg": {str(k): report.ndcg[k] for k in report.k_values},
        "fairness": {str(k): report.fairness[k] for k in report.k_values},
        "fairness_fuse": {str(k): report.fairness_fuse[k] for k in report.k_values},
        "exposure": {str(k): report.exposure[k] for k in report.k_values},
        "seed": report.seed,
        "config_id": report.config_id,
    }


def save_report(path, report):
    _dump_json(path, report_to_json(report))


def report_csv_lines(report):
    header = ["metric"] + [f"K={k}" for k in report.k_values]
    rows = [
        ["recall"] + [report.recall[k] for k in report.k_values],
        ["precision"] + [report.precision[k] for k in report.k_values],
        ["ndcg"] + [report.ndcg[k] for k in report.k_values],
        ["F"] + [report.fairness[k] for k in report.k_values],
        ["F_fuse"] + [report.fairness_fuse[k] for k in report.k_values],
    ]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(x) if x is not None else "" for x in row))
    return lines
