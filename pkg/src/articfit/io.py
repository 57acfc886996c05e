"""File formats: meshes, keypoints, voxel masks, series manifests, model containers.

All lengths on disk are millimetres. Binary payloads are little-endian.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import sparse

from .kinematics import KinematicTree, TemplateModel

CONTAINER_MAGIC = b"ARTICFIT"
CONTAINER_VERSION = "articfit-model/1"
VOXEL_VERSION = "articfit-voxels/1"


class ParseError(ValueError):
    """Malformed file; ``offset`` is the byte offset where parsing failed."""

    def __init__(self, msg, offset=None, path=None):
        where = f" (byte {offset})" if offset is not None else ""
        src = f"{path}: " if path else ""
        super().__init__(f"{src}{msg}{where}")
        self.offset = offset


class VersionError(ValueError):
    pass


def _finite(arr, what, path=None, offset=None):
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"non-finite values in {what}", offset, path)


# ---------------------------------------------------------------------------
# voxel masks and isosurfaces


@dataclasses.dataclass(frozen=True)
class VoxelMask:
    """Binary occupancy on a regular grid; ``data[i, j, k]`` sits at
    ``origin + (i, j, k) * spacing``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data).astype(bool)
        if data.ndim != 3:
            raise ValueError("mask must be 3-d")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError("spacing must be three positive numbers")
        origin = tuple(float(o) for o in self.origin)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self):
        return self.data.shape


class EmptySurface(ValueError):
    pass


def _taubin(verts, faces, iterations, lam=0.5, mu=-0.53):
    n = len(verts)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.concatenate([e, e[:, ::-1]])
    A = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    A.data[:] = 1.0
    deg = np.asarray(A.sum(1)).ravel()
    deg[deg == 0] = 1.0
    for _ in range(iterations):
        for s in (lam, mu):
            verts = verts + s * (A @ verts / deg[:, None] - verts)
    return verts


def signed_volume(verts, faces) -> float:
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces)
    return float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)


def extract_isosurface(volume, iso, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                       smooth_iters: int = 10):
    """Closed, outward-oriented isosurface of ``volume >= iso`` in world units.

    The volume is zero-padded (with the minimum value) so the surface closes at
    the array border, then Taubin-smoothed ``smooth_iters`` times.
    """
    from skimage.measure import marching_cubes as _mc

    vol = np.asarray(volume, dtype=np.float64)
    if not (vol.max() >= iso and vol.min() < iso):
        raise EmptySurface("volume has no crossing of the iso level")
    pad = np.pad(vol, 1, constant_values=min(vol.min(), iso - 1.0))
    verts, faces, _, _ = _mc(pad, level=iso, method="lewiner", allow_degenerate=False)
    verts = verts.astype(np.float64) - 1.0
    faces = faces.astype(np.int64)
    if len(faces) == 0:
        raise EmptySurface("empty surface")
    if signed_volume(verts, faces) < 0:
        faces = faces[:, ::-1].copy()
    if smooth_iters:
        verts = _taubin(verts, faces, smooth_iters)
    verts = verts * np.asarray(spacing, dtype=np.float64) + np.asarray(origin, dtype=np.float64)
    return verts, faces


def marching_cubes(mask: VoxelMask, iso: float = 0.5, smooth_iters: int = 10):
    """Surface mesh ``(vertices_mm, faces)`` of a binary voxel mask.

    Smoothing removes detail at the voxel scale; use ``smooth_iters=0`` for
    structures only a few voxels thick (a lone voxel would shrink to a point).
    """
    if not mask.data.any():
        raise EmptySurface("mask is empty")
    return extract_isosurface(mask.data.astype(np.float64), iso, mask.spacing, mask.origin,
                              smooth_iters)


def save_voxels(path, mask: VoxelMask):
    """JSON header ``path`` plus raw uint8 payload ``path + '.raw'``."""
    path = Path(path)
    raw = path.with_name(path.name + ".raw")
    header = {"version": VOXEL_VERSION, "dims": list(mask.dims), "spacing": list(mask.spacing),
              "origin": list(mask.origin), "dtype": "uint8", "order": "C", "data": raw.name}
    path.write_text(json.dumps(header, indent=2, sort_keys=True))
    raw.write_bytes(np.ascontiguousarray(mask.data, dtype=np.uint8).tobytes())


def load_voxels(path) -> VoxelMask:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad voxel header: {exc.msg}", exc.pos, path) from exc
    if header.get("version") != VOXEL_VERSION:
        raise VersionError(f"{path}: unsupported voxel version {header.get('version')!r}")
    dims = tuple(int(d) for d in header["dims"])
    payload = path.with_name(header["data"]).read_bytes()
    if len(payload) != int(np.prod(dims)):
        raise ParseError(f"voxel payload has {len(payload)} bytes, expected {int(np.prod(dims))}",
                         min(len(payload), int(np.prod(dims))), path)
    data = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    spacing, origin = np.asarray(header["spacing"], float), np.asarray(header["origin"], float)
    _finite(spacing, "spacing", path)
    _finite(origin, "origin", path)
    return VoxelMask(data, tuple(spacing), tuple(origin))


# ---------------------------------------------------------------------------
# meshes


def save_obj(path, vertices, faces=None):
    v = np.asarray(vertices, dtype=np.float64)
    lines = ["v " + " ".join(repr(float(c)) for c in row) for row in v]
    if faces is not None:
        lines += ["f " + " ".join(str(int(i) + 1) for i in row) for row in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path):
    verts, faces = [], []
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("utf-8", errors="replace").strip()
            try:
                if line.startswith("v "):
                    verts.append([float(x) for x in line.split()[1:4]])
                elif line.startswith("f "):
                    faces.append([int(tok.split("/")[0]) - 1 for tok in line.split()[1:4]])
            except ValueError as exc:
                raise ParseError(f"bad OBJ record {line[:40]!r}", offset, path) from exc
            offset += len(raw)
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    _finite(v, "vertices", path)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise ParseError("face index out of range", None, path)
    return v, f


def save_ply(path, vertices, faces=None):
    """Binary little-endian PLY with float64 vertices and int32 faces."""
    v = np.ascontiguousarray(vertices, dtype="<f8")
    f = None if faces is None else np.asarray(faces, dtype=np.int64)
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(v)}",
            "property double x", "property double y", "property double z"]
    if f is not None:
        head += [f"element face {len(f)}", "property list uchar int vertex_indices"]
    head.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        fh.write(v.tobytes())
        if f is not None and len(f):
            rec = np.zeros(len(f), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            rec["n"] = 3
            rec["idx"] = f
            fh.write(rec.tobytes())


def load_ply(path):
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ParseError("missing PLY header", 0, path)
    header = data[:end].decode("ascii").splitlines()
    body = end + len(b"end_header\n")
    if "format binary_little_endian 1.0" not in header:
        raise ParseError("only binary_little_endian PLY is supported", 0, path)
    nv = nf = 0
    for line in header:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
    need = body + nv * 24 + nf * 13
    if len(data) < need:
        raise ParseError(f"PLY truncated, expected {need} bytes", len(data), path)
    v = np.frombuffer(data, dtype="<f8", count=nv * 3, offset=body).reshape(nv, 3).copy()
    _finite(v, "vertices", path, body)
    f = np.zeros((0, 3), np.int64)
    if nf:
        rec = np.frombuffer(data, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=nf,
                            offset=body + nv * 24)
        if np.any(rec["n"] != 3):
            bad = int(np.argmax(rec["n"] != 3))
            raise ParseError("non-triangular face", body + nv * 24 + 13 * bad, path)
        f = rec["idx"].astype(np.int64)
        if f.min() < 0 or f.max() >= nv:
            raise ParseError("face index out of range", body + nv * 24, path)
    return v, f


def load_mesh(path):
    return load_ply(path) if str(path).endswith(".ply") else load_obj(path)


# ---------------------------------------------------------------------------
# keypoints and manifests


def save_keypoints(path, names, xyz, valid=None):
    xyz = np.asarray(xyz, dtype=np.float64)
    valid = np.ones(len(xyz), bool) if valid is None else np.asarray(valid, bool)
    recs = [{"name": n, "xyz": [float(c) for c in p], "valid": bool(ok)}
            for n, p, ok in zip(names, xyz, valid)]
    Path(path).write_text(json.dumps(recs, indent=1))


def load_keypoints(path):
    """Returns ``(names, xyz (M, 3), valid (M,))``; a missing ``valid`` means true."""
    text = Path(path).read_text()
    try:
        recs = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad keypoint JSON: {exc.msg}", exc.pos, path) from exc
    names, xyz, valid = [], [], []
    for r in recs:
        names.append(str(r["name"]))
        xyz.append([float(c) for c in r["xyz"]])
        valid.append(bool(r.get("valid", True)))
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    _finite(xyz, "keypoints", path)
    return names, xyz, np.asarray(valid, bool)


def save_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad JSON: {exc.msg}", exc.pos, path) from exc


# ---------------------------------------------------------------------------
# model container

_BLOBS = ("vertices", "faces", "skin_weights", "joint_regressor", "keypoint_regressor",
          "shape_basis", "pose_basis", "rest_pose")


def _model_blobs(model: TemplateModel) -> dict:
    blobs = {name: np.asarray(getattr(model, name), dtype=np.float64) for name in _BLOBS}
    if model.pose_prior is not None:
        blobs["prior_mean"] = model.pose_prior.mean
        blobs["prior_covariance"] = model.pose_prior.covariance
    return blobs


def model_to_bytes(model: TemplateModel, extra_blobs: Optional[dict] = None,
                   extra_header: Optional[dict] = None) -> bytes:
    blobs = _model_blobs(model)
    for k, v in (extra_blobs or {}).items():
        blobs[k] = np.asarray(v, dtype=np.float64)
    table, offset, payload = [], 0, []
    for name, arr in blobs.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        payload.append(buf)
        offset += len(buf)
    header = {
        "version": CONTAINER_VERSION,
        "dims": {"n_joints": model.tree.n_joints, "K": model.tree.K, "N": model.n_vertices,
                 "M": model.n_keypoints, "D_beta": model.n_shape},
        "tree": {"parents": [int(p) for p in model.tree.parents], "names": list(model.tree.names)},
        "keypoint_names": list(model.keypoint_names),
        "landmarks": model.landmarks,
        "planes": model.planes,
        "meta": model.meta,
        "blobs": table,
    }
    if extra_header:
        header["extra"] = extra_header
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CONTAINER_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(payload)


def save_model(path, model: TemplateModel, extra_blobs=None, extra_header=None):
    Path(path).write_bytes(model_to_bytes(model, extra_blobs, extra_header))


def load_model(path, return_extra: bool = False):
    """Load a container written by :func:`save_model`."""
    from .energies import PosePrior

    data = Path(path).read_bytes()
    if not data.startswith(CONTAINER_MAGIC):
        raise ParseError("not a model container (bad magic)", 0, path)
    if len(data) < 16:
        raise ParseError("truncated container header", len(data), path)
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError("bad container header", 16, path) from exc
    if header.get("version") != CONTAINER_VERSION:
        raise VersionError(f"{path}: unsupported container version {header.get('version')!r}")
    base = 16 + hlen
    blobs = {}
    for b in header["blobs"]:
        n = int(np.prod(b["shape"])) * 8
        if b["nbytes"] != n:
            raise ParseError(f"blob {b['name']!r} declares {b['nbytes']} bytes for shape "
                             f"{b['shape']}", base + b["offset"], path)
        start = base + b["offset"]
        if start + n > len(data):
            raise ParseError(f"blob {b['name']!r} is truncated", len(data), path)
        arr = np.frombuffer(data, dtype="<f8", count=n // 8, offset=start).reshape(b["shape"])
        _finite(arr, f"blob {b['name']!r}", path, start)
        blobs[b["name"]] = arr.copy()
    dims = header["dims"]
    expect = {"vertices": (dims["N"], 3), "faces": None,
              "skin_weights": (dims["n_joints"], dims["N"]),
              "joint_regressor": (dims["n_joints"], dims["N"]),
              "keypoint_regressor": (dims["M"], dims["N"]),
              "shape_basis": (3 * dims["N"], dims["D_beta"]),
              "pose_basis": (3 * dims["N"], 9 * dims["K"])}
    for name, shape in expect.items():
        if name not in blobs:
            raise ParseError(f"missing blob {name!r}", None, path)
        if shape is not None and blobs[name].shape != tuple(shape):
            raise ParseError(f"blob {name!r} has shape {blobs[name].shape}, header dims "
                             f"imply {tuple(shape)}", None, path)
    prior = None
    if "prior_mean" in blobs:
        prior = PosePrior(blobs["prior_mean"], blobs["prior_covariance"])
    tree = KinematicTree(header["tree"]["parents"], header["tree"]["names"])
    model = TemplateModel(
        tree=tree, vertices=blobs["vertices"], faces=blobs["faces"].astype(np.int64),
        skin_weights=blobs["skin_weights"], joint_regressor=blobs["joint_regressor"],
        keypoint_regressor=blobs["keypoint_regressor"], shape_basis=blobs["shape_basis"],
        pose_basis=blobs["pose_basis"], keypoint_names=tuple(header["keypoint_names"]),
        rest_pose=blobs["rest_pose"], landmarks=header["landmarks"], planes=header["planes"],
        pose_prior=prior, meta=header["meta"])
    if return_extra:
        known = set(_BLOBS) | {"prior_mean", "prior_covariance"}
        extra = {k: v for k, v in blobs.items() if k not in known}
        return model, extra, header.get("extra", {})
    return model


def file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(os.path.basename(p).encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# dataset directories

DATASET_VERSION = "articfit-dataset/1"


def save_dataset(root, subjects, prior_model=None, config: Optional[dict] = None,
                 truth_model=None, splits=None):
    """Write observations under ``root/subjects`` and any ground truth under
    ``root/truth`` (kept out of the manifest's subject entries)."""
    root = Path(root)
    (root / "subjects").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in subjects:
        d = root / "subjects" / s.subject_id
        d.mkdir(exist_ok=True)
        frames = []
        for fr in s.frames:
            stem = f"f{fr.index:04d}"
            save_ply(d / f"{stem}.ply", fr.vertices)
            names = [f"kp{m}" for m in range(len(fr.keypoints))]
            if prior_model is not None:
                names = list(prior_model.keypoint_names)
            save_keypoints(d / f"{stem}.kp.json", names, fr.keypoints, fr.valid)
            frames.append({"index": int(fr.index), "timestamp": float(fr.timestamp),
                           "points": f"subjects/{s.subject_id}/{stem}.ply",
                           "keypoints": f"subjects/{s.subject_id}/{stem}.kp.json"})
        entries.append({"id": s.subject_id, "frames": frames})
    manifest = {"version": DATASET_VERSION, "subjects": entries, "config": config or {}}
    if prior_model is not None:
        save_model(root / "prior_model.afm", prior_model)
        manifest["prior_model"] = "prior_model.afm"
    if splits is not None:
        manifest["splits"] = splits
    if truth_model is not None or any(s.truth is not None for s in subjects):
        tdir = root / "truth"
        tdir.mkdir(exist_ok=True)
        if truth_model is not None:
            save_model(tdir / "true_model.afm", truth_model)
        for s in subjects:
            if s.truth is None:
                continue
            save_json(tdir / f"{s.subject_id}.json", {
                "beta": s.truth.beta.tolist(), "thetas": s.truth.thetas.tolist(),
                "transl": s.truth.transl.tolist(), "canonical": s.truth.canonical.tolist()})
    save_json(root / "manifest.json", manifest)
    return manifest


def load_dataset(root, with_truth: bool = False):
    """Returns ``(subjects, prior_model_or_None, manifest)``."""
    from .synth import FrameObservation, SubjectSeries, SubjectTruth

    root = Path(root)
    manifest = load_json(root / "manifest.json")
    if manifest.get("version") != DATASET_VERSION:
        raise VersionError(f"{root}: unsupported dataset version {manifest.get('version')!r}")
    subjects = []
    for entry in manifest["subjects"]:
        frames = []
        for fr in entry["frames"]:
            pts, _ = load_ply(root / fr["points"])
            _, kps, valid = load_keypoints(root / fr["keypoints"])
            frames.append(FrameObservation(pts, kps, valid, int(fr["index"]),
                                           float(fr.get("timestamp", fr["index"]))))
        truth = None
        tfile = root / "truth" / f"{entry['id']}.json"
        if with_truth and tfile.exists():
            t = load_json(tfile)
            truth = SubjectTruth(np.asarray(t["beta"], float), np.asarray(t["thetas"], float),
                                 np.asarray(t["transl"], float), np.asarray(t["canonical"], float))
        subjects.append(SubjectSeries(entry["id"], frames, truth))
    prior = load_model(root / manifest["prior_model"]) if "prior_model" in manifest else None
    return subjects, prior, manifest


def save_fits(path, fits):
    save_json(path, {"version": "articfit-fits/1", "subjects": [
        {"id": s.subject_id, "frames": [int(f.index) for f in s.frames],
         "thetas": np.asarray(s.thetas).tolist(), "transl": np.asarray(s.transl).tolist(),
         "canonical": np.asarray(s.canonical).tolist(),
         "beta": None if s.beta is None else np.asarray(s.beta).tolist()} for s in fits]})


def load_fits(path) -> dict:
    data = load_json(path)
    if data.get("version") != "articfit-fits/1":
        raise VersionError(f"{path}: unsupported fits version {data.get('version')!r}")
    out = {}
    for s in data["subjects"]:
        arrs = {k: np.asarray(s[k], dtype=np.float64) for k in ("thetas", "transl", "canonical")}
        for k, a in arrs.items():
            _finite(a, k, path)
        arrs["frames"] = list(s["frames"])
        arrs["beta"] = None if s.get("beta") is None else np.asarray(s["beta"], float)
        out[s["id"]] = arrs
    return out
