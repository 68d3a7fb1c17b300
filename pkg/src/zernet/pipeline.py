"""Experiment bundles: meshes, labels, samples, patches and coefficient tensors.

A bundle directory looks like::

    manifest.json
    meshes/<name>/mesh.off
    meshes/<name>/input.csv          per-vertex network input
    meshes/<name>/target.csv         labels or regression targets (optional)
    meshes/<name>/samples.zar        surface samples (face, barycentric)
    meshes/<name>/patches_<i>.zar    geodesic patches for radius r0[i]
    meshes/<name>/tensor_<i>.zpt     input field coefficients for r0[i]

``manifest.json`` records the effective configuration, its hash, and a
SHA-256 for every artifact file; loading verifies all of them.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
import hashlib
import json
import os
from pathlib import Path
import shutil

import numpy as np

from . import containers
from .decomposition import decomposition_operator, field_to_patch_tensor
from .errors import BundleFormatError, ConfigError, CorruptionError, OverwriteError, ZernetError
from .expmap import (GRAPH_REACH, PATCH_METHODS, GeodesicPatch, build_neighbor_graph,
                     compute_patches, default_sample_count)
from .mesh import (SurfaceSamples, TangentFrame, TriMesh, load_field_csv, load_mesh,
                   normalize_area, save_field_csv, save_mesh, uniform_sample_surface)
from .network import Network, ModelSpec, PreparedMesh

BUNDLE_FORMAT = "zernet-bundle"
BUNDLE_VERSION = 1
CHECKPOINT_KIND = "zernet-checkpoint"


@dataclass(frozen=True)
class BundleConfig:
    """Preprocessing settings.

    ``target_area`` of ``None`` skips area normalization.  ``n_samples``
    of ``None`` picks a count giving about ``samples_per_patch`` surface
    samples per disk of the smallest radius.  Regression targets are
    multiplied by ``scale ** target_scale_exponent`` after normalization.
    """

    r0: tuple = (0.3,)
    k: int = 21
    s: int = 4
    target_area: float = None
    n_samples: int = None
    samples_per_patch: int = 80
    min_samples: int = 50
    seed: int = 0
    input: str = "xyz"
    task: str = "classification"
    target_scale_exponent: float = 0.0
    method: str = "unfold"
    graph_reach: str = "edge"

    def __post_init__(self):
        r0 = (self.r0,) if np.isscalar(self.r0) else tuple(self.r0)
        object.__setattr__(self, "r0", tuple(float(r) for r in r0))
        if not self.r0 or min(self.r0) <= 0:
            raise ConfigError("r0 must be one or more positive radii")
        if self.input not in ("xyz", "field"):
            raise ConfigError("input must be 'xyz' or 'field'")
        if self.task not in ("classification", "regression"):
            raise ConfigError("task must be 'classification' or 'regression'")
        if self.method not in PATCH_METHODS or self.graph_reach not in GRAPH_REACH:
            raise ConfigError(f"method must be one of {PATCH_METHODS}, graph_reach one of {GRAPH_REACH}")
        if self.k < 1 or self.s < 1 or self.min_samples < 0:
            raise ConfigError("k and s must be >= 1, min_samples >= 0")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown bundle config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["r0"] = list(self.r0)
        return d

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(eq=False)
class MeshArtifacts:
    name: str
    mesh: TriMesh
    scale: float
    samples: SurfaceSamples
    x: np.ndarray
    target: np.ndarray = None
    patches: dict = field(default_factory=dict)  # r0 -> list of patch or None
    patch_failures: dict = field(default_factory=dict)  # r0 -> {vertex: reason}
    tensors: dict = field(default_factory=dict)  # r0 -> PatchTensor
    source: str = ""

    def prepared(self, keys):
        """:class:`PreparedMesh` with decomposition operators for ``(r0, k)`` keys."""
        ops = {}
        for r0, k in keys:
            if r0 not in self.patches:
                raise ZernetError(f"{self.name}: bundle has no patches for r0={r0}")
            ops[(r0, k)] = decomposition_operator(self.patches[r0], self.mesh.n_vertices, k)
        target = self.target
        if target is not None and target.shape[1] == 1:
            target = target[:, 0]
        return PreparedMesh(self.x, ops, target, self.name)


@dataclass(eq=False)
class ExperimentBundle:
    config: BundleConfig
    meshes: list

    def prepared(self, keys):
        return [m.prepared(keys) for m in self.meshes]

    def __eq__(self, other):
        if not isinstance(other, ExperimentBundle) or self.config != other.config:
            return False
        return all(_artifacts_equal(a, b) for a, b in zip(self.meshes, other.meshes)) and \
            len(self.meshes) == len(other.meshes)


def _patches_equal(a, b):
    if (a is None) != (b is None):
        return False
    if a is None:
        return True
    return (a.center == b.center and a.r0 == b.r0
            and all(np.array_equal(getattr(a, f), getattr(b, f))
                    for f in ("node", "r", "theta", "interp_idx", "interp_w"))
            and np.array_equal(a.frame.e1, b.frame.e1) and np.array_equal(a.frame.normal, b.frame.normal))


def _artifacts_equal(a, b):
    same = (a.name == b.name and a.scale == b.scale
            and np.array_equal(a.mesh.vertices, b.mesh.vertices)
            and np.array_equal(a.mesh.faces, b.mesh.faces)
            and np.array_equal(a.x, b.x)
            and np.array_equal(a.samples.face, b.samples.face)
            and np.array_equal(a.samples.barycentric, b.samples.barycentric)
            and ((a.target is None and b.target is None)
                 or (a.target is not None and b.target is not None and np.array_equal(a.target, b.target)))
            and set(a.patches) == set(b.patches))
    if not same:
        return False
    for r0 in a.patches:
        if not all(_patches_equal(p, q) for p, q in zip(a.patches[r0], b.patches[r0])):
            return False
        if not np.array_equal(a.tensors[r0].data, b.tensors[r0].data):
            return False
    return True


def _mesh_name(path, used):
    base = Path(path).stem
    name, i = base, 1
    while name in used:
        name, i = f"{base}_{i}", i + 1
    used.add(name)
    return name


def prepare_mesh(mesh, config, name="mesh", target=None, input_field=None, seed=None):
    """Run normalization, sampling, patch extraction and decomposition on one mesh."""
    seed = config.seed if seed is None else seed
    scale = 1.0
    if config.target_area is not None:
        mesh, scale = normalize_area(mesh, config.target_area)
    if config.input == "xyz":
        x = mesh.vertices.copy()
    else:
        if input_field is None:
            raise ConfigError(f"{name}: input='field' needs an input field file")
        x = np.asarray(input_field, dtype=float).reshape(mesh.n_vertices, -1)
    if target is not None:
        target = np.asarray(target, dtype=float).reshape(mesh.n_vertices, -1)
        if config.task == "regression" and config.target_scale_exponent:
            target = target * scale ** config.target_scale_exponent
    n_samples = config.n_samples or default_sample_count(mesh, min(config.r0), config.samples_per_patch)
    samples = uniform_sample_surface(mesh, n_samples, seed)
    graph = build_neighbor_graph(mesh, samples, config.graph_reach)
    art = MeshArtifacts(name, mesh, scale, samples, x, target)
    for r0 in config.r0:
        patches, failed = compute_patches(mesh, graph, r0, max(config.min_samples, config.k),
                                          seed, config.method)
        art.patches[r0] = patches
        art.patch_failures[r0] = failed
        art.tensors[r0] = field_to_patch_tensor(mesh, patches, x, config.k)
    return art


def prepare(mesh_paths, label_paths=None, config=None, field_paths=None, threads=0):
    """Build an :class:`ExperimentBundle` from mesh files.

    ``label_paths`` and ``field_paths``, when given, align with
    ``mesh_paths`` (entries may be ``None``).  Every mesh is attempted;
    failures are collected and raised together.
    """
    config = config or BundleConfig()
    mesh_paths = [Path(p) for p in mesh_paths]
    label_paths = list(label_paths) if label_paths is not None else [None] * len(mesh_paths)
    field_paths = list(field_paths) if field_paths is not None else [None] * len(mesh_paths)
    if len(label_paths) != len(mesh_paths) or len(field_paths) != len(mesh_paths):
        raise ConfigError("label/field path lists must align with mesh paths")
    used = set()
    names = [_mesh_name(p, used) for p in mesh_paths]

    def job(i):
        path, name = mesh_paths[i], names[i]
        if label_paths[i] is not None and not Path(label_paths[i]).exists():
            raise ZernetError(f"{name}: label file {label_paths[i]} not found")
        mesh = load_mesh(path)
        target = load_field_csv(label_paths[i], mesh.n_vertices) if label_paths[i] else None
        fld = load_field_csv(field_paths[i], mesh.n_vertices) if field_paths[i] else None
        art = prepare_mesh(mesh, config, name, target, fld)
        art.source = str(path)
        return art

    workers = threads or os.cpu_count() or 1
    results, failures = [None] * len(mesh_paths), {}
    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(mesh_paths) or 1))) as pool:
        futures = {i: pool.submit(job, i) for i in range(len(mesh_paths))}
        for i, fut in futures.items():
            try:
                results[i] = fut.result()
            except (ZernetError, OSError) as exc:
                failures[names[i]] = f"{type(exc).__name__}: {exc}"
    if failures:
        detail = "; ".join(f"{k}: {v}" for k, v in failures.items())
        raise ZernetError(f"{len(failures)} mesh(es) failed: {detail}")
    return ExperimentBundle(config, results)


# ---------------------------------------------------------------------------
# patch serialization


def patches_to_arrays(patches):
    ok = [p for p in patches if p is not None]
    lengths = np.array([len(p) if p is not None else 0 for p in patches], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)])

    def cat(attr, width):
        return np.concatenate([getattr(p, attr) for p in ok]) if ok else np.zeros((0,) + width)

    frames = np.zeros((len(patches), 9))
    for i, p in enumerate(patches):
        if p is not None:
            frames[i] = np.concatenate([p.frame.normal, p.frame.e1, p.frame.e2])
    return {
        "present": np.array([p is not None for p in patches], dtype=np.int64),
        "offsets": offsets,
        "node": cat("node", ()).astype(np.int64),
        "r": cat("r", ()),
        "theta": cat("theta", ()),
        "interp_idx": cat("interp_idx", (6,)).astype(np.int64),
        "interp_w": cat("interp_w", (6,)),
        "frames": frames,
    }


def patches_from_arrays(arrays, r0):
    patches = []
    off = arrays["offsets"]
    for i, present in enumerate(arrays["present"]):
        if not present:
            patches.append(None)
            continue
        a, b = off[i], off[i + 1]
        fr = arrays["frames"][i]
        frame = TangentFrame(i, fr[0:3].copy(), fr[3:6].copy(), fr[6:9].copy())
        patches.append(GeodesicPatch(
            i, frame, arrays["node"][a:b].copy(), arrays["r"][a:b].copy(),
            arrays["theta"][a:b].copy(), arrays["interp_idx"][a:b].copy(),
            arrays["interp_w"][a:b].copy(), float(r0)))
    return patches


# ---------------------------------------------------------------------------
# bundle persistence


def ensure_output_dir(path, force=False):
    """Create ``path``; refuse to reuse a non-empty directory unless ``force``."""
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise OverwriteError(f"{path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def save_bundle(bundle, path, force=False):
    root = ensure_output_dir(path, force)
    entries = []
    for art in bundle.meshes:
        mdir = root / "meshes" / art.name
        mdir.mkdir(parents=True)
        files = {}

        def record(p):
            files[str(p.relative_to(root))] = containers.file_sha256(p)

        save_mesh(art.mesh, mdir / "mesh.off")
        record(mdir / "mesh.off")
        save_field_csv(art.x, mdir / "input.csv")
        record(mdir / "input.csv")
        if art.target is not None:
            save_field_csv(art.target, mdir / "target.csv")
            record(mdir / "target.csv")
        containers.write_archive(mdir / "samples.zar",
                                 {"face": art.samples.face, "barycentric": art.samples.barycentric})
        record(mdir / "samples.zar")
        for i, r0 in enumerate(bundle.config.r0):
            containers.write_archive(mdir / f"patches_{i}.zar", patches_to_arrays(art.patches[r0]),
                                     {"r0": r0})
            record(mdir / f"patches_{i}.zar")
            containers.write_patch_tensor(art.tensors[r0], mdir / f"tensor_{i}.zpt")
            record(mdir / f"tensor_{i}.zpt")
        entries.append({
            "name": art.name,
            "source": art.source,
            "scale": art.scale,
            "n_vertices": art.mesh.n_vertices,
            "files": files,
            "failed_vertices": {str(r0): {str(v): why for v, why in art.patch_failures[r0].items()}
                                for r0 in bundle.config.r0},
            "decomposition_failures": {str(r0): list(art.tensors[r0].failed) for r0 in bundle.config.r0},
        })
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "config": bundle.config.to_dict(),
        "config_hash": bundle.config.hash(),
        "seed": bundle.config.seed,
        "k": bundle.config.k,
        "s": bundle.config.s,
        "r0": list(bundle.config.r0),
        "meshes": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def bundle_hash(path):
    """Content hash of a saved bundle (manifest bytes, which pin every file hash)."""
    return containers.file_sha256(Path(path) / "manifest.json")


def read_manifest(path):
    mpath = Path(path) / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise BundleFormatError(f"{path}: no manifest.json") from None
    except ValueError:
        raise CorruptionError(f"{mpath}: unreadable manifest") from None
    if manifest.get("format") != BUNDLE_FORMAT:
        raise BundleFormatError(f"{path}: not a {BUNDLE_FORMAT} directory")
    if manifest.get("version") != BUNDLE_VERSION:
        raise BundleFormatError(f"{path}: bundle version {manifest.get('version')}, expected {BUNDLE_VERSION}")
    return manifest


def load_bundle(path):
    root = Path(path)
    manifest = read_manifest(root)
    config = BundleConfig.from_dict(manifest["config"])
    if config.hash() != manifest["config_hash"]:
        raise CorruptionError(f"{path}: config hash mismatch")
    meshes = []
    for entry in manifest["meshes"]:
        for rel, digest in entry["files"].items():
            p = root / rel
            if not p.exists():
                raise CorruptionError(f"{p}: missing")
            if containers.file_sha256(p) != digest:
                raise CorruptionError(f"{p}: content hash mismatch")
        mdir = root / "meshes" / entry["name"]
        mesh = load_mesh(mdir / "mesh.off")
        x = load_field_csv(mdir / "input.csv", mesh.n_vertices)
        target = load_field_csv(mdir / "target.csv", mesh.n_vertices) if (mdir / "target.csv").exists() else None
        arrays, _ = containers.read_archive(mdir / "samples.zar")
        samples = SurfaceSamples.from_barycentric(mesh, arrays["face"], arrays["barycentric"])
        art = MeshArtifacts(entry["name"], mesh, entry["scale"], samples, x, target, source=entry["source"])
        for i, r0 in enumerate(config.r0):
            arrays, meta = containers.read_archive(mdir / f"patches_{i}.zar")
            art.patches[r0] = patches_from_arrays(arrays, meta["r0"])
            art.patch_failures[r0] = {int(v): why for v, why in entry["failed_vertices"][str(r0)].items()}
            tensor = containers.read_patch_tensor(mdir / f"tensor_{i}.zpt")
            art.tensors[r0] = type(tensor)(tensor.data, tensor.r0,
                                           tuple(entry["decomposition_failures"][str(r0)]))
        meshes.append(art)
    return ExperimentBundle(config, meshes)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, epoch=0, extra=None):
    """Single-file checkpoint: every parameter tensor plus a manifest."""
    params = model.parameters()
    meta = {
        "kind": CHECKPOINT_KIND,
        "model": model.spec.to_dict(),
        "shapes": {name: list(v.shape) for name, v in params.items()},
        "seed": model.spec.seed,
        "epoch": epoch,
        **(extra or {}),
    }
    containers.write_archive(path, params, meta)


def load_checkpoint(path, spec=None):
    """Rebuild a :class:`Network` from a checkpoint.

    With ``spec`` given, the checkpoint must match its parameter shapes.
    """
    arrays, meta = containers.read_archive(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise BundleFormatError(f"{path}: not a model checkpoint")
    spec = spec or ModelSpec.from_dict(meta["model"])
    model = Network(spec)
    model.load_parameters(arrays)
    return model, meta
