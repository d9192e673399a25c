"""Self-describing array container.

A bundle is a zip archive holding one ``.npy`` entry per named array plus a
``manifest.json`` that records the format version, array names with shapes
and dtypes, and an open metadata dict. Readers validate the stored arrays
against the manifest, so silent schema drift fails loudly.
"""

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import BundleError

FORMAT_VERSION = 1
_MANIFEST = "manifest.json"


def save_bundle(path, arrays, meta=None):
    """Write named arrays plus metadata to ``path``.

    ``meta`` must be JSON-serializable; it travels in the manifest.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "arrays": {
            name: {"shape": list(a.shape), "dtype": str(a.dtype)} for name, a in arrays.items()
        },
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(_MANIFEST, json.dumps(manifest, indent=1, sort_keys=True))
        for name, a in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(a))
            zf.writestr(f"{name}.npy", buf.getvalue())
    return path


def load_bundle(path):
    """Read a bundle back as ``(arrays, meta)``; validates the manifest."""
    path = Path(path)
    if not path.exists():
        raise BundleError(f"no such bundle: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if _MANIFEST not in names:
                raise BundleError(f"{path}: missing {_MANIFEST}")
            manifest = json.loads(zf.read(_MANIFEST))
            version = manifest.get("format_version")
            if version != FORMAT_VERSION:
                raise BundleError(f"{path}: unsupported format version {version!r}")
            arrays = {}
            for name, info in manifest["arrays"].items():
                entry = f"{name}.npy"
                if entry not in names:
                    raise BundleError(f"{path}: manifest lists {name!r} but entry is missing")
                a = np.lib.format.read_array(io.BytesIO(zf.read(entry)))
                if list(a.shape) != info["shape"] or str(a.dtype) != info["dtype"]:
                    raise BundleError(
                        f"{path}: array {name!r} is {a.shape}/{a.dtype}, "
                        f"manifest says {info['shape']}/{info['dtype']}"
                    )
                arrays[name] = a
    except zipfile.BadZipFile as exc:
        raise BundleError(f"{path}: not a bundle ({exc})") from exc
    return arrays, manifest["meta"]
