"""Self-describing checkpoint files.

A checkpoint is a zip archive holding ``metadata.json`` and one ``.npy``
array per state-dict entry under ``<group>/<name>.npy`` for the groups
backbone, head and sa. Entries are written in sorted order with a fixed
timestamp, so saving the same state twice yields identical bytes.
"""
import io
import json
import zipfile

import numpy as np
import torch

from .errors import IngestionError
from .models import PARAMETER_GROUPS

FORMAT = "puregaze-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, bundle, metadata: dict) -> None:
    meta = {"format": FORMAT, "version": VERSION, **metadata}
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "metadata.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for group in PARAMETER_GROUPS:
            state = getattr(bundle, group).state_dict()
            for name in sorted(state):
                buf = io.BytesIO()
                np.save(buf, state[name].detach().cpu().numpy(), allow_pickle=False)
                _write(zf, f"{group}/{name}.npy", buf.getvalue())


def read_checkpoint(path):
    """Return ``(states, metadata)`` where ``states[group][name]`` is a tensor."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise IngestionError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        names = zf.namelist()
        if "metadata.json" not in names:
            raise IngestionError(f"checkpoint {path} has no metadata.json")
        meta = json.loads(zf.read("metadata.json"))
        if meta.get("format") != FORMAT:
            raise IngestionError(f"{path} is not a {FORMAT} file")
        if meta.get("version", 0) > VERSION:
            raise IngestionError(f"checkpoint {path} has unsupported version {meta.get('version')}")
        states = {g: {} for g in PARAMETER_GROUPS}
        for name in names:
            if not name.endswith(".npy"):
                continue
            group, key = name.split("/", 1)
            if group not in states:
                raise IngestionError(f"checkpoint {path} has unknown group {group!r}")
            arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
            states[group][key[:-4]] = torch.from_numpy(arr)
    return states, meta


def load_states(bundle, states) -> None:
    for group in PARAMETER_GROUPS:
        try:
            getattr(bundle, group).load_state_dict(states[group])
        except RuntimeError as exc:
            raise IngestionError(f"checkpoint group {group!r} does not fit the model: {exc}") from exc
