import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

import vsflab
from vsflab.cli import train_from_config
from vsflab.config import Config
from vsflab.model import load_checkpoint, save_checkpoint

SOURCE_DIR = Path(vsflab.__file__).parent


def _standard_key(config):
    h = hashlib.sha256(config.digest().encode())
    for path in sorted(SOURCE_DIR.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def standard_run(request):
    """The default-config model, trained once and cached across sessions.

    The cache key hashes the package sources and the configuration, so any
    code or default change retrains. Returns a dict with ``model``,
    ``curve``, ``train_seconds`` and ``cached``.
    """
    config = Config()
    key = _standard_key(config)
    cache = Path(request.config.cache.mkdir("vsflab-standard")) / key
    ckpt, curve_path, meta_path = cache / "model.vsft", cache / "loss.npy", cache / "meta.json"
    if ckpt.exists() and curve_path.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        return dict(model=load_checkpoint(ckpt), curve=np.load(curve_path),
                    train_seconds=meta["train_seconds"], cached=True)
    start = time.perf_counter()
    model, curve, _ = train_from_config(config)
    seconds = time.perf_counter() - start
    cache.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, model)
    np.save(curve_path, curve)
    meta_path.write_text(json.dumps({"train_seconds": seconds, "config": config.digest()}))
    return dict(model=load_checkpoint(ckpt), curve=curve, train_seconds=seconds, cached=False)
