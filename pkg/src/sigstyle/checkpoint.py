"""StyleCheckpoint and its single-file ``.sigstyle`` container.

Layout::

    b"SIGSTYLE"                 8-byte magic
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON
    data                        concatenated little-endian float32 arrays

The header carries ``format``, ``version``, ``metadata`` (every scalar
field of :class:`StyleCheckpoint`), ``arrays`` (name -> offset, shape,
dtype) and ``data_bytes``/``data_crc32`` so truncation and corruption are
detected before any state is built.
"""

from __future__ import annotations

import datetime as _dt
import json
import os
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .backbone.base import AttentionAddress, Backbone
from .errors import (
    CheckpointParseError,
    ConfigurationError,
    DimensionError,
    IncompatibleCheckpointError,
)
from .hypernet import OffsetPredictor

MAGIC = b"SIGSTYLE"
FORMAT_VERSION = 1
EXTENSION = ".sigstyle"
MODES = ("style", "appearance")
PROMPT_TEMPLATES = {
    "style": "a photo in the style of *",
    "appearance": "a photo in the appearance of *",
}
_DTYPE = "<f4"


def utc_now() -> str:
    """ISO timestamp; honours SOURCE_DATE_EPOCH for reproducible builds."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    ts = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch else _dt.datetime.now(_dt.timezone.utc)
    return ts.replace(microsecond=0).isoformat()


def _f32(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.array(a, dtype=np.float32, order="C")


@dataclass(eq=False)
class StyleCheckpoint:
    """A learned style: token embedding plus offset-predictor state.

    Arrays are held as float32, the storage precision, so that
    ``load(save(c))`` is bitwise identical to ``c``.
    """

    token_embedding: np.ndarray
    predictor_state: dict[str, np.ndarray]
    targets: list[AttentionAddress]
    base_model_id: str
    train_lambda: float = 1.0
    steps_trained: int = 0
    style_image_hashes: list[str] = field(default_factory=list)
    created_at: str = field(default_factory=utc_now)
    mode: str = "style"
    prompt_template: str = PROMPT_TEMPLATES["style"]
    direct_deltas: dict[str, np.ndarray] = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.token_embedding = _f32(self.token_embedding)
        self.predictor_state = {k: _f32(v) for k, v in self.predictor_state.items()}
        self.direct_deltas = {k: _f32(v) for k, v in self.direct_deltas.items()}
        if self.token_embedding.ndim != 1:
            raise DimensionError("token embedding must be a vector")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        for a in self.targets:
            if a.region != "decoder":
                raise ConfigurationError(f"checkpoint target {a.key} is outside the decoder")

    @property
    def embed_dim(self) -> int:
        return int(self.token_embedding.shape[0])

    def check_compatible(self, model: Backbone) -> None:
        if self.embed_dim != model.embed_dim:
            raise DimensionError(
                f"checkpoint token width {self.embed_dim} does not match backbone width {model.embed_dim}"
            )
        for a in self.targets:
            found = model.address(a.key)
            if found.shape != a.shape:
                raise DimensionError(f"target {a.key} is {a.shape} here but {found.shape} in the backbone")
        if self.base_model_id != model.model_id:
            warnings.warn(
                f"checkpoint was trained on {self.base_model_id!r}, applying to {model.model_id!r}",
                stacklevel=2,
            )

    def token(self, model: Backbone) -> torch.Tensor:
        if self.embed_dim != model.embed_dim:
            raise DimensionError(
                f"checkpoint token width {self.embed_dim} does not match backbone width {model.embed_dim}"
            )
        return torch.from_numpy(self.token_embedding.copy()).to(model.device, model.dtype)

    def predictor(self, dtype=torch.float64) -> OffsetPredictor:
        return OffsetPredictor.from_state_arrays(self.targets, self.predictor_state, dtype=dtype)

    def deltas(self, model: Backbone) -> dict[str, torch.Tensor]:
        return {
            k: torch.from_numpy(v.copy()).to(model.device, model.dtype)
            for k, v in self.direct_deltas.items()
        }

    def metadata(self) -> dict:
        return {
            "targets": [a.to_dict() for a in self.targets],
            "base_model_id": self.base_model_id,
            "train_lambda": float(self.train_lambda),
            "steps_trained": int(self.steps_trained),
            "style_image_hashes": list(self.style_image_hashes),
            "created_at": self.created_at,
            "mode": self.mode,
            "prompt_template": self.prompt_template,
            "embed_dim": self.embed_dim,
        }

    def same_content(self, other: "StyleCheckpoint", ignore=("created_at",)) -> bool:
        """Bitwise comparison of arrays and metadata, minus ``ignore`` keys."""
        ma = {k: v for k, v in self.metadata().items() if k not in ignore}
        mb = {k: v for k, v in other.metadata().items() if k not in ignore}
        if ma != mb:
            return False
        return _arrays_equal(self._arrays(), other._arrays())

    def _arrays(self) -> dict[str, np.ndarray]:
        out = {"token_embedding": self.token_embedding}
        out.update({f"predictor/{k}": v for k, v in self.predictor_state.items()})
        out.update({f"direct/{k}": v for k, v in self.direct_deltas.items()})
        return out


def identity_checkpoint(model: Backbone, targets=None, seed: int = 0, mode: str = "style",
                        token: Optional[torch.Tensor] = None) -> StyleCheckpoint:
    """Zero-offset checkpoint: a freshly initialized predictor and token."""
    from .hypernet import default_targets, init_predictor
    from .styletune import init_style_token

    targets = list(targets) if targets is not None else default_targets(model)
    pred = init_predictor(targets, seed=seed)
    tok = token if token is not None else init_style_token(model, seed)
    return StyleCheckpoint(
        token_embedding=tok,
        predictor_state=pred.state_arrays(),
        targets=targets,
        base_model_id=model.model_id,
        mode=mode,
        prompt_template=PROMPT_TEMPLATES[mode],
    )


def _arrays_equal(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    return all(
        x.dtype == b[k].dtype and x.shape == b[k].shape and x.tobytes() == b[k].tobytes()
        for k, x in a.items()
    )


def save_checkpoint(ckpt: StyleCheckpoint, path) -> None:
    arrays = ckpt._arrays()
    index, chunks, offset = {}, [], 0
    for name, arr in arrays.items():
        raw = arr.astype(_DTYPE).tobytes()
        index[name] = {"offset": offset, "shape": list(arr.shape), "dtype": _DTYPE}
        chunks.append(raw)
        offset += len(raw)
    data = b"".join(chunks)
    header = {
        "format": "sigstyle",
        "version": FORMAT_VERSION,
        "metadata": ckpt.metadata(),
        "arrays": index,
        "data_bytes": len(data),
        "data_crc32": zlib.crc32(data),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, model: Optional[Backbone] = None) -> StyleCheckpoint:
    """Read a ``.sigstyle`` file; with ``model`` given, also check compatibility."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointParseError(f"{path}: not a sigstyle checkpoint")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + hlen > len(blob):
        raise CheckpointParseError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointParseError(f"{path}: corrupt header ({exc})") from exc
    if header.get("format") != "sigstyle":
        raise CheckpointParseError(f"{path}: unexpected format {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint version {header.get('version')!r}, this build reads {FORMAT_VERSION}"
        )
    data = blob[start + hlen :]
    if len(data) != header.get("data_bytes") or zlib.crc32(data) != header.get("data_crc32"):
        raise CheckpointParseError(f"{path}: data section truncated or corrupt")
    arrays = {}
    try:
        for name, spec in header["arrays"].items():
            count = int(np.prod(spec["shape"], dtype=np.int64))
            arr = np.frombuffer(data, dtype=spec["dtype"], count=count, offset=spec["offset"])
            arrays[name] = arr.reshape(spec["shape"]).astype(np.float32)
        meta = header["metadata"]
        ckpt = StyleCheckpoint(
            token_embedding=arrays["token_embedding"],
            predictor_state={k[len("predictor/"):]: v for k, v in arrays.items() if k.startswith("predictor/")},
            direct_deltas={k[len("direct/"):]: v for k, v in arrays.items() if k.startswith("direct/")},
            targets=[AttentionAddress.from_dict(d) for d in meta["targets"]],
            base_model_id=meta["base_model_id"],
            train_lambda=meta["train_lambda"],
            steps_trained=meta["steps_trained"],
            style_image_hashes=meta["style_image_hashes"],
            created_at=meta["created_at"],
            mode=meta["mode"],
            prompt_template=meta["prompt_template"],
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointParseError(f"{path}: malformed checkpoint ({exc})") from exc
    if model is not None:
        ckpt.check_compatible(model)
    return ckpt
