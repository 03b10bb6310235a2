"""Config-driven training loop with checkpointing and JSON-lines metrics logging.

Config files are flat ``key = value`` text with ``#`` comments; nested model
and loss fields use dotted keys (``model.num_keypoints = 8``). Checkpoints are
a single binary blob: the magic string ``KEYGRID1``, a little-endian uint32
header length, a JSON header (config, epoch, loss history, array manifest),
then the named parameter arrays back to back.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DataError, SynthFamilyParams, load_cloud, synth_family
from .geometry import Frame, PointCloud, normalize_unit_cube
from .losses import LossConfig, farthest_point_loss, overall_loss, similarity_loss
from .model import KeyGridNet, ModelConfig

CHECKPOINT_MAGIC = b"KEYGRID1"
GRAD_CLIP_NORM = 10.0

CLOUD_EXTENSIONS = (".xyz", ".ply", ".f32")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3  # appendix states 0.1; selectable but not default
    seed: int = 0
    dataset: str = ""
    output_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", "epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive", "learning_rate")


def _coerce(value: str, target_type, key: str):
    value = value.strip()
    try:
        if target_type is bool:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if target_type is int:
            return int(value)
        if target_type is float:
            return float(value)
        if target_type is str:
            return value
        if target_type in (tuple, tuple[int, ...]):
            if value.lower() == "none":
                return None

            def num(v: str):
                try:
                    return int(v)
                except ValueError:
                    return float(v)

            return tuple(num(v.strip()) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}", key) from None
    raise ConfigError(f"unsupported config field type for {key!r}", key)


def _field_types(cls) -> dict[str, type]:
    out = {}
    for f in dataclasses.fields(cls):
        t = f.type if isinstance(f.type, type) else None
        if t is None:
            name = str(f.type)
            t = {"int": int, "float": float, "str": str, "bool": bool}.get(name, tuple)
        out[f.name] = t
    return out


def parse_config(text: str) -> TrainConfig:
    """Parse flat ``key = value`` config text; unknown keys raise ConfigError."""
    top, model_kw, loss_kw = {}, {}, {}
    top_types = {k: v for k, v in _field_types(TrainConfig).items()
                 if k not in ("model", "loss")}
    model_types = _field_types(ModelConfig)
    loss_types = _field_types(LossConfig)

    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("model."):
            sub = key[len("model."):]
            if sub not in model_types:
                raise ConfigError(f"unknown config key: {key!r}", key)
            model_kw[sub] = _coerce(value, model_types[sub], key)
        elif key.startswith("loss."):
            sub = key[len("loss."):]
            if sub not in loss_types:
                raise ConfigError(f"unknown config key: {key!r}", key)
            loss_kw[sub] = _coerce(value, loss_types[sub], key)
        elif key in top_types:
            top[key] = _coerce(value, top_types[key], key)
        else:
            raise ConfigError(f"unknown config key: {key!r}", key)
    return TrainConfig(model=ModelConfig(**model_kw), loss=LossConfig(**loss_kw), **top)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def config_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["model"]["level_sizes"] = list(d["model"]["level_sizes"])
    d["model"]["level_widths"] = list(d["model"]["level_widths"])
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    model = dict(d.pop("model"))
    model["level_sizes"] = tuple(model["level_sizes"])
    model["level_widths"] = tuple(model["level_widths"])
    if model.get("group_radii") is not None:
        model["group_radii"] = tuple(model["group_radii"])
    loss = dict(d.pop("loss"))
    return TrainConfig(model=ModelConfig(**model), loss=LossConfig(**loss), **d)


# --- dataset resolution --------------------------------------------------------

def parse_synth_spec(spec: str) -> SynthFamilyParams:
    """Parse ``synth:<kind>?key=value&...`` dataset specs."""
    body = spec[len("synth:"):]
    kind, _, query = body.partition("?")
    kw = {}
    if query:
        for pair in query.split("&"):
            k, _, v = pair.partition("=")
            if k in ("frames", "points", "seed"):
                kw[k] = int(v)
            elif k == "magnitude":
                kw[k] = float(v)
            else:
                raise DataError(f"unknown synthetic dataset parameter: {k!r}")
    return SynthFamilyParams(kind=kind, **kw)


def resolve_dataset(spec: str) -> list[PointCloud]:
    """Resolve a dataset spec into a list of normalized clouds.

    ``synth:`` specs generate a deformation family; anything else is a
    directory of cloud files (or a single cloud file).
    """
    if not spec:
        raise DataError("no dataset configured")
    if spec.startswith("synth:"):
        frames = synth_family(parse_synth_spec(spec))
        return [normalize_unit_cube(cloud)[0] for cloud, _ in frames]
    path = Path(spec)
    if path.is_file():
        paths = [path]
    elif path.is_dir():
        paths = sorted(p for p in path.iterdir() if p.suffix.lower() in CLOUD_EXTENSIONS)
    else:
        raise DataError(f"dataset not found: {spec}")
    if not paths:
        raise DataError(f"no cloud files under {spec}")
    out = []
    for p in paths:
        cloud = load_cloud(p)
        out.append(normalize_unit_cube(cloud)[0])
    return out


# --- checkpoints -----------------------------------------------------------------

def _gather_arrays(model: KeyGridNet, optimizer=None) -> dict[str, np.ndarray]:
    arrays = {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        for idx, state in optimizer.state_dict()["state"].items():
            for key, val in state.items():
                if isinstance(val, torch.Tensor):
                    arrays[f"optim.{idx}.{key}"] = val.detach().cpu().numpy()
    return arrays


def save_checkpoint(model: KeyGridNet, cfg: TrainConfig, epoch: int, path,
                    optimizer=None, loss_history: list | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _gather_arrays(model, optimizer)
    manifest, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = arrays[name]
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        blob = arr.tobytes()
        manifest.append({
            "name": name, "shape": list(arr.shape),
            "dtype": arr.dtype.str, "offset": offset, "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "config": config_to_dict(cfg),
        "epoch": epoch,
        "loss_history": loss_history or [],
        "arrays": manifest,
    }).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], TrainConfig, int]:
    """Load (named arrays, config, epoch); raises CheckpointError on corruption."""
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("corrupt checkpoint: bad magic")
    hlen = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))[0]
    start = len(CHECKPOINT_MAGIC) + 4
    if len(raw) < start + hlen:
        raise CheckpointError("corrupt checkpoint: truncated header")
    header = json.loads(raw[start:start + hlen])
    body = raw[start + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(body):
            raise CheckpointError("corrupt checkpoint: truncated arrays")
        arrays[entry["name"]] = np.frombuffer(
            body[lo:hi], dtype=np.dtype(entry["dtype"])
        ).reshape(entry["shape"]).copy()
    return arrays, config_from_dict(header["config"]), header["epoch"]


def checkpoint_loss_history(path) -> list:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("corrupt checkpoint: bad magic")
    hlen = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))[0]
    start = len(CHECKPOINT_MAGIC) + 4
    return json.loads(raw[start:start + hlen])["loss_history"]


def build_model(cfg: TrainConfig) -> KeyGridNet:
    torch.manual_seed(cfg.seed)
    return KeyGridNet(cfg.model)


def restore_model(path) -> tuple[KeyGridNet, TrainConfig, int]:
    arrays, cfg, epoch = load_checkpoint(path)
    model = KeyGridNet(cfg.model)
    state = {
        k[len("model."):]: torch.as_tensor(v)
        for k, v in arrays.items() if k.startswith("model.")
    }
    model.load_state_dict(state)
    model.eval()
    return model, cfg, epoch


def _restore_optimizer(optimizer, arrays, num_params: int) -> None:
    state = {}
    for name, arr in arrays.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = torch.as_tensor(arr)
    if not state:
        return
    sd = optimizer.state_dict()
    sd["state"] = state
    sd["param_groups"][0]["params"] = list(range(num_params))
    optimizer.load_state_dict(sd)


# --- the loop ----------------------------------------------------------------------

def train(cfg: TrainConfig, resume_from=None, log_fn=None) -> Path:
    """Run the epoch loop; returns the final checkpoint path.

    Writes ``checkpoint.bin`` (latest) every epoch and appends one JSON line
    per epoch to ``metrics.jsonl`` under ``cfg.output_dir``. Deterministic for
    a fixed seed on a single device.
    """
    clouds = resolve_dataset(cfg.dataset)
    if len(clouds) == 0:
        raise DataError("empty dataset")
    for c in clouds:
        if len(c) != cfg.model.num_points:
            raise ConfigError(
                f"dataset shape {c.id!r} has {len(c)} points but model.num_points "
                f"is {cfg.model.num_points}", "model.num_points")

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.bin"
    metrics_path = out_dir / "metrics.jsonl"

    model = build_model(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    loss_history: list[dict] = []
    start_epoch = 0
    if resume_from is not None:
        arrays, ckpt_cfg, start_epoch = load_checkpoint(resume_from)
        model.load_state_dict({
            k[len("model."):]: torch.as_tensor(v)
            for k, v in arrays.items() if k.startswith("model.")
        })
        _restore_optimizer(optimizer, arrays, len(list(model.parameters())))
        loss_history = checkpoint_loss_history(resume_from)

    mode = "a" if resume_from is not None else "w"
    model.train()
    with open(metrics_path, mode) as log:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng(cfg.seed * 100003 + epoch).permutation(len(clouds))
            sums = {"l_sim": 0.0, "l_far": 0.0, "l_total": 0.0}
            n_batches = 0
            for lo in range(0, len(order), cfg.batch_size):
                batch = [clouds[i] for i in order[lo:lo + cfg.batch_size]]
                optimizer.zero_grad()
                l_sim_acc = torch.zeros(())
                l_far_acc = torch.zeros(())
                for cloud in batch:
                    pred, recon = model(cloud)
                    l_sim_acc = l_sim_acc + similarity_loss(recon, cloud.points)
                    l_far_acc = l_far_acc + farthest_point_loss(
                        pred.keypoints, cloud, cfg.loss.num_far_points)
                l_sim = l_sim_acc / len(batch)
                l_far = l_far_acc / len(batch)
                total = overall_loss(l_sim, l_far, epoch, cfg.loss)
                if not torch.isfinite(total):
                    save_checkpoint(model, cfg, epoch, out_dir / "diagnostic.bin",
                                    optimizer, loss_history)
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}; diagnostic checkpoint written")
                total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP_NORM)
                optimizer.step()
                sums["l_sim"] += l_sim.item()
                sums["l_far"] += l_far.item()
                sums["l_total"] += total.item()
                n_batches += 1
            entry = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
            loss_history.append(entry)
            log.write(json.dumps(entry) + "\n")
            log.flush()
            save_checkpoint(model, cfg, epoch + 1, ckpt_path, optimizer, loss_history)
            if log_fn is not None:
                log_fn(entry)
    return ckpt_path
