"""Training and inference: SFV1 volumes in, SFV1 probability maps out."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .net import SCALES, NetSpec, build_net, check_dims, dice_loss
from .sfv import SfvError, Volume, read_volume, write_volume


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 1
    steps: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be positive")


def load_dataset(data_dir: str | Path) -> list[tuple[Volume, Volume]]:
    """Pairs of (input volume, binary mask) matched by file stem.

    Layout: ``<dir>/images/*.sfv`` (or ``maps/`` as written by the phantom
    synthesizer) with matching ``<dir>/truth/*.sfv`` masks.
    """
    root = Path(data_dir)
    img_dir = root / "images"
    if not img_dir.is_dir():
        img_dir = root / "maps"
    truth_dir = root / "truth"
    if not img_dir.is_dir() or not truth_dir.is_dir():
        raise FileNotFoundError(f"{root}: expected images/ (or maps/) and truth/ subdirectories")
    pairs = []
    for img_path in sorted(img_dir.glob("*.sfv")):
        mask_path = truth_dir / img_path.name
        if not mask_path.exists():
            raise FileNotFoundError(f"missing mask for {img_path.name}: {mask_path}")
        image = read_volume(img_path)
        mask = read_volume(mask_path)
        if mask.kind != "mask":
            raise SfvError(f"{mask_path}: expected a mask volume, got {mask.kind}")
        if image.dims != mask.dims:
            raise SfvError(f"{img_path.name}: image dims {image.dims} != mask dims {mask.dims}")
        pairs.append((image, mask))
    if not pairs:
        raise FileNotFoundError(f"{img_dir}: no .sfv volumes found")
    return pairs


def _pad_to_multiple(t: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int, int]]:
    d, h, w = t.shape[-3:]
    m = SCALES[-1]
    pad = tuple((m - s % m) % m for s in (d, h, w))
    if any(pad):
        t = F.pad(t, (0, pad[2], 0, pad[1], 0, pad[0]), mode="replicate")
    return t, pad


def _to_tensor(vol: Volume) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(vol.data)).float()[None, None]


def train(data_dir: str | Path, spec: NetSpec, cfg: TrainConfig):
    """Minimize 1 - Dice with Adam; returns (model, per-step loss history)."""
    pairs = load_dataset(data_dir)
    tensors = []
    for image, mask in pairs:
        x, pad = _pad_to_multiple(_to_tensor(image))
        y, _ = _pad_to_multiple(_to_tensor(mask))
        tensors.append((x, y[0, 0]))

    torch.manual_seed(cfg.seed)
    model = build_net(spec)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    order = np.random.default_rng(cfg.seed)
    history = []
    model.train()
    for step in range(cfg.steps):
        idx = int(order.integers(len(tensors))) if len(tensors) > 1 else 0
        x, y = tensors[idx]
        opt.zero_grad()
        pred = model(x)[0]
        loss = dice_loss(pred, y)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return model, history


def save_checkpoint(model, spec: NetSpec, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": "cnn-probmap-ckpt", "version": 1,
                "spec": asdict(spec), "state_dict": model.state_dict()}, path)


def load_checkpoint(path: str | Path):
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != "cnn-probmap-ckpt":
        raise SfvError(f"{path}: not a cnn-probmap checkpoint")
    spec = NetSpec(**blob["spec"])
    model = build_net(spec)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, spec


def predict(model, vol: Volume) -> Volume:
    """Foreground probability map on the input grid (metadata preserved)."""
    x, pad = _pad_to_multiple(_to_tensor(vol))
    check_dims(x.shape[2:])
    model.eval()
    with torch.no_grad():
        probs = model(x)[0]
    d, h, w = vol.dims
    out = probs[:d, :h, :w].numpy().astype(np.float32)
    out = np.clip(out, 0.0, 1.0)
    return Volume(vol.dims, vol.spacing, vol.origin, out, "probability")


def predict_file(ckpt_path: str | Path, in_path: str | Path, out_path: str | Path) -> Volume:
    model, _ = load_checkpoint(ckpt_path)
    vol = read_volume(in_path)
    result = predict(model, vol)
    write_volume(result, out_path)
    return result


def hard_dice(pred: Volume, truth: Volume) -> float:
    """Dice of the thresholded prediction against a binary mask, in [0, 1]."""
    a = pred.data >= 0.5
    b = truth.data != 0.0
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)
