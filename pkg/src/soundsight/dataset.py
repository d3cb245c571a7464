"""On-disk pair datasets: ``pairs/<split>/<index>.png|.wav|.meta``.

Images are 8-bit RGB PNGs.  A ``.wav`` file exists only for heard pairs;
the empty intent has no recording and loads as the all-zero MFCC matrix.
The ``.meta`` file is a single ``key=value`` line; ``intent`` appears only in
labeled splits.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .audio import MfccConfig, WaveSignal, compute_mfcc, empty_mfcc, load_wav, save_wav
from .envsim import UnlabeledPair, VisualAudioPair


class DatasetError(ValueError):
    pass


def _format_meta(meta: dict) -> str:
    for k, v in meta.items():
        if any(c in f"{k}{v}" for c in " =\n"):
            raise DatasetError(f"meta entry {k}={v} contains a separator")
    return " ".join(f"{k}={v}" for k, v in meta.items()) + "\n"


def parse_meta(text: str) -> dict[str, str]:
    lines = [line for line in text.splitlines() if line.strip()]
    if len(lines) != 1:
        raise DatasetError("meta must be exactly one line")
    out = {}
    for token in lines[0].split():
        key, sep, value = token.partition("=")
        if not sep or not key:
            raise DatasetError(f"malformed meta token {token!r}")
        out[key] = value
    return out


def write_pairs(root: str | Path, split: str, pairs, labeled: bool = True,
                sample_rate: int = 16000) -> Path:
    """Write pairs; each must carry a ``wave`` when it is heard."""
    folder = Path(root) / "pairs" / split
    folder.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(pairs):
        pixels = np.clip(np.round(np.asarray(p.image) * 255), 0, 255).astype(np.uint8)
        Image.fromarray(pixels, "RGB").save(folder / f"{i:06d}.png")
        heard = bool(np.any(p.sound))
        meta = {"heard": int(heard)}
        if heard:
            if p.wave is None:
                raise DatasetError(f"pair {i} is heard but has no waveform to save")
            save_wav(folder / f"{i:06d}.wav", p.wave)
            meta["sample_rate"] = p.wave.sample_rate
        if labeled:
            meta["intent"] = int(p.intent)
        (folder / f"{i:06d}.meta").write_text(_format_meta(meta))
    return folder


def read_pairs(root: str | Path, split: str, mfcc: MfccConfig = MfccConfig()):
    """Load a split.  Returns ``VisualAudioPair`` when every meta line has an
    intent and ``UnlabeledPair`` otherwise."""
    folder = Path(root) / "pairs" / split
    if not folder.is_dir():
        raise DatasetError(f"no split directory {folder}")
    metas = sorted(folder.glob("*.meta"))
    out = []
    labeled = None
    for meta_path in metas:
        meta = parse_meta(meta_path.read_text())
        stem = meta_path.with_suffix("")
        image = np.asarray(Image.open(stem.with_suffix(".png")).convert("RGB"), dtype=np.float32) / 255.0
        wav = stem.with_suffix(".wav")
        wave: WaveSignal | None = None
        if wav.exists():
            wave = load_wav(wav)
            sound = compute_mfcc(wave, mfcc)
        else:
            sound = empty_mfcc(mfcc)
        has_intent = "intent" in meta
        if labeled is None:
            labeled = has_intent
        elif labeled != has_intent:
            raise DatasetError(f"{folder}: split mixes labeled and unlabeled pairs")
        if has_intent:
            out.append(VisualAudioPair(image, sound, int(meta["intent"]), wave))
        else:
            out.append(UnlabeledPair(image, sound, wave))
    return out
