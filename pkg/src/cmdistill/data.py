"""Synthetic speech corpus: transcripts, rendered audio, features, JSONL manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio import (SynthSpec, Waveform, default_synth_spec, mel_spectrogram, normalize_log_mel,
                    pad_waveform, read_wav, synth_utterance)
from .config import AudioConfig, DataConfig, ModelConfig
from .errors import DataError
from .numcore import Rng
from .toylm import SyntheticLanguage

SPLITS = ("train", "dev", "test")
SYNTHETIC = "synthetic"
MANIFEST_HEADER = {"format": "cmdistill-manifest", "version": 1,
                   "fields": ["id", "transcript", "audio", "split"]}


@dataclass(frozen=True)
class AudioExample:
    id: str
    transcript: tuple[int, ...]
    split: str
    audio: str = SYNTHETIC


@dataclass
class SpeechSet:
    """Featurized examples of one split: ids, transcripts and (n, frames, n_mels) features."""

    ids: list[str]
    transcripts: list[list[int]]
    feats: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "SpeechSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SpeechSet([self.ids[i] for i in idx], [self.transcripts[i] for i in idx], self.feats[idx])


def make_language(model: ModelConfig, seed: int) -> SyntheticLanguage:
    return SyntheticLanguage(vocab=model.vocab, seed=seed, min_len=model.min_transcript,
                             max_len=model.max_transcript, filler_slots=model.n_queries)


def make_synth_spec(language: SyntheticLanguage, audio: AudioConfig) -> SynthSpec:
    return default_synth_spec([int(t) for t in language.content], sample_rate=audio.sample_rate,
                              tone_ms=audio.tone_ms, noise=audio.noise,
                              pitch_range=audio.pitch_range, amplitude=audio.amplitude)


def make_examples(language: SyntheticLanguage, data: DataConfig, rng: Rng) -> list[AudioExample]:
    """Draw transcripts for each split; dev/test transcripts never repeat a train transcript."""
    counts = {"train": data.n_train, "dev": data.n_dev, "test": data.n_test}
    seen: set[tuple[int, ...]] = set()
    out: list[AudioExample] = []
    for split in SPLITS:
        if counts[split] < 0:
            raise DataError(f"negative example count for split {split!r}")
        draw = rng.spawn(("transcripts", split))
        i = 0
        for k in range(counts[split]):
            while True:
                t = tuple(language.sample_transcript(draw.spawn(i)))
                i += 1
                if split == "train" or t not in seen:
                    break
            if split == "train":
                seen.add(t)
            out.append(AudioExample(f"{split}-{k:05d}", t, split))
    return out


def render(example: AudioExample, spec: SynthSpec, rng: Rng) -> Waveform:
    """Deterministic waveform for a synthetic example, keyed by its id."""
    return synth_utterance(example.transcript, spec, rng.spawn(("audio", example.id)))


def fixed_samples(audio: AudioConfig, model: ModelConfig) -> int:
    """Every utterance is padded to the duration of the longest possible transcript."""
    return int(round(model.max_transcript * audio.tone_ms * audio.sample_rate / 1000.0))


def featurize(waves: Iterable[Waveform], audio: AudioConfig, n_samples: int) -> np.ndarray:
    rows = [normalize_log_mel(mel_spectrogram(pad_waveform(w, n_samples, audio.pad_side), audio.n_fft,
                                              audio.hop, audio.n_mels).values) for w in waves]
    if not rows:
        frames = (n_samples - audio.n_fft) // audio.hop + 1
        return np.zeros((0, frames, audio.n_mels), dtype=np.float32)
    return np.stack(rows).astype(np.float32)


def load_waveform(example: AudioExample, spec: SynthSpec, rng: Rng, root: Path | None) -> Waveform:
    if example.audio == SYNTHETIC:
        return render(example, spec, rng)
    path = Path(example.audio)
    if root is not None and not path.is_absolute():
        path = root / path
    w = read_wav(path)
    if w.sample_rate != spec.sample_rate:
        raise DataError(f"{path}: sample rate {w.sample_rate} != configured {spec.sample_rate}")
    return w


def build_speech_set(examples: Sequence[AudioExample], spec: SynthSpec, audio: AudioConfig,
                     model: ModelConfig, rng: Rng, root: Path | None = None) -> SpeechSet:
    n = fixed_samples(audio, model)
    waves = [load_waveform(e, spec, rng, root) for e in examples]
    return SpeechSet([e.id for e in examples], [list(e.transcript) for e in examples],
                     featurize(waves, audio, n))


def by_split(examples: Sequence[AudioExample], split: str) -> list[AudioExample]:
    return [e for e in examples if e.split == split]


# -- manifest ----------------------------------------------------------------------

def manifest_lines(examples: Sequence[AudioExample]) -> list[str]:
    lines = [json.dumps(MANIFEST_HEADER, sort_keys=True)]
    for e in examples:
        rec = {"id": e.id, "transcript": " ".join(str(t) for t in e.transcript),
               "audio": e.audio, "split": e.split}
        lines.append(json.dumps(rec, sort_keys=True))
    return lines


def write_manifest(path: str | Path, examples: Sequence[AudioExample]) -> None:
    validate_examples(examples)
    Path(path).write_text("\n".join(manifest_lines(examples)) + "\n")


def read_manifest(path: str | Path, vocab: int | None = None) -> list[AudioExample]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise DataError(f"{path}:1: missing manifest header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: header is not JSON ({exc.msg})") from exc
    if not isinstance(header, dict) or header.get("format") != MANIFEST_HEADER["format"]:
        raise DataError(f"{path}:1: not a cmdistill manifest header")
    if header.get("version") != MANIFEST_HEADER["version"]:
        raise DataError(f"{path}:1: unsupported manifest version {header.get('version')!r}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        out.append(_parse_record(line, f"{path}:{lineno}", vocab))
    validate_examples(out, vocab, str(path))
    return out


def _parse_record(line: str, where: str, vocab: int | None) -> AudioExample:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{where}: malformed JSON ({exc.msg})") from exc
    if not isinstance(rec, dict) or set(rec) != {"id", "transcript", "audio", "split"}:
        raise DataError(f"{where}: record must have exactly id, transcript, audio, split")
    if not isinstance(rec["id"], str) or not rec["id"]:
        raise DataError(f"{where}: id must be a non-empty string")
    if rec["split"] not in SPLITS:
        raise DataError(f"{where}: split must be one of {SPLITS}, got {rec['split']!r}")
    if not isinstance(rec["audio"], str) or not rec["audio"]:
        raise DataError(f"{where}: audio must be a path or {SYNTHETIC!r}")
    try:
        toks = tuple(int(t) for t in str(rec["transcript"]).split())
    except ValueError as exc:
        raise DataError(f"{where}: transcript must be space-separated integers") from exc
    if not toks:
        raise DataError(f"{where}: empty transcript")
    if any(t < 0 or (vocab is not None and t >= vocab) for t in toks):
        raise DataError(f"{where}: token id outside [0, {vocab})")
    return AudioExample(rec["id"], toks, rec["split"], rec["audio"])


def validate_examples(examples: Sequence[AudioExample], vocab: int | None = None,
                      where: str = "manifest") -> None:
    ids = [e.id for e in examples]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise DataError(f"{where}: duplicate id {dup!r}")
    for e in examples:
        if e.split not in SPLITS:
            raise DataError(f"{where}: {e.id}: bad split {e.split!r}")
        if vocab is not None and any(not 0 <= t < vocab for t in e.transcript):
            raise DataError(f"{where}: {e.id}: token id outside [0, {vocab})")
