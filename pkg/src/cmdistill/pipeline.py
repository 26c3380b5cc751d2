"""End-to-end orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .audio import AudioEncoder, SynthSpec
from .checkpoint import prefixed, section
from .config import RunConfig
from .data import (AudioExample, SpeechSet, build_speech_set, by_split, make_examples, make_language,
                   make_synth_spec)
from .distill import StudentPipeline
from .nn import LayerNorm, Linear
from .numcore import Rng
from .qformer import DonorDecoder, QFormerAdapter, make_decoder_layers, pretrain_donor
from .toylm import SyntheticCorpus, SyntheticLanguage, ToyLM, pretrain_lm


@dataclass
class World:
    """Everything a seed determines before any model is trained."""

    cfg: RunConfig
    language: SyntheticLanguage
    spec: SynthSpec
    examples: list[AudioExample]

    @property
    def rng(self) -> Rng:
        return Rng(self.cfg.seed)

    def speech_set(self, split: str, root=None, examples=None) -> SpeechSet:
        pool = self.examples if examples is None else examples
        return build_speech_set(by_split(pool, split), self.spec, self.cfg.audio, self.cfg.model,
                                self.rng.spawn("render"), root)


def make_world(cfg: RunConfig) -> World:
    language = make_language(cfg.model, cfg.seed)
    examples = make_examples(language, cfg.data, Rng(cfg.seed).spawn("data"))
    return World(cfg, language, make_synth_spec(language, cfg.audio), examples)


def pretrain_teacher(world: World, log: Callable | None = None) -> tuple[ToyLM, dict]:
    cfg = world.cfg
    rng = world.rng
    corpus = SyntheticCorpus.generate(world.language, cfg.data.lm_train, cfg.data.lm_held_out,
                                      rng.spawn("lm-corpus"))
    return pretrain_lm(corpus, cfg.model, cfg.lm_pretrain, rng.spawn("teacher"), log, _dtype(cfg))


def pretrain_donor_models(world: World, train_set: SpeechSet, dev_set: SpeechSet,
                          log: Callable | None = None):
    return pretrain_donor(train_set.feats, train_set.transcripts, dev_set.feats, dev_set.transcripts,
                          world.cfg.model, world.cfg.donor, world.rng.spawn("donor"), log, _dtype(world.cfg))


# -- blank models for checkpoint loading ----------------------------------------------

def _dtype(cfg: RunConfig):
    return np.float64 if cfg.precision == "float64" else np.float32


def blank_lm(cfg: RunConfig) -> ToyLM:
    m = cfg.model
    return ToyLM(m.vocab, m.lm_width, m.lm_layers, m.lm_heads, m.lm_max_len, Rng(0), _dtype(cfg))


def blank_encoder(cfg: RunConfig) -> AudioEncoder:
    m = cfg.model
    return AudioEncoder(cfg.audio.n_mels, m.audio_width, m.encoder_layers, m.heads, Rng(0), _dtype(cfg))


def blank_donor(cfg: RunConfig) -> DonorDecoder:
    m = cfg.model
    return DonorDecoder(m.vocab, m.audio_width, m.decoder_layers, m.heads, m.decoder_max_len, Rng(0),
                        _dtype(cfg))


def blank_adapter(cfg: RunConfig) -> QFormerAdapter:
    m = cfg.model
    dt = _dtype(cfg)
    return QFormerAdapter(np.zeros((m.n_queries, m.audio_width), dtype=dt),
                          make_decoder_layers(m.audio_width, m.heads, m.decoder_layers, Rng(0), dt),
                          LayerNorm(m.audio_width, dtype=dt), Linear(m.audio_width, m.lm_width, Rng(0), dtype=dt))


def teacher_state(lm: ToyLM) -> dict[str, np.ndarray]:
    return prefixed("lm", lm.state_dict())


def donor_state(encoder: AudioEncoder, decoder: DonorDecoder) -> dict[str, np.ndarray]:
    return {**prefixed("encoder", encoder.state_dict()), **prefixed("decoder", decoder.state_dict())}


def load_teacher(cfg: RunConfig, tensors) -> ToyLM:
    lm = blank_lm(cfg)
    lm.load_state_dict(section(tensors, "lm"))
    return lm.freeze()


def load_donor(cfg: RunConfig, tensors) -> tuple[AudioEncoder, DonorDecoder]:
    enc, dec = blank_encoder(cfg), blank_donor(cfg)
    enc.load_state_dict(section(tensors, "encoder"))
    dec.load_state_dict(section(tensors, "decoder"))
    enc.set_requires_grad(False)
    dec.set_requires_grad(False)
    return enc, dec


def load_student(cfg: RunConfig, tensors, lm: ToyLM) -> StudentPipeline:
    enc, adapter = blank_encoder(cfg), blank_adapter(cfg)
    enc.load_state_dict(section(tensors, "encoder"))
    adapter.load_state_dict(section(tensors, "adapter"))
    student = StudentPipeline(enc, adapter, lm)
    enc.set_requires_grad(False)
    adapter.set_requires_grad(False)
    return student
