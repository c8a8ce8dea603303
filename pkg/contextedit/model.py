"""The complete editing model and the inference pipeline: classify, broadcast, decode, edit."""
from dataclasses import dataclass

import numpy as np

from contextedit.broadcaster import TokenBroadcaster, align
from contextedit.config import GuidanceConfig, Phase, TokenLabel, TrainConfig
from contextedit.decoder import TokenDecoder
from contextedit.diffusion import Denoiser, NoiseSchedule, concat_masks, sample
from contextedit.encoders import ProxyClip, TextEncoder, VisionEncoder
from contextedit.errors import ContractError
from contextedit.head import InstructionHead, OutputTokenSet, classify
from contextedit.nn import Module
from contextedit.numerics import Tensor, no_grad
from contextedit.surrogate import Surrogate
from contextedit.vocab import compose_prompt, split_words, tokenize
from contextedit.world import Episode


@dataclass
class Analysis:
    """Everything the model derives from an image and a prompt before sampling."""

    prompt: list[str]
    ids: list[int]
    image_tokens: Tensor
    text: Tensor
    tokens: OutputTokenSet
    labels: list[TokenLabel]
    similarity: Tensor
    alignment: np.ndarray
    masks: list[np.ndarray]
    probabilities: list[Tensor | None]
    concatenated: np.ndarray


@dataclass
class EditResult:
    image: np.ndarray
    analysis: Analysis

    @property
    def labels(self) -> list[TokenLabel]:
        return self.analysis.labels

    @property
    def masks(self) -> list[np.ndarray]:
        return self.analysis.masks


class EditingModel(Module):
    """
    Frozen encoders, the instruction head, broadcaster, decoder, denoiser and surrogate.

    All sub-seeds derive from `config.seed`; the encoders and the proxy CLIP
    space use their own fixed seeds. The head is adapted with LoRA at
    construction, so checkpoints always contain the adapter blocks.
    """

    def __init__(self, config: TrainConfig = TrainConfig()):
        seeds = [int(s) for s in np.random.SeedSequence(config.seed).generate_state(6)]
        self.config = config
        self.text_encoder = TextEncoder()
        self.vision_encoder = VisionEncoder()
        self.head = InstructionHead(seeds[0])
        self.adapted = self.head.adapt(
            config.lora_rank, config.lora_scale, config.lora_targets, np.random.default_rng(seeds[1])
        )
        self.broadcaster = TokenBroadcaster(seeds[2])
        self.decoder = TokenDecoder(seeds[3])
        self.denoiser = Denoiser(seeds[4])
        self.surrogate = Surrogate(seeds[5])
        self.proxy = ProxyClip()
        self.schedule = NoiseSchedule()

    def phase_modules(self, phase: Phase) -> dict[str, Module]:
        """Modules whose trainable parameters a phase updates."""
        if phase is Phase.MAIN:
            names = ["head", "broadcaster", "decoder", "denoiser"]
        elif phase is Phase.SURROGATE:
            names = ["surrogate"]
        else:
            names = ["head", "broadcaster", "decoder"]
        return {name: getattr(self, name) for name in names}

    def phase_parameters(self, phase: Phase) -> list[Tensor]:
        return [p for module in self.phase_modules(phase).values() for p in module.trainable_parameters()]

    def encode(self, image: np.ndarray, prompt: list[str]) -> tuple[list[int], Tensor, Tensor]:
        ids = tokenize(prompt)
        return ids, self.vision_encoder.encode_vision(image), self.text_encoder.embed_text(ids)

    def analyze(self, image: np.ndarray, prompt: list[str]) -> Analysis:
        """Run head, broadcaster and decoder on a prompt already closed by boundary markers."""
        ids, image_tokens, text = self.encode(image, prompt)
        if not ids:
            raise ContractError("Can't edit with an empty prompt")
        tokens = self.head(image_tokens, ids)
        labels = classify(tokens.class_logits)
        similarity = self.broadcaster.similarity(tokens.embeddings, text)
        alignment = align(similarity)
        masks, probabilities = self.decoder.decode(image_tokens, text, tokens.embeddings, labels)
        return Analysis(
            prompt=list(prompt),
            ids=ids,
            image_tokens=image_tokens,
            text=text,
            tokens=tokens,
            labels=labels,
            similarity=similarity,
            alignment=alignment,
            masks=masks,
            probabilities=probabilities,
            concatenated=concat_masks(masks, alignment),
        )

    def edit(
        self,
        image: np.ndarray,
        instructions: list[str] | list[list[str]],
        seed: int = 0,
        guidance: GuidanceConfig | None = None,
    ) -> EditResult:
        """Edit `image` with one or more instructions; only [MASK] instructions can change pixels."""
        if not instructions:
            raise ContractError("At least one instruction is required")
        prompt = compose_prompt([split_words(ins) for ins in instructions])
        with no_grad():
            analysis = self.analyze(image, prompt)
        edited = sample(
            self.denoiser,
            image,
            analysis.text,
            analysis.concatenated,
            guidance or self.config.guidance,
            seed,
            self.schedule,
        )
        return EditResult(image=edited, analysis=analysis)

    def edit_episode(self, episode: Episode, seed: int = 0, guidance: GuidanceConfig | None = None) -> EditResult:
        return self.edit(episode.scene.image, [ins.words for ins in episode.instructions], seed, guidance)
