"""
The three training phases: main (head, broadcaster, decoder, denoiser),
surrogate (surrogate only) and refine (main set against the frozen surrogate).
"""
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from rich.progress import Progress

from contextedit.broadcaster import align, alignment_targets, broadcast_ce_loss
from contextedit.config import Phase, TrainConfig
from contextedit.decoder import dice_loss, empty_mask, mask_bce_loss
from contextedit.diffusion import concat_masks, denoising_loss, sample
from contextedit.errors import ContractError, PhaseOrderError
from contextedit.head import OutputTokenSet, classify, token_ce_loss
from contextedit.model import EditingModel
from contextedit.numerics import Tensor, backward, no_grad
from contextedit.optim import AdamW
from contextedit.surrogate import (
    SurrogateInput,
    hard_coverage,
    refine_step,
    soft_coverage,
    surrogate_mse_loss,
)
from contextedit.world import Episode

PHASE_ORDER = list(Phase)


@dataclass
class LossComponents:
    token: Tensor
    broadcast: Tensor
    dice: Tensor
    bce: Tensor

    def values(self) -> dict[str, float]:
        return {
            "token": self.token.item(),
            "broadcast": self.broadcast.item(),
            "dice": self.dice.item(),
            "bce": self.bce.item(),
        }


def loss_weights(config: TrainConfig) -> tuple[float, float, float, float]:
    return (config.lambda_token, config.lambda_broadcast, config.lambda_dice, config.lambda_bce)


def main_loss(components: LossComponents, weights: Sequence[float]) -> Tensor:
    """Weighted sum of the token, broadcast, dice and BCE losses."""
    w_token, w_broadcast, w_dice, w_bce = weights
    return (
        components.token * w_token
        + components.broadcast * w_broadcast
        + components.dice * w_dice
        + components.bce * w_bce
    )


@dataclass
class EpisodeInputs:
    """Frozen-encoder outputs and targets of one episode, computed once per run."""

    episode: Episode
    ids: list[int]
    image_tokens: Tensor
    text: Tensor
    targets: np.ndarray
    concatenated: np.ndarray  # Ground-truth masks under the ground-truth alignment

    @classmethod
    def build(cls, model: EditingModel, episode: Episode) -> "EpisodeInputs":
        with no_grad():
            ids, image_tokens, text = model.encode(episode.scene.image, episode.prompt)
        targets = alignment_targets(ids)
        return cls(
            episode=episode,
            ids=ids,
            image_tokens=image_tokens,
            text=text,
            targets=targets,
            concatenated=concat_masks([ins.target_mask for ins in episode.instructions], targets),
        )


def episode_components(model: EditingModel, inputs: EpisodeInputs) -> tuple[LossComponents, OutputTokenSet, Tensor]:
    """
    The four main-loss terms for one episode.

    The decoder is supervised on the ground-truth applicable instructions, so
    mask losses don't depend on the head's current classification.
    """
    episode = inputs.episode
    tokens = model.head(inputs.image_tokens, inputs.ids)
    similarity = model.broadcaster.similarity(tokens.embeddings, inputs.text)
    applicable = [i for i, ins in enumerate(episode.instructions) if ins.applicable]
    if applicable:
        probabilities = model.decoder.mask_probabilities(
            inputs.image_tokens, inputs.text, tokens.embeddings, applicable
        )
        dice = sum_mean(
            [dice_loss(probabilities[row], episode.instructions[i].target_mask) for row, i in enumerate(applicable)]
        )
        bce = sum_mean(
            [mask_bce_loss(probabilities[row], episode.instructions[i].target_mask) for row, i in enumerate(applicable)]
        )
    else:
        dice = bce = Tensor(0.0)
    components = LossComponents(
        token=token_ce_loss(tokens.class_logits, episode.applicable),
        broadcast=broadcast_ce_loss(similarity, inputs.targets),
        dice=dice,
        bce=bce,
    )
    return components, tokens, similarity


def sum_mean(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(losses))


def check_phase_order(phase: Phase, completed: Sequence[Phase]) -> None:
    """A phase may only run when exactly the phases before it have completed."""
    required = PHASE_ORDER[: PHASE_ORDER.index(phase)]
    if list(completed) != required:
        done = ", ".join(p.value for p in completed) or "none"
        needed = ", ".join(p.value for p in required) or "none"
        raise PhaseOrderError(
            f"Phase '{phase.value}' needs completed phases [{needed}], checkpoint has [{done}]"
        )


@dataclass
class PhaseResult:
    phase: Phase
    steps: int
    losses: list[dict[str, float]] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)


class LossLog:
    """Averages named loss values over `every` steps."""

    def __init__(self, every: int, progress: Progress | None = None, phase: Phase = Phase.MAIN):
        self.every = every
        self.progress = progress
        self.phase = phase
        self.entries: list[dict[str, float]] = []
        self._sums: dict[str, float] = {}
        self._count = 0

    def add(self, step: int, values: dict[str, float]) -> None:
        for key, value in values.items():
            self._sums[key] = self._sums.get(key, 0.0) + value
        self._count += 1
        if step % self.every == 0:
            self.flush(step)

    def flush(self, step: int) -> None:
        if not self._count:
            return
        entry = {"step": float(step), **{k: v / self._count for k, v in self._sums.items()}}
        self.entries.append(entry)
        self._sums, self._count = {}, 0
        if self.progress is not None:
            details = "  ".join(f"{k} {v:.4f}" for k, v in entry.items() if k != "step")
            self.progress.console.print(f"[bold]{self.phase.value}[/] step {step}: {details}")


def _batches(rng: np.random.Generator, size: int, batch_size: int) -> np.ndarray:
    return rng.choice(size, size=min(batch_size, size), replace=False)


def _phase_rng(config: TrainConfig, phase: Phase) -> np.random.Generator:
    return np.random.default_rng([config.seed, PHASE_ORDER.index(phase)])


def train_main(
    model: EditingModel,
    episodes: Sequence[Episode],
    config: TrainConfig,
    progress: Progress | None = None,
) -> PhaseResult:
    """Minimize the weighted main loss plus the denoiser's noise-prediction loss."""
    rng = _phase_rng(config, Phase.MAIN)
    inputs = [EpisodeInputs.build(model, ep) for ep in episodes]
    optimizer = AdamW(model.phase_parameters(Phase.MAIN), lr=config.lr_main, weight_decay=config.weight_decay)
    weights = loss_weights(config)
    log = LossLog(config.log_every, progress, Phase.MAIN)
    task = progress.add_task("Main phase", total=config.main_steps) if progress is not None else None

    for step in range(1, config.main_steps + 1):
        batch = _batches(rng, len(inputs), config.batch_size)
        totals: dict[str, float] = {}
        for index in batch:
            item = inputs[index]
            components, _, _ = episode_components(model, item)
            loss = main_loss(components, weights)
            denoise = denoising_loss(
                model.denoiser,
                item.episode.scene.image,
                item.episode.goal_image,
                item.text,
                item.concatenated,
                rng,
                config.cond_dropout,
                model.schedule,
            )
            backward((loss + denoise) * (1.0 / len(batch)))
            for key, value in {**components.values(), "main": loss.item(), "denoise": denoise.item()}.items():
                totals[key] = totals.get(key, 0.0) + value / len(batch)
        optimizer.step()
        optimizer.zero_grad()
        log.add(step, totals)
        if task is not None:
            progress.advance(task)
    log.flush(config.main_steps)
    return PhaseResult(Phase.MAIN, config.main_steps, log.entries)


def variant_masks(
    model: EditingModel, inputs: EpisodeInputs, variant: str
) -> np.ndarray:
    """Concatenated mask of one surrogate training variant."""
    episode = inputs.episode
    if variant == "ground_truth":
        return inputs.concatenated
    if variant == "empty":
        return concat_masks([empty_mask()], np.zeros(len(inputs.ids), dtype=np.int64))
    with no_grad():
        analysis = model.analyze(episode.scene.image, episode.prompt)
    return analysis.concatenated


def surrogate_pairs(
    model: EditingModel,
    episodes: Sequence[Episode],
    config: TrainConfig,
    seed: int,
    progress: Progress | None = None,
    description: str = "Scoring edits",
) -> list[tuple[SurrogateInput, float]]:
    """
    (surrogate input, actual proxy CLIP-T) pairs: every episode is edited under
    each mask variant and the result is scored against the goal description.
    """
    pairs = []
    task = None
    if progress is not None:
        task = progress.add_task(description, total=len(episodes) * len(config.surrogate_variants))
    for i, episode in enumerate(episodes):
        inputs = EpisodeInputs.build(model, episode)
        for j, variant in enumerate(config.surrogate_variants):
            concatenated = variant_masks(model, inputs, variant)
            edited = sample(
                model.denoiser,
                episode.scene.image,
                inputs.text,
                concatenated,
                config.guidance,
                int(np.random.SeedSequence([seed, i, j]).generate_state(1)[0]),
                model.schedule,
            )
            actual = model.proxy.clip_t(edited, episode.goal_description)
            pairs.append((SurrogateInput.build(inputs.image_tokens, inputs.text, hard_coverage(concatenated)), actual))
            if task is not None:
                progress.advance(task)
    return pairs


def pair_mse(model: EditingModel, pairs: Sequence[tuple[SurrogateInput, float]]) -> float:
    with no_grad():
        predicted = [model.surrogate.predict(inp) for inp, _ in pairs]
        return surrogate_mse_loss(predicted, [actual for _, actual in pairs]).item()


def train_surrogate(
    model: EditingModel,
    episodes: Sequence[Episode],
    config: TrainConfig,
    validation: Sequence[Episode] = (),
    progress: Progress | None = None,
) -> PhaseResult:
    """Fit the surrogate to actual proxy scores; nothing else is updated."""
    rng = _phase_rng(config, Phase.SURROGATE)
    pairs = surrogate_pairs(model, episodes, config, config.seed, progress)
    optimizer = AdamW(
        model.phase_parameters(Phase.SURROGATE), lr=config.lr_surrogate, weight_decay=config.weight_decay
    )
    log = LossLog(config.log_every, progress, Phase.SURROGATE)
    task = progress.add_task("Surrogate phase", total=config.surrogate_steps) if progress is not None else None

    for step in range(1, config.surrogate_steps + 1):
        batch = _batches(rng, len(pairs), config.batch_size)
        predicted = [model.surrogate.predict(pairs[i][0]) for i in batch]
        loss = surrogate_mse_loss(predicted, [pairs[i][1] for i in batch])
        backward(loss)
        optimizer.step()
        optimizer.zero_grad()
        log.add(step, {"mse": loss.item()})
        if task is not None:
            progress.advance(task)
    log.flush(config.surrogate_steps)

    actual = np.array([a for _, a in pairs])
    metrics = {"train_mse": pair_mse(model, pairs), "train_baseline_mse": float(actual.var())}
    if validation:
        val_pairs = surrogate_pairs(model, validation, config, config.seed + 1, progress, "Scoring validation edits")
        val_actual = np.array([a for _, a in val_pairs])
        metrics["val_mse"] = pair_mse(model, val_pairs)
        # Constant predictor at the training mean
        metrics["val_baseline_mse"] = float(np.mean((val_actual - actual.mean()) ** 2))
    return PhaseResult(Phase.SURROGATE, config.surrogate_steps, log.entries, metrics)


def refine_components(
    model: EditingModel, inputs: EpisodeInputs, config: TrainConfig
) -> tuple[Tensor, Tensor, LossComponents]:
    """Updated loss of one episode and the surrogate's prediction for its current masks."""
    components, tokens, similarity = episode_components(model, inputs)
    labels = classify(tokens.class_logits)
    masks, probabilities = model.decoder.decode(inputs.image_tokens, inputs.text, tokens.embeddings, labels)
    concatenated = concat_masks(masks, align(similarity))
    coverage = soft_coverage(concatenated, similarity, probabilities)
    predicted = model.surrogate.predict(SurrogateInput.build(inputs.image_tokens, inputs.text, coverage))
    main = main_loss(components, loss_weights(config))
    updated = refine_step(main, [predicted], config.oracle_score, config.lambda_mse, model.surrogate)
    return updated, predicted, components


def train_refine(
    model: EditingModel,
    episodes: Sequence[Episode],
    config: TrainConfig,
    progress: Progress | None = None,
) -> PhaseResult:
    """Keep the main losses while pushing predicted scores toward the oracle score."""
    model.surrogate.freeze()
    rng = _phase_rng(config, Phase.REFINE)
    inputs = [EpisodeInputs.build(model, ep) for ep in episodes]
    optimizer = AdamW(model.phase_parameters(Phase.REFINE), lr=config.lr_refine, weight_decay=config.weight_decay)
    log = LossLog(config.log_every, progress, Phase.REFINE)
    task = progress.add_task("Refine phase", total=config.refine_steps) if progress is not None else None

    for step in range(1, config.refine_steps + 1):
        batch = _batches(rng, len(inputs), config.batch_size)
        totals: dict[str, float] = {}
        for index in batch:
            updated, predicted, components = refine_components(model, inputs[index], config)
            backward(updated * (1.0 / len(batch)))
            values = {**components.values(), "updated": updated.item(), "predicted": predicted.item()}
            for key, value in values.items():
                totals[key] = totals.get(key, 0.0) + value / len(batch)
        optimizer.step()
        optimizer.zero_grad()
        log.add(step, totals)
        if task is not None:
            progress.advance(task)
    log.flush(config.refine_steps)
    return PhaseResult(Phase.REFINE, config.refine_steps, log.entries)


def updated_loss(model: EditingModel, episodes: Sequence[Episode], config: TrainConfig) -> float:
    """Mean refinement loss over `episodes`, without recording gradients."""
    with no_grad():
        values = [refine_components(model, EpisodeInputs.build(model, ep), config)[0].item() for ep in episodes]
    return float(np.mean(values))


def train(
    phase: Phase,
    model: EditingModel,
    episodes: Sequence[Episode],
    config: TrainConfig,
    completed: Sequence[Phase] = (),
    validation: Sequence[Episode] = (),
    progress: Progress | None = None,
) -> PhaseResult:
    """Run one phase after checking it follows the completed ones."""
    check_phase_order(phase, completed)
    if not episodes:
        raise ContractError("Training needs at least one episode")
    if phase is Phase.MAIN:
        return train_main(model, episodes, config, progress)
    if phase is Phase.SURROGATE:
        return train_surrogate(model, episodes, config, validation, progress)
    start = None
    if validation:
        model.surrogate.freeze()
        start = updated_loss(model, validation, config)
    result = train_refine(model, episodes, config, progress)
    if start is not None:
        result.metrics["val_updated_loss_start"] = start
        result.metrics["val_updated_loss"] = updated_loss(model, validation, config)
    return result
