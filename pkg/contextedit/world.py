"""
Deterministic synthetic scenes with applicable and non-applicable editing instructions.

Scenes are solid-colour rectangles and ellipses on a grey background, with
boxes aligned to the 8-pixel grid and never overlapping. Every instruction
carries the structured edit it describes, so goal images and masks are exact.
"""
from dataclasses import dataclass, field

import numpy as np

from contextedit.config import (
    GRID,
    IMAGE_SIZE,
    MAX_PROMPT_LENGTH,
    REFERENCE_CATEGORY_SHARES,
    Category,
    SceneConfig,
    Task,
)
from contextedit.errors import GenerationError
from contextedit.vocab import (
    BACKGROUND,
    COLORS,
    CONNECTIVE,
    HORIZONTAL,
    LABEL_SHAPES,
    PALETTE,
    PHANTOM_LABELS,
    SCENE_LABELS,
    VERTICAL,
    ShapeKind,
    compose_prompt,
)

Box = tuple[int, int, int, int]  # x, y, width, height in pixels

# Task mixture and per-task instruction counts, shaped like the benchmark split
TASK_SHARES = {Task.SINGLE: 0.25, Task.MULTI: 0.25, Task.CONTEXT: 0.5}
MULTI_COUNTS = ([2, 3], [120 / 717, 597 / 717])
CONTEXT_COUNTS = ([1, 2], [1053 / 2624, 1571 / 2624])
MAX_NONAPPLICABLE = 5
# "add a <colour> <label> at the <vertical> <horizontal>" plus its boundary and connective
MAX_INSTRUCTIONS = (MAX_PROMPT_LENGTH + 1) // 9


@dataclass(frozen=True)
class SceneObject:
    label: str
    color: str
    box: Box


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3, values are multiples of 1/255
    objects: list[SceneObject]

    def labels(self) -> set[str]:
        return {obj.label for obj in self.objects}

    def find(self, label: str) -> SceneObject | None:
        return next((obj for obj in self.objects if obj.label == label), None)


@dataclass
class Instruction:
    words: list[str]
    category: Category
    applicable: bool
    target_mask: np.ndarray  # H x W in {0, 1}; all zero when not applicable
    subject: str
    color: str | None = None
    replacement: str | None = None
    region: tuple[str, str] | None = None
    box: Box | None = None  # Edited box: the object's box, or the add stamp
    new_box: Box | None = None  # Box of the replacement object

    @property
    def text(self) -> str:
        return " ".join(self.words)


@dataclass
class Episode:
    scene: Scene
    instructions: list[Instruction]
    goal_image: np.ndarray
    goal_description: list[str]
    source_description: list[str]
    task: Task
    seed: int
    meta: dict[str, int] = field(default_factory=dict)

    @property
    def prompt(self) -> list[str]:
        return prompt_words(self.instructions)

    @property
    def applicable(self) -> list[bool]:
        return [ins.applicable for ins in self.instructions]

    def edit_region(self) -> np.ndarray:
        """Union of the applicable target masks."""
        union = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
        for ins in self.instructions:
            union = np.maximum(union, ins.target_mask)
        return union


def prompt_words(instructions: list[Instruction]) -> list[str]:
    return compose_prompt([ins.words for ins in instructions])


def color_value(color: str | tuple[int, int, int]) -> np.ndarray:
    rgb = PALETTE[color] if isinstance(color, str) else color
    return np.array(rgb, dtype=np.float64) / 255.0


def blank_image() -> np.ndarray:
    return np.broadcast_to(color_value(BACKGROUND), (IMAGE_SIZE, IMAGE_SIZE, 3)).copy()


def box_mask(box: Box) -> np.ndarray:
    x, y, w, h = box
    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    mask[y : y + h, x : x + w] = 1.0
    return mask


def shape_mask(label: str, box: Box) -> np.ndarray:
    """Pixels covered by an object of `label` drawn in `box`."""
    kind = LABEL_SHAPES[label][0]
    if kind is ShapeKind.RECTANGLE:
        return box_mask(box).astype(bool)
    x, y, w, h = box
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    dx = (xx + 0.5 - (x + w / 2)) / (w / 2)
    dy = (yy + 0.5 - (y + h / 2)) / (h / 2)
    return dx * dx + dy * dy <= 1.0


def draw(image: np.ndarray, obj: SceneObject) -> None:
    image[shape_mask(obj.label, obj.box)] = color_value(obj.color)


def erase(image: np.ndarray, box: Box) -> None:
    x, y, w, h = box
    image[y : y + h, x : x + w] = color_value(BACKGROUND)


def boxes_overlap(a: Box, b: Box) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def box_inside(box: Box) -> bool:
    x, y, w, h = box
    return x >= 0 and y >= 0 and x + w <= IMAGE_SIZE and y + h <= IMAGE_SIZE


def region_box(region: tuple[str, str], label: str) -> Box:
    """Box an `add` of `label` stamps into the named quadrant."""
    vertical, horizontal = region
    w, h = LABEL_SHAPES[label][1][0]
    half = IMAGE_SIZE // 2
    x = (0 if horizontal == "left" else half) + GRID
    y = (0 if vertical == "top" else half) + GRID
    return (x, y, w, h)


def region_of(box: Box) -> tuple[str, str]:
    x, y, w, h = box
    half = IMAGE_SIZE / 2
    return ("top" if y + h / 2 < half else "bottom", "left" if x + w / 2 < half else "right")


def caption(objects: list[SceneObject]) -> list[str]:
    """Templated description: `colour label at vertical horizontal`, joined by the connective."""
    if not objects:
        return ["empty", "scene"]
    words: list[str] = []
    for i, obj in enumerate(sorted(objects, key=lambda o: (o.box[1], o.box[0]))):
        if i > 0:
            words.append(CONNECTIVE)
        words.extend([obj.color, obj.label, "at", *region_of(obj.box)])
    return words


def gen_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    """Generate a scene of 1-4 non-overlapping objects with distinct labels."""
    config.validate()
    rng = np.random.default_rng(seed)
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    labels = [str(label) for label in rng.choice(SCENE_LABELS, size=count, replace=False)]
    image = blank_image()
    objects: list[SceneObject] = []
    for label in labels:
        sizes = [(w, h) for w, h in LABEL_SHAPES[label][1] if min(w, h) >= config.min_box]
        if not sizes:
            raise GenerationError(f"No size of '{label}' satisfies minimum box {config.min_box}")
        color = str(rng.choice(COLORS))
        for _ in range(config.max_retries):
            w, h = sizes[int(rng.integers(len(sizes)))]
            x = GRID * int(rng.integers(0, (IMAGE_SIZE - w) // GRID + 1))
            y = GRID * int(rng.integers(0, (IMAGE_SIZE - h) // GRID + 1))
            box = (x, y, w, h)
            if not any(boxes_overlap(box, other.box) for other in objects):
                break
        else:
            raise GenerationError(
                f"Couldn't place '{label}' after {config.max_retries} attempts (seed {seed})"
            )
        obj = SceneObject(label, color, box)
        draw(image, obj)
        objects.append(obj)
    return Scene(image=image, objects=objects)


def _fitting_size(label: str, box: Box) -> tuple[int, int] | None:
    _, _, w, h = box
    return next(((sw, sh) for sw, sh in LABEL_SHAPES[label][1] if sw <= w and sh <= h), None)


def _applicable_options(
    scene: Scene, used: set[str], claimed: list[Box], rng: np.random.Generator
) -> dict[Category, list[Instruction]]:
    present = scene.labels()
    free = [obj for obj in scene.objects if obj.label not in used]
    occupied = [obj.box for obj in scene.objects] + claimed
    options: dict[Category, list[Instruction]] = {c: [] for c in Category}

    for vertical in VERTICAL:
        for horizontal in HORIZONTAL:
            for label in SCENE_LABELS:
                box = region_box((vertical, horizontal), label)
                if any(boxes_overlap(box, other) for other in occupied):
                    continue
                color = str(rng.choice(COLORS))
                options[Category.ADD].append(
                    _instruction(Category.ADD, label, True, color=color, region=(vertical, horizontal), box=box)
                )
    for obj in free:
        options[Category.REMOVE].append(_instruction(Category.REMOVE, obj.label, True, box=obj.box))
        color = str(rng.choice([c for c in COLORS if c != obj.color]))
        options[Category.CHANGE].append(
            _instruction(Category.CHANGE, obj.label, True, color=color, box=obj.box)
        )
        for replacement in SCENE_LABELS:
            if replacement in present:
                continue
            size = _fitting_size(replacement, obj.box)
            if size is None:
                continue
            new_box = (obj.box[0], obj.box[1], *size)
            color = str(rng.choice(COLORS))
            options[Category.REPLACE].append(
                _instruction(
                    Category.REPLACE,
                    obj.label,
                    True,
                    color=color,
                    replacement=replacement,
                    box=obj.box,
                    new_box=new_box,
                )
            )
    return options


def _nonapplicable_options(
    scene: Scene, applicable: list[Instruction], rng: np.random.Generator
) -> dict[Category, list[Instruction]]:
    # Must stay non-applicable wherever the shuffle puts them among the applicable edits
    introduced = {ins.subject for ins in applicable if ins.category is Category.ADD}
    introduced |= {ins.replacement for ins in applicable if ins.category is Category.REPLACE}
    vacated = {ins.subject for ins in applicable if ins.category in (Category.REMOVE, Category.REPLACE)}
    standing = [obj for obj in scene.objects if obj.label not in vacated]
    absent = [label for label in SCENE_LABELS if label not in scene.labels() | introduced] + PHANTOM_LABELS

    options: dict[Category, list[Instruction]] = {c: [] for c in Category}
    for vertical in VERTICAL:
        for horizontal in HORIZONTAL:
            for label in SCENE_LABELS:
                box = region_box((vertical, horizontal), label)
                if any(boxes_overlap(box, obj.box) for obj in standing):
                    options[Category.ADD].append(
                        _instruction(
                            Category.ADD,
                            label,
                            False,
                            color=str(rng.choice(COLORS)),
                            region=(vertical, horizontal),
                        )
                    )
    for label in absent:
        options[Category.REMOVE].append(_instruction(Category.REMOVE, label, False))
        options[Category.CHANGE].append(
            _instruction(Category.CHANGE, label, False, color=str(rng.choice(COLORS)))
        )
        replacement = str(rng.choice([other for other in SCENE_LABELS if other != label]))
        options[Category.REPLACE].append(
            _instruction(
                Category.REPLACE, label, False, color=str(rng.choice(COLORS)), replacement=replacement
            )
        )
    return options


def _instruction(
    category: Category,
    subject: str,
    applicable: bool,
    *,
    color: str | None = None,
    replacement: str | None = None,
    region: tuple[str, str] | None = None,
    box: Box | None = None,
    new_box: Box | None = None,
) -> Instruction:
    if category is Category.ADD:
        words = ["add", "a", color, subject, "at", "the", *region]
    elif category is Category.REMOVE:
        words = ["remove", "the", subject]
    elif category is Category.REPLACE:
        words = ["replace", "the", subject, "with", "a", color, replacement]
    else:
        words = ["make", "the", subject, color]
    mask = box_mask(box) if applicable else np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    return Instruction(
        words=words,
        category=category,
        applicable=applicable,
        target_mask=mask,
        subject=subject,
        color=color,
        replacement=replacement,
        region=region,
        box=box if applicable else None,
        new_box=new_box if applicable else None,
    )


def _pick(options: dict[Category, list[Instruction]], rng: np.random.Generator) -> Instruction | None:
    """Draw a category by the reference shares among feasible ones, then an option uniformly."""
    feasible = [c for c in Category if options[c]]
    if not feasible:
        return None
    weights = np.array([REFERENCE_CATEGORY_SHARES[c] for c in feasible])
    category = feasible[int(rng.choice(len(feasible), p=weights / weights.sum()))]
    return options[category][int(rng.integers(len(options[category])))]


def gen_instructions(
    scene: Scene,
    n_applicable: int,
    n_nonapplicable: int,
    seed: int | np.random.Generator,
) -> list[Instruction]:
    """
    Generate a shuffled mix of applicable and non-applicable instructions.

    Applicable instructions target distinct objects or free quadrants, so
    their masks are pairwise disjoint. Non-applicable ones are distinct and
    mention labels that neither the scene nor any applicable edit provides,
    or ask to add into a quadrant no applicable edit clears.
    """
    if n_applicable < 0 or n_nonapplicable < 0 or n_applicable + n_nonapplicable < 1:
        raise GenerationError("Need at least one instruction and no negative counts")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    used: set[str] = set()
    claimed: list[Box] = []
    instructions: list[Instruction] = []

    for _ in range(n_applicable):
        choice = _pick(_applicable_options(scene, used, claimed, rng), rng)
        if choice is None:
            raise GenerationError(
                f"Scene supports only {len(instructions)} applicable edits, {n_applicable} requested"
            )
        if choice.category is Category.ADD:
            claimed.append(choice.box)
        else:
            used.add(choice.subject)
        instructions.append(choice)
    applicable = list(instructions)
    for _ in range(n_nonapplicable):
        seen = {ins.text for ins in instructions}
        options = {
            category: [ins for ins in found if ins.text not in seen]
            for category, found in _nonapplicable_options(scene, applicable, rng).items()
        }
        choice = _pick(options, rng)
        if choice is None:
            raise GenerationError("Couldn't build a non-applicable instruction for this scene")
        instructions.append(choice)

    order = rng.permutation(len(instructions))
    return [instructions[i] for i in order]


def render_goal(scene: Scene, instructions: list[Instruction]) -> tuple[np.ndarray, list[str]]:
    """Apply the applicable edits in list order; return the goal image and its caption."""
    image = scene.image.copy()
    objects = list(scene.objects)
    for ins in instructions:
        if not ins.applicable:
            continue
        if ins.category is Category.ADD:
            obj = SceneObject(ins.subject, ins.color, ins.box)
            draw(image, obj)
            objects.append(obj)
            continue
        target = next((obj for obj in objects if obj.label == ins.subject), None)
        if target is None:
            raise GenerationError(f"'{ins.text}' references '{ins.subject}', which isn't in the scene")
        index = objects.index(target)
        if ins.category is Category.REMOVE:
            erase(image, target.box)
            objects.pop(index)
        elif ins.category is Category.CHANGE:
            changed = SceneObject(target.label, ins.color, target.box)
            draw(image, changed)
            objects[index] = changed
        else:
            erase(image, target.box)
            replacement = SceneObject(ins.replacement, ins.color, ins.new_box)
            draw(image, replacement)
            objects[index] = replacement
    return image, caption(objects)


def _sub_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def gen_episode(seed: int, task: Task | None = None, config: SceneConfig = SceneConfig()) -> Episode:
    """Generate one episode; retries with derived seeds when a scene can't host the edits."""
    rng = np.random.default_rng(seed)
    if task is None:
        tasks = list(TASK_SHARES)
        task = tasks[int(rng.choice(len(tasks), p=list(TASK_SHARES.values())))]
    if task is Task.SINGLE:
        n_applicable, n_nonapplicable = 1, 0
    elif task is Task.MULTI:
        n_applicable, n_nonapplicable = int(rng.choice(MULTI_COUNTS[0], p=MULTI_COUNTS[1])), 0
    else:
        n_applicable = int(rng.choice(CONTEXT_COUNTS[0], p=CONTEXT_COUNTS[1]))
        n_nonapplicable = int(rng.integers(1, min(MAX_NONAPPLICABLE, MAX_INSTRUCTIONS - n_applicable) + 1))

    for attempt in range(config.max_retries):
        scene_seed = _sub_seed(seed, attempt)
        scene = gen_scene(scene_seed, config)
        try:
            instructions = gen_instructions(scene, n_applicable, n_nonapplicable, _sub_seed(seed, attempt, 1))
        except GenerationError:
            continue
        goal_image, goal_description = render_goal(scene, instructions)
        return Episode(
            scene=scene,
            instructions=instructions,
            goal_image=goal_image,
            goal_description=goal_description,
            source_description=caption(scene.objects),
            task=task,
            seed=seed,
            meta={"scene_seed": scene_seed, "attempt": attempt},
        )
    raise GenerationError(f"No scene could host a '{task.value}' episode (seed {seed})")
