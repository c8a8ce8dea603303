from collections import Counter

import numpy as np
import pytest

from contextedit.config import GRID, MAX_PROMPT_LENGTH, REFERENCE_CATEGORY_SHARES, Category, SceneConfig, Task
from contextedit.errors import ConfigError, GenerationError
from contextedit.vocab import (
    BACKGROUND,
    BOUNDARY,
    CONNECTIVE,
    PALETTE,
    WORD_IDS,
    compose_prompt,
    instruction_segments,
    tokenize,
)
from contextedit.world import (
    MAX_INSTRUCTIONS,
    Episode,
    Instruction,
    Scene,
    SceneObject,
    blank_image,
    box_mask,
    box_inside,
    boxes_overlap,
    caption,
    draw,
    gen_episode,
    gen_instructions,
    gen_scene,
    region_box,
    render_goal,
)


def check_episode(episode: Episode) -> None:
    """Raise AssertionError on any violated mask, applicability or goal-image invariant."""
    scene, instructions = episode.scene, episode.instructions
    assert all(box_inside(obj.box) for obj in scene.objects)
    union = np.zeros(scene.image.shape[:2])
    for ins in instructions:
        assert set(np.unique(ins.target_mask)) <= {0.0, 1.0}
        if ins.applicable:
            assert ins.target_mask.any()
            assert not (union > 0)[ins.target_mask > 0].any(), "applicable masks overlap"
            changed = np.any(episode.goal_image != scene.image, axis=-1)
            assert changed[ins.target_mask > 0].any()
            union = np.maximum(union, ins.target_mask)
        else:
            assert not ins.target_mask.any()
    outside = union == 0
    assert np.array_equal(episode.goal_image[outside], scene.image[outside])
    assert np.array_equal(union, episode.edit_region())
    tokenize(episode.prompt)
    tokenize(episode.goal_description)


def test_scene_is_deterministic():
    a, b = gen_scene(3), gen_scene(3)
    assert a.objects == b.objects
    assert np.array_equal(a.image, b.image)


def test_scene_config_is_validated():
    with pytest.raises(ConfigError):
        gen_scene(0, SceneConfig(min_objects=3, max_objects=2))
    with pytest.raises(ConfigError):
        gen_scene(0, SceneConfig(min_box=12))


def test_instruction_counts_per_task():
    single = gen_episode(1, Task.SINGLE)
    assert single.applicable == [True]
    multi = gen_episode(2, Task.MULTI)
    assert len(multi.instructions) in (2, 3) and all(multi.applicable)
    context = gen_episode(3, Task.CONTEXT)
    assert context.applicable.count(True) in (1, 2)
    assert 1 <= context.applicable.count(False) <= 5
    assert len(context.instructions) <= MAX_INSTRUCTIONS


@pytest.mark.parametrize("seed", range(200))
def test_episode_invariants(seed):
    check_episode(gen_episode(seed))


def test_episode_is_deterministic():
    a, b = gen_episode(11), gen_episode(11)
    assert a.prompt == b.prompt and a.task is b.task and a.meta == b.meta
    assert np.array_equal(a.goal_image, b.goal_image)


def test_non_applicable_leaves_goal_unchanged():
    scene = gen_scene(5)
    instructions = gen_instructions(scene, 0, 2, seed=5)
    goal, description = render_goal(scene, instructions)
    assert np.array_equal(goal, scene.image)
    assert description == caption(scene.objects)


def test_instruction_request_bounds():
    scene = gen_scene(0)
    with pytest.raises(GenerationError):
        gen_instructions(scene, 0, 0, seed=0)
    with pytest.raises(GenerationError):
        gen_instructions(scene, 20, 0, seed=0)


def test_render_goal_rejects_missing_subject():
    box = (0, 0, 16, 16)
    ins = Instruction(["remove", "the", "circle"], Category.REMOVE, True, box_mask(box), "circle", box=box)
    with pytest.raises(GenerationError):
        render_goal(Scene(blank_image(), []), [ins])


def test_caption_orders_objects_and_names_regions():
    objects = [SceneObject("circle", "red", (40, 40, 16, 16)), SceneObject("square", "blue", (0, 0, 16, 16))]
    assert caption(objects) == [
        *["blue", "square", "at", "top", "left"],
        CONNECTIVE,
        *["red", "circle", "at", "bottom", "right"],
    ]
    assert caption([]) == ["empty", "scene"]


def test_draw_stays_inside_the_box():
    image = blank_image()
    draw(image, SceneObject("oval", "green", (8, 16, 24, 16)))
    changed = np.any(image != blank_image(), axis=-1)
    assert changed[16:32, 8:32].any() and not changed[:16].any() and not changed[:, 32:].any()


def test_prompt_grammar():
    words = compose_prompt([["remove", "the", "bar"], ["make", "the", "circle", "red"]])
    assert words == ["remove", "the", "bar", BOUNDARY, CONNECTIVE, "make", "the", "circle", "red", BOUNDARY]
    assert instruction_segments(tokenize(words)) == [0, 0, 0, 0, 1, 1, 1, 1, 1, 1]
    assert tokenize(words).count(WORD_IDS[BOUNDARY]) == 2


def replay_flags(scene: Scene, instructions: list[Instruction]) -> list[bool]:
    """Whether each instruction applies to the scene as edited by the applicable ones before it."""
    objects = list(scene.objects)
    flags = []
    for ins in instructions:
        if ins.category is Category.ADD:
            box = region_box(ins.region, ins.subject)
            flags.append(not any(boxes_overlap(box, obj.box) for obj in objects))
        else:
            flags.append(any(obj.label == ins.subject for obj in objects))
        if not ins.applicable:
            continue
        if ins.category is Category.ADD:
            objects.append(SceneObject(ins.subject, ins.color, ins.box))
            continue
        index = next(i for i, obj in enumerate(objects) if obj.label == ins.subject)
        if ins.category is Category.REMOVE:
            objects.pop(index)
        elif ins.category is Category.REPLACE:
            objects[index] = SceneObject(ins.replacement, ins.color, ins.new_box)
    return flags


@pytest.mark.parametrize("seed", range(300))
def test_applicability_holds_in_list_order(seed):
    episode = gen_episode(seed, Task.CONTEXT)
    assert replay_flags(episode.scene, episode.instructions) == episode.applicable
    scene = gen_scene(seed)
    instructions = gen_instructions(scene, 1, 4, seed=seed)
    assert replay_flags(scene, instructions) == [ins.applicable for ins in instructions]


def test_non_applicable_instructions_avoid_what_edits_bring_in():
    scene = Scene(blank_image(), [SceneObject("circle", "red", (40, 40, 16, 16))])
    draw(scene.image, scene.objects[0])
    for seed in range(50):
        instructions = gen_instructions(scene, 1, 3, seed=seed)
        applicable = next(ins for ins in instructions if ins.applicable)
        if applicable.category is Category.ADD:
            brought_in = {applicable.subject}
        elif applicable.category is Category.REPLACE:
            brought_in = {applicable.replacement}
        else:
            brought_in = set()
        for ins in instructions:
            if not ins.applicable and ins.category is not Category.ADD:
                assert ins.subject not in brought_in
        assert len({ins.text for ins in instructions}) == len(instructions)


def test_context_episodes_mix_up_to_five_non_applicable():
    counts = Counter()
    for seed in range(200):
        episode = gen_episode(seed, Task.CONTEXT)
        counts[episode.applicable.count(False)] += 1
        assert len(tokenize(episode.prompt)) <= MAX_PROMPT_LENGTH
    assert set(counts) == {1, 2, 3, 4}


def test_scene_sweep():
    for seed in range(1000):
        scene = gen_scene(seed)
        assert 1 <= len(scene.objects) <= 4
        assert len(scene.labels()) == len(scene.objects)
        boxes = [obj.box for obj in scene.objects]
        assert all(box_inside(box) and box[0] % GRID == 0 and box[1] % GRID == 0 for box in boxes)
        assert not any(boxes_overlap(a, b) for i, a in enumerate(boxes) for b in boxes[i + 1 :])


def test_remove_then_add_matches_a_pixel_diff():
    bar = SceneObject("bar", "blue", (8, 8, 16, 8))
    circle = SceneObject("circle", "green", (40, 40, 16, 16))
    scene = Scene(blank_image(), [bar, circle])
    for obj in scene.objects:
        draw(scene.image, obj)
    added = region_box(("top", "left"), "square")
    remove = Instruction(["remove", "the", "bar"], Category.REMOVE, True, box_mask(bar.box), "bar", box=bar.box)
    add = Instruction(
        ["add", "a", "red", "square", "at", "the", "top", "left"],
        Category.ADD,
        True,
        box_mask(added),
        "square",
        color="red",
        region=("top", "left"),
        box=added,
    )
    goal, description = render_goal(scene, [remove, add])

    expected = scene.image.copy()
    for y in range(64):
        for x in range(64):
            if 8 <= x < 24 and 8 <= y < 16:
                expected[y, x] = np.array(BACKGROUND) / 255
            if 8 <= x < 24 and 8 <= y < 24:
                expected[y, x] = np.array(PALETTE["red"]) / 255
    assert np.array_equal(goal, expected)
    changed = np.argwhere(np.any(goal != scene.image, axis=-1))
    assert changed.min(axis=0).tolist() == [8, 8] and changed.max(axis=0).tolist() == [23, 23]
    assert description == ["red", "square", "at", "top", "left", CONNECTIVE, "green", "circle", "at", "bottom", "right"]


@pytest.mark.slow
def test_generated_dataset_statistics():
    categories = Counter()
    for seed in range(10_000):
        episode = gen_episode(seed)
        check_episode(episode)
        categories.update(ins.category for ins in episode.instructions)
    total = sum(categories.values())
    for category, share in REFERENCE_CATEGORY_SHARES.items():
        assert abs(categories[category] / total - share) <= 0.05
