"""Seeded synthetic streams with planted needles.

The stream is a sequence of fixed-length scenes (one per memory window), each
drawing captions from its own vocabulary. A needle is a short run of frames
showing an object that appears nowhere else. Its query is phrased in the
vocabulary of a *different* scene, so embedding the raw question points at
the wrong part of the stream, while the scripted intent names the needle
object and points straight at it.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from ..backends import token_bucket, tokenize
from .trace import TraceEvent

SCENES: dict[str, dict[str, list[str]]] = {
    "classroom": {
        "who": ["student", "teacher", "pupil", "tutor"],
        "act": ["writes", "reads", "listens", "raises a hand"],
        "obj": ["desk", "chalkboard", "notebook", "projector", "bookshelf"],
    },
    "kitchen": {
        "who": ["cook", "chef", "parent", "child"],
        "act": ["chops", "stirs", "washes", "pours"],
        "obj": ["stove", "sink", "counter", "fridge", "kettle"],
    },
    "street": {
        "who": ["cyclist", "driver", "pedestrian", "courier"],
        "act": ["crosses", "waits", "turns", "parks"],
        "obj": ["crosswalk", "traffic light", "sidewalk", "bus stop", "lamp post"],
    },
    "park": {
        "who": ["jogger", "walker", "gardener", "kid"],
        "act": ["runs", "sits", "plays", "feeds birds"],
        "obj": ["bench", "fountain", "lawn", "oak tree", "pond"],
    },
    "office": {
        "who": ["clerk", "manager", "engineer", "intern"],
        "act": ["types", "calls", "prints", "meets"],
        "obj": ["monitor", "keyboard", "whiteboard", "printer", "cubicle"],
    },
    "garage": {
        "who": ["mechanic", "owner", "welder", "helper"],
        "act": ["repairs", "lifts", "inspects", "sands"],
        "obj": ["workbench", "toolbox", "tire", "jack", "ladder"],
    },
}

# (needle phrase, generic category used in the question)
NEEDLES: list[tuple[str, str]] = [
    ("teddy bear doll", "toys"),
    ("violin case", "instruments"),
    ("orange umbrella", "accessories"),
    ("chess board", "games"),
    ("yellow kite", "toys"),
    ("goldfish bowl", "pets"),
    ("red balloon", "decorations"),
    ("silver trophy", "awards"),
    ("paper lantern", "decorations"),
    ("wooden sled", "equipment"),
    ("blue helmet", "gear"),
    ("glass vase", "objects"),
    ("puppet theater", "toys"),
    ("brass telescope", "instruments"),
    ("zebra poster", "decorations"),
    ("purple scarf", "clothing"),
]

QUESTION_TEMPLATES = [
    "were there any {category} in the {place} where the {who} was?",
    "did anyone leave {category} near the {obj} in the {place}?",
    "what {category} were around the {place} earlier?",
]

PROBE_QUESTION = "what is happening right now?"


@dataclass(frozen=True)
class NeedleSpec:
    at_minute: float
    query_minute: float


def parse_needles(spec: str) -> list[NeedleSpec]:
    """``"2@50,10@55"``: needle at minute 2 queried at minute 50, and so on."""
    out = []
    for part in filter(None, (p.strip() for p in (spec or "").split(","))):
        if part == "none":
            continue
        at, _, query = part.partition("@")
        if not query:
            raise ValueError(f"needle spec {part!r} should look like MIN@QUERYMIN")
        out.append(NeedleSpec(float(at), float(query)))
    return out


def _caption(rng: random.Random, scene: str) -> str:
    v = SCENES[scene]
    return f"a {rng.choice(v['who'])} {rng.choice(v['act'])} near the {rng.choice(v['obj'])} in the {scene}"


def _vocab_buckets(dim: int) -> set[int]:
    words = set(tokenize(" ".join(QUESTION_TEMPLATES) + " " + PROBE_QUESTION + " a near the in on"))
    for scene, v in SCENES.items():
        words.update(tokenize(scene))
        for group in v.values():
            words.update(tokenize(" ".join(group)))
    for _, category in NEEDLES:
        words.update(tokenize(category))
    return {token_bucket(w, dim) for w in words}


def _usable_needles(dim: int) -> list[tuple[str, str]]:
    """Needles whose tokens collide with no other vocabulary under the mock hash."""
    taken = _vocab_buckets(dim)
    usable = []
    for phrase, category in NEEDLES:
        buckets = {token_bucket(t, dim) for t in tokenize(phrase)}
        if buckets & taken:
            continue
        usable.append((phrase, category))
        taken |= buckets
    return usable


def generate_synthetic(seed: int, minutes: float, needles: list[NeedleSpec] | str = (),
                       fps: float = 2.0, window: float = 32.0, embed_dim: int = 256,
                       probe_every: float = 1.0, needle_seconds: float = 8.0) -> list[TraceEvent]:
    """Build a trace; identical arguments always give identical events."""
    if minutes < 1:
        raise ValueError("minutes must be >= 1")
    if isinstance(needles, str):
        needles = parse_needles(needles)
    rng = random.Random(seed)
    duration = minutes * 60.0
    n_windows = int(-(-duration // window))
    scene_names = sorted(SCENES)
    scenes = [rng.choice(scene_names) for _ in range(n_windows)]

    pool = _usable_needles(embed_dim)
    if len(needles) > len(pool):
        raise ValueError(f"at most {len(pool)} needles are available at embed_dim={embed_dim}")
    chosen = rng.sample(pool, len(needles))

    planted = []  # (start, end, phrase, window interval, question scene, spec)
    used_windows: set[int] = set()
    for spec, (phrase, category) in zip(needles, chosen):
        if not spec.at_minute < spec.query_minute <= minutes:
            raise ValueError(f"needle {spec} must precede its query within the stream")
        w = int(spec.at_minute * 60.0 // window)
        if w in used_windows:
            raise ValueError(f"two needles share window {w}")
        used_windows.add(w)
        w_start = w * window
        start = w_start + (window - needle_seconds) / 2
        # the question talks about a scene the needle window does not show
        q_scene = rng.choice([s for s in scene_names if s != scenes[w]])
        planted.append((start, start + needle_seconds, phrase, category, (w_start, w_start + window), q_scene, spec))
    for *_, q_scene, spec in planted:
        # make sure the question's scene really occurs before the query
        earlier = [i for i in range(int(spec.query_minute * 60.0 // window)) if i not in used_windows]
        if earlier and q_scene not in (scenes[i] for i in earlier):
            scenes[rng.choice(earlier)] = q_scene

    queries = []
    for start, end, phrase, category, evidence, q_scene, spec in planted:
        v = SCENES[q_scene]
        question = rng.choice(QUESTION_TEMPLATES).format(
            category=category, place=q_scene, who=rng.choice(v["who"]), obj=rng.choice(v["obj"]))
        queries.append(TraceEvent("query", spec.query_minute * 60.0, question=question,
                                  directive=(f"!tool:{phrase}", f"!answer:{phrase}"),
                                  expected=phrase, evidence=evidence))
    if probe_every > 0:
        k = 1
        while k * probe_every <= minutes:
            t = k * probe_every * 60.0
            scene = scenes[min(int(t // window), n_windows - 1)]
            queries.append(TraceEvent("query", t, question=PROBE_QUESTION,
                                      directive=(f"!answer:activity in the {scene}",),
                                      expected=f"activity in the {scene}"))
            k += 1
    queries.sort(key=lambda q: q.ts)

    events: list[TraceEvent] = []
    qi = 0
    n_frames = int(round(duration * fps))
    for i in range(n_frames):
        ts = i / fps
        while qi < len(queries) and queries[qi].ts < ts:
            events.append(queries[qi])
            qi += 1
        caption = _caption(rng, scenes[int(ts // window)])
        for start, end, phrase, *_ in planted:
            if start <= ts < end:
                caption = f"a {phrase} on the {rng.choice(SCENES[scenes[int(ts // window)]]['obj'])}"
        events.append(TraceEvent("frame", ts, caption=caption, payload_id=f"f{i:07d}"))
    # queries at the very end see every frame, then the stream closes
    events.extend(queries[qi:])
    events.append(TraceEvent("close", duration))
    return events
