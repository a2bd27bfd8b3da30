"""Synthetic brain world: scenes, vertex responses, captions, QA pairs.

Each trial has a scene (category, count, setting, person flag). Vertex
responses are a fixed random mixture of a low-dimensional scene latent,
plus a person-locked gain on a hidden face-selective vertex subset, plus
iid gaussian noise. Categories come in near-confusable pairs whose
latents sit close together, and every category has a preferred setting,
so cross-category structure exists for generalization probes.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import substream

DATASET_FORMAT_VERSION = 1

DEFAULT_CATEGORIES = [
    "zebra", "horse",
    "surfer", "skater",
    "airplane", "bird",
    "pizza", "sandwich",
]
# Categories whose noun itself denotes a person, independent of the
# optional bystander phrase.
PERSON_CATEGORIES = ("surfer", "skater")
DEFAULT_SETTINGS = [
    "dry savanna", "green farm",
    "blue ocean", "sunny park",
    "cloudy sky", "dense forest",
    "warm kitchen", "busy cafe",
]
PERSON_PHRASES = [
    "a person", "a man", "a woman", "a boy",
    "a girl", "people", "two men", "two women",
]
COUNT_WORDS = ["one", "two", "three", "four"]
CAPTION_COUNT_WORDS = ["A", "Two", "Three", "Four"]

# the captioning instruction pool used in training and at eval time
CAPTION_PROMPTS = [
    "Give a concise and descriptive caption of this image.",
    "Describe the following image in detail in one sentence.",
    "Provide a detailed description of the given image in one sentence.",
    "Describe the important features of the scene in this image.",
    "What is in this picture?",
]


def round_half_up(x: float) -> int:
    """Round with ties away from zero toward +inf (0.5 -> 1)."""
    return int(np.floor(x + 0.5))


def pluralize(noun: str) -> str:
    if noun.endswith(("ch", "sh", "s", "x", "z")):
        return noun + "es"
    return noun + "s"


@dataclass
class WorldConfig:
    n_vertices: int = 2048
    n_regions: int = 16
    latent_dim: int = 12
    categories: list[str] = field(default_factory=lambda: list(DEFAULT_CATEGORIES))
    settings: list[str] = field(default_factory=lambda: list(DEFAULT_SETTINGS))
    setting_bias: float = 0.85
    category_strength: float = 3.0
    pair_delta: float = 1.0
    count_strength: float = 1.2
    setting_strength: float = 2.5
    face_vertex_fraction: float = 0.05
    person_gain: float = 2.0
    person_prob: float = 0.5
    noise_std: float = 0.5
    n_trials: int = 2000
    shared_fraction: float = 0.1
    test_count: int = 64
    seed: int = 0

    def validate(self):
        if self.n_regions < 1 or self.n_vertices < self.n_regions:
            raise ValueError("need n_vertices >= n_regions >= 1")
        if len(self.categories) < 2 or len(self.categories) % 2:
            raise ValueError("categories must come in confusable pairs (even count >= 2)")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("duplicate category names")
        if len(self.settings) < 2:
            raise ValueError("need at least two settings")
        if not 0.0 < self.face_vertex_fraction < 1.0:
            raise ValueError("face_vertex_fraction must be in (0, 1)")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ValueError("shared_fraction must be in [0, 1]")
        if not 0.0 <= self.setting_bias <= 1.0:
            raise ValueError("setting_bias must be in [0, 1]")
        if not 0.0 <= self.person_prob <= 1.0:
            raise ValueError("person_prob must be in [0, 1]")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be nonnegative")
        if self.n_trials < 1:
            raise ValueError("n_trials must be positive")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        if self.test_count < 1:
            raise ValueError("test_count must be positive")
        n_shared = round_half_up(self.shared_fraction * self.n_trials)
        if self.test_count > n_shared:
            raise ValueError(
                f"test_count {self.test_count} exceeds shared trial count {n_shared}"
            )
        return self


@dataclass
class Scene:
    category: str
    count: int
    setting: str
    has_person: bool
    person_phrase: str = ""


@dataclass
class Trial:
    trial_id: str
    scene: Scene
    betas: np.ndarray
    captions: list[str]
    qa_pairs: list[tuple[str, str]]
    is_shared: bool


@dataclass
class Parcellation:
    n_vertices: int
    regions: list[np.ndarray]
    name: str

    def validate(self):
        counts = np.zeros(self.n_vertices, dtype=np.int64)
        for idx in self.regions:
            counts[idx] += 1
        if not (counts == 1).all():
            raise ValueError("regions must partition the vertex set exactly")
        return self


@dataclass
class Split:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]


@dataclass
class LocalizerResult:
    t_values: np.ndarray
    n_person: int
    n_no_person: int
    degenerate: np.ndarray  # per-vertex flag: both groups had zero variance


def build_parcellation(cfg: WorldConfig) -> Parcellation:
    """Contiguous near-equal vertex blocks; remainder spread over the first regions."""
    edges = np.linspace(0, cfg.n_vertices, cfg.n_regions + 1).round().astype(int)
    regions = [np.arange(edges[i], edges[i + 1]) for i in range(cfg.n_regions)]
    return Parcellation(
        n_vertices=cfg.n_vertices, regions=regions, name=f"synth{cfg.n_regions}"
    )


def face_vertex_set(cfg: WorldConfig) -> np.ndarray:
    """The hidden face-selective vertex subset, derivable from the seed alone."""
    rng = substream(cfg.seed, "world.face")
    n_face = round_half_up(cfg.face_vertex_fraction * cfg.n_vertices)
    return np.sort(rng.permutation(cfg.n_vertices)[:n_face])


def _structure(cfg: WorldConfig):
    """Latent tables and the vertex mixing matrix, all from the structure stream."""
    rng = substream(cfg.seed, "world.structure")
    L = cfg.latent_dim

    def unit(n=1):
        v = rng.normal(size=(n, L))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    n_cat = len(cfg.categories)
    cat_latents = np.zeros((n_cat, L))
    for pair in range(n_cat // 2):
        base = unit()[0] * cfg.category_strength
        delta = unit()[0] * (cfg.pair_delta / 2.0)
        cat_latents[2 * pair] = base + delta
        cat_latents[2 * pair + 1] = base - delta
    count_axis = unit()[0] * cfg.count_strength
    setting_latents = unit(len(cfg.settings)) * cfg.setting_strength
    mixing = rng.normal(0.0, 1.0 / np.sqrt(L), size=(cfg.n_vertices, L))
    return cat_latents, count_axis, setting_latents, mixing


def preferred_setting_index(cfg: WorldConfig, category_index: int) -> int:
    return category_index % len(cfg.settings)


def scene_latent(cfg: WorldConfig, scene: Scene, tables=None) -> np.ndarray:
    cat_latents, count_axis, setting_latents, _ = tables or _structure(cfg)
    ci = cfg.categories.index(scene.category)
    si = cfg.settings.index(scene.setting)
    return (
        cat_latents[ci]
        + (scene.count - 2.5) * count_axis
        + setting_latents[si]
    )


def _captions(scene: Scene) -> list[str]:
    noun = scene.category if scene.count == 1 else pluralize(scene.category)
    head = CAPTION_COUNT_WORDS[scene.count - 1]
    low = "a" if scene.count == 1 else COUNT_WORDS[scene.count - 1]
    suffix = f", with {scene.person_phrase}" if scene.has_person else ""
    return [
        f"{head} {noun} in a {scene.setting}{suffix}.",
        f"{head} {noun} standing in a {scene.setting}{suffix}.",
        f"A photo of {low} {noun} in a {scene.setting}{suffix}.",
    ]


def choice_question(options) -> str:
    """Forced-choice probe: name the subject, restricted to a bracketed list."""
    return f"What is in this image? Answer with one noun, chosen from [{', '.join(options)}]"


def choice_answer(category: str) -> str:
    return f"The scene features a {category}."


def _qa_pairs(scene: Scene) -> list[tuple[str, str]]:
    plural = pluralize(scene.category)
    if scene.count == 1:
        count_answer = f"There is one {scene.category}."
        subject_answer = f"The main subject is a {scene.category}."
    else:
        count_answer = f"There are {COUNT_WORDS[scene.count - 1]} {plural}."
        subject_answer = f"The main subjects are {plural}."
    person_answer = (
        "Yes, there is a person." if scene.has_person else "No, there is no person."
    )
    return [
        (f"How many {plural} are there?", count_answer),
        ("Is there a person in this image?", person_answer),
        ("Where is this scene set?", f"In a {scene.setting}."),
        ("What is the main subject of this scene?", subject_answer),
    ]


def generate_world(cfg: WorldConfig) -> tuple[Parcellation, list[Trial]]:
    """Sample the full synthetic dataset. Same config and seed, same bytes."""
    cfg.validate()
    tables = _structure(cfg)
    cat_latents, count_axis, setting_latents, mixing = tables
    face = face_vertex_set(cfg)
    face_ind = np.zeros(cfg.n_vertices)
    face_ind[face] = 1.0

    scene_rng = substream(cfg.seed, "world.scenes")
    shared_rng = substream(cfg.seed, "world.shared")
    n_shared = round_half_up(cfg.shared_fraction * cfg.n_trials)
    shared_ids = set(shared_rng.permutation(cfg.n_trials)[:n_shared].tolist())

    n_cat = len(cfg.categories)
    n_set = len(cfg.settings)
    trials = []
    for i in range(cfg.n_trials):
        ci = int(scene_rng.integers(n_cat))
        count = int(1 + scene_rng.integers(4))
        pref = preferred_setting_index(cfg, ci)
        if scene_rng.random() < cfg.setting_bias:
            si = pref
        else:
            si = int(scene_rng.integers(n_set - 1))
            if si >= pref:
                si += 1
        has_person = bool(scene_rng.random() < cfg.person_prob)
        phrase = PERSON_PHRASES[int(scene_rng.integers(len(PERSON_PHRASES)))]
        scene = Scene(
            category=cfg.categories[ci],
            count=count,
            setting=cfg.settings[si],
            has_person=has_person,
            person_phrase=phrase if has_person else "",
        )
        z = cat_latents[ci] + (count - 2.5) * count_axis + setting_latents[si]
        betas = mixing @ z
        if has_person:
            betas = betas + cfg.person_gain * face_ind
        betas = betas + cfg.noise_std * scene_rng.standard_normal(cfg.n_vertices)
        trials.append(
            Trial(
                trial_id=f"t{i:05d}",
                scene=scene,
                betas=betas,
                captions=_captions(scene),
                qa_pairs=_qa_pairs(scene),
                is_shared=i in shared_ids,
            )
        )
    return build_parcellation(cfg), trials


def split_dataset(trials: list[Trial], cfg: WorldConfig) -> Split:
    """Test and validation from the shared pool, train from everything else."""
    shared = [t.trial_id for t in trials if t.is_shared]
    if cfg.test_count > len(shared):
        raise ValueError(
            f"test_count {cfg.test_count} exceeds the {len(shared)} shared trials"
        )
    rng = substream(cfg.seed, "split")
    order = rng.permutation(len(shared))
    test = {shared[i] for i in order[: cfg.test_count]}
    return Split(
        train_ids=[t.trial_id for t in trials if not t.is_shared],
        val_ids=[tid for tid in shared if tid not in test],
        test_ids=[tid for tid in shared if tid in test],
    )


def parcellate(betas: np.ndarray, parcellation: Parcellation) -> list[np.ndarray]:
    betas = np.asarray(betas)
    if betas.shape[-1] != parcellation.n_vertices:
        raise ValueError(
            f"betas have {betas.shape[-1]} vertices, parcellation expects "
            f"{parcellation.n_vertices}"
        )
    return [betas[..., idx] for idx in parcellation.regions]


def localizer_ttest(trials: list[Trial]) -> LocalizerResult:
    """Per-vertex Welch t for person-present minus person-absent trials."""
    person = np.stack([t.betas for t in trials if t.scene.has_person]) if any(
        t.scene.has_person for t in trials
    ) else np.zeros((0, 0))
    absent = np.stack([t.betas for t in trials if not t.scene.has_person]) if any(
        not t.scene.has_person for t in trials
    ) else np.zeros((0, 0))
    n1, n2 = len(person), len(absent)
    if n1 < 2 or n2 < 2:
        raise ValueError(
            f"localizer needs >= 2 trials per group, got {n1} with and {n2} without people"
        )
    m1, m2 = person.mean(axis=0), absent.mean(axis=0)
    v1, v2 = person.var(axis=0, ddof=1), absent.var(axis=0, ddof=1)
    denom_sq = v1 / n1 + v2 / n2
    degenerate = denom_sq == 0.0
    t = np.zeros_like(m1)
    ok = ~degenerate
    t[ok] = (m1[ok] - m2[ok]) / np.sqrt(denom_sq[ok])
    if degenerate.any():
        import warnings

        warnings.warn(
            f"{int(degenerate.sum())} vertices had zero variance in both groups; "
            "their t was set to 0",
            RuntimeWarning,
            stacklevel=2,
        )
    return LocalizerResult(
        t_values=t, n_person=n1, n_no_person=n2, degenerate=degenerate
    )


def corpus_texts(trials: list[Trial]) -> list[str]:
    """Every text the language side can see: captions, QA, prompt pool.

    One choice-format exemplar rides along so the scaffold words enter the
    vocabulary; its option names come only from categories present in the
    given trials, so a filtered corpus stays free of withheld tokens.
    """
    out = list(CAPTION_PROMPTS)
    cats = sorted({t.scene.category for t in trials})
    if cats:
        out.append(choice_question(cats[:3]))
        out.append(choice_answer(cats[0]))
    for t in trials:
        out.extend(t.captions)
        for q, a in t.qa_pairs:
            out.append(q)
            out.append(a)
    return out


# ---------------------------------------------------------------------------
# serialization: line-delimited records, betas as little-endian float32 base64

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_betas(betas: np.ndarray) -> str:
    return base64.b64encode(np.asarray(betas, dtype="<f4").tobytes()).decode("ascii")


def decode_betas(blob: str, n_vertices: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(blob), dtype="<f4")
    if raw.size != n_vertices:
        raise ValueError(f"betas payload has {raw.size} values, expected {n_vertices}")
    return raw.astype(np.float64)


def save_dataset(path, cfg: WorldConfig, parcellation: Parcellation, trials: list[Trial]):
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "braintext-dataset",
        "config": asdict(cfg),
        "parcellation": {
            "n_vertices": parcellation.n_vertices,
            "name": parcellation.name,
            "regions": [idx.tolist() for idx in parcellation.regions],
        },
    }
    with open(path, "w") as fh:
        fh.write(_dumps(header) + "\n")
        for t in trials:
            rec = {
                "trial_id": t.trial_id,
                "is_shared": t.is_shared,
                "scene": asdict(t.scene),
                "captions": t.captions,
                "qa_pairs": [list(p) for p in t.qa_pairs],
                "betas": encode_betas(t.betas),
            }
            fh.write(_dumps(rec) + "\n")


def load_dataset(path) -> tuple[WorldConfig, Parcellation, list[Trial]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != DATASET_FORMAT_VERSION:
            raise ValueError(
                f"unsupported dataset format_version {header.get('format_version')}"
            )
        if header.get("kind") != "braintext-dataset":
            raise ValueError("not a dataset file")
        cfg = WorldConfig(**header["config"])
        parc = Parcellation(
            n_vertices=header["parcellation"]["n_vertices"],
            regions=[np.asarray(r, dtype=np.int64) for r in header["parcellation"]["regions"]],
            name=header["parcellation"]["name"],
        )
        trials = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            trials.append(
                Trial(
                    trial_id=rec["trial_id"],
                    scene=Scene(**rec["scene"]),
                    betas=decode_betas(rec["betas"], parc.n_vertices),
                    captions=list(rec["captions"]),
                    qa_pairs=[tuple(p) for p in rec["qa_pairs"]],
                    is_shared=bool(rec["is_shared"]),
                )
            )
    return cfg, parc, trials
