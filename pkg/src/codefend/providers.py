"""Desk-scale providers: toy gradient oracles, a probe-based victim VLM,
a deterministic vision/text encoder, synthetic data generators, and the
registry builder that wires them together."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .core import AdvPair, ImageTensor, Rng
from .pipeline import ProviderRegistry
from .prefixgen import TinyCausalLm
from .purifier import BlockPoolCodec, SurrogateNoisePredictor, cosine_schedule


def _hash_seed(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _hash_vector(dim: int, *parts) -> np.ndarray:
    gen = np.random.Generator(np.random.PCG64(_hash_seed(*parts)))
    vec = gen.standard_normal(dim)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


# -- synthetic data ----------------------------------------------------------


def make_toy_images(
    n: int, size: int = 32, channels: int = 3, seed: int = 0, block: int = 4
) -> list[ImageTensor]:
    """Smooth toy images: low-res uniform fields in [0.2, 0.8], upsampled so
    they are piecewise constant on the block grid (and so round-trip the
    block-pool codec exactly)."""
    gen = Rng(seed).generator()
    images = []
    for i in range(n):
        base = gen.uniform(0.2, 0.8, size=(size // block, size // block, channels))
        arr = np.repeat(np.repeat(base, block, axis=0), block, axis=1).astype(np.float32)
        images.append(ImageTensor(data=arr, id=f"img{i:04d}"))
    return images


def make_noise_pairs(
    images: list[ImageTensor], epsilon: float, seed: int = 0, attack_name: str = "synthetic"
) -> list[AdvPair]:
    """Uniform(-epsilon, epsilon) perturbations; budgets hold exactly because
    the toy images keep a margin from the pixel-range boundaries."""
    gen = Rng(seed).generator()
    pairs = []
    for img in images:
        delta = gen.uniform(-epsilon, epsilon, size=img.shape).astype(np.float32)
        adv = np.clip(img.data + delta, 0.0, 1.0).astype(np.float32)
        pairs.append(
            AdvPair(
                adv=ImageTensor(adv, id=f"{img.id}_adv"),
                clean=img,
                attack_name=attack_name,
                epsilon=epsilon,
            )
        )
    return pairs


# -- attack-side gradient oracles -------------------------------------------


class LinearImageOracle:
    """loss = <w, image>; the closed-form single-step testbed."""

    concurrent_safe = True

    def __init__(self, w: np.ndarray):
        self.w = np.asarray(w, dtype=np.float32)

    def loss(self, image, text, reference_text) -> float:
        return float(np.sum(self.w * image))

    def grad_wrt_image(self, image, text, reference_text) -> np.ndarray:
        return self.w


class CaptionAgreementOracle:
    """Quadratic agreement loss between projected image features and a
    reference-text anchor; ascent drives the caption away from the
    reference."""

    concurrent_safe = True

    def __init__(self, image_shape: tuple[int, int, int], feat_dim: int = 32, seed: int = 0):
        n = int(np.prod(image_shape))
        gen = Rng(seed).generator()
        self.proj = (gen.standard_normal((feat_dim, n)) / np.sqrt(n)).astype(np.float32)
        self.feat_dim = feat_dim

    def _anchor(self, reference_text: str) -> np.ndarray:
        return _hash_vector(self.feat_dim, "caption-anchor", reference_text)

    def loss(self, image, text, reference_text) -> float:
        feats = self.proj @ np.asarray(image, np.float32).ravel()
        diff = feats - self._anchor(reference_text)
        return float(np.dot(diff, diff))

    def grad_wrt_image(self, image, text, reference_text) -> np.ndarray:
        feats = self.proj @ np.asarray(image, np.float32).ravel()
        diff = feats - self._anchor(reference_text)
        return (2.0 * (self.proj.T @ diff)).reshape(image.shape).astype(np.float32)


class TokenLogitOracle:
    """Surrogate VLM head emitting token logits from projected image
    features; targeted loss is the cross-entropy of the target token."""

    concurrent_safe = True

    def __init__(
        self,
        image_shape: tuple[int, int, int],
        vocab_size: int = 16,
        feat_dim: int = 32,
        seed: int = 0,
    ):
        n = int(np.prod(image_shape))
        gen = Rng(seed).generator()
        self.proj = (gen.standard_normal((feat_dim, n)) / np.sqrt(n)).astype(np.float32)
        self.head = gen.standard_normal((vocab_size, feat_dim)).astype(np.float32)
        self.vocab_size = vocab_size

    def token_index(self, target: str) -> int:
        return _hash_seed("token", target) % self.vocab_size

    def logits(self, image) -> np.ndarray:
        return self.head @ (self.proj @ np.asarray(image, np.float32).ravel())

    def loss(self, image, text, reference_text) -> float:
        logits = self.logits(image)
        logits = logits - logits.max()
        return float(np.log(np.exp(logits).sum()) - logits[self.token_index(reference_text)])

    def grad_wrt_image(self, image, text, reference_text) -> np.ndarray:
        logits = self.logits(image)
        logits = logits - logits.max()
        probs = np.exp(logits) / np.exp(logits).sum()
        onehot = np.zeros_like(probs)
        onehot[self.token_index(reference_text)] = 1.0
        dfeat = self.head.T @ (probs - onehot)
        return (self.proj.T @ dfeat).reshape(image.shape).astype(np.float32)


class ProbeAttackOracle:
    """White-box view of ProbeVictimVlm: descending this loss raises the
    victim's trigger probe."""

    concurrent_safe = True

    def __init__(self, w: np.ndarray):
        self.w = np.asarray(w, dtype=np.float32)

    def loss(self, image, text, reference_text) -> float:
        return -float(np.sum(self.w * image))

    def grad_wrt_image(self, image, text, reference_text) -> np.ndarray:
        return -self.w


# -- prompt-side scoring oracles ---------------------------------------------

PROMPT_WORDS = (
    "please answer carefully truthfully describe the image scene "
    "focus on visible details ignore noise artifacts misleading patterns "
    "respond with what is actually shown considering context accurately "
    "concise clear factual grounded visual evidence avoid speculation "
    "state plain direct observations about colors shapes objects "
    "report faithful neutral balanced specific complete relevant primary "
    "texture lighting background foreground subject composition layout honestly "
    "precise true careful simple exact literal"
).split()
assert len(PROMPT_WORDS) == 64


def prompt_detokenize(tokens) -> str:
    return " ".join(PROMPT_WORDS[int(t) % len(PROMPT_WORDS)] for t in tokens)


def prompt_word_tokens(text: str, vocab_size: int) -> list[int]:
    return [_hash_seed("prompt-word", w) % vocab_size for w in text.split()]


def make_prompt_space(
    vocab_size: int = 64,
    trigger_length: int = 8,
    delta_bound: float = 2.0,
    embed_dim: int = 8,
    seed: int = 0,
):
    from .promptopt import PromptSpace

    gen = Rng(seed).generator()
    embeddings = gen.standard_normal((vocab_size, embed_dim))
    return PromptSpace(
        vocab=tuple(range(vocab_size)),
        embeddings=embeddings,
        base_prompt_tokens=tuple([0] * trigger_length),
        trigger_positions=tuple(range(trigger_length)),
        delta_bound=delta_bound,
    )


class LinearPromptOracle:
    """loss = sum over positions of <w_pos, embedding(token)>; its first-order
    swap estimate is exact."""

    def __init__(self, embeddings: np.ndarray, prompt_len: int, seed: int = 0):
        gen = Rng(seed).generator()
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.weights = gen.standard_normal((prompt_len, self.embeddings.shape[1]))

    def loss(self, prompt_tokens, query_tokens, image, y_true) -> float:
        return float(
            sum(np.dot(self.weights[p], self.embeddings[t]) for p, t in enumerate(prompt_tokens))
        )

    def grad_wrt_embedding(self, prompt_tokens, query_tokens, image, y_true, position) -> np.ndarray:
        return self.weights[position].copy()


class EmbedMatchScorer:
    """Toy captioner: squared distance between the mean prompt embedding and
    an anchor derived from (image, y_true)."""

    def __init__(self, embeddings: np.ndarray, seed: int = 0):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.seed = seed

    def _anchor(self, image: ImageTensor, y_true) -> np.ndarray:
        dim = self.embeddings.shape[1]
        img_part = _hash_vector(dim, "img-anchor", self.seed, image.sha256())
        y_part = np.mean([self.embeddings[t] for t in y_true], axis=0)
        return img_part + y_part

    def _mean_embed(self, prompt_tokens) -> np.ndarray:
        return np.mean([self.embeddings[t] for t in prompt_tokens], axis=0)

    def loss(self, prompt_tokens, query_tokens, image, y_true) -> float:
        diff = self._mean_embed(prompt_tokens) - self._anchor(image, y_true)
        return float(np.dot(diff, diff))

    def grad_wrt_embedding(self, prompt_tokens, query_tokens, image, y_true, position) -> np.ndarray:
        diff = self._mean_embed(prompt_tokens) - self._anchor(image, y_true)
        return (2.0 / len(prompt_tokens)) * diff


# -- evaluation-side providers -------------------------------------------------


class SurrogateVisionEncoder:
    """Deterministic image/text embeddings in a shared space.

    Image features stack raw pixels with amplified first differences (so
    high-frequency adversarial noise moves the embedding) behind a seeded
    random projection; text maps to a stable pseudo-random direction.
    """

    def __init__(self, feat_dim: int = 256, grad_weight: float = 4.0, seed: int = 0):
        self.feat_dim = feat_dim
        self.grad_weight = grad_weight
        self.seed = seed
        self._proj_cache: dict[tuple[int, ...], np.ndarray] = {}

    def _projection(self, n: int, shape: tuple[int, ...]) -> np.ndarray:
        key = tuple(shape)
        if key not in self._proj_cache:
            gen = np.random.Generator(
                np.random.PCG64(_hash_seed("vision-proj", self.seed, *shape))
            )
            self._proj_cache[key] = (
                gen.standard_normal((self.feat_dim, n)) / np.sqrt(n)
            ).astype(np.float32)
        return self._proj_cache[key]

    def embed_image(self, image: ImageTensor) -> np.ndarray:
        arr = image.data
        dx = np.diff(arr, axis=0).ravel()
        dy = np.diff(arr, axis=1).ravel()
        feats = np.concatenate([arr.ravel(), self.grad_weight * dx, self.grad_weight * dy])
        proj = self._projection(feats.size, image.shape)
        return proj @ feats.astype(np.float32)

    def embed_text(self, text: str) -> np.ndarray:
        return _hash_vector(self.feat_dim, "text-emb", self.seed, text)


@dataclass
class ProbeVictimVlm:
    """Black-box toy victim: answers benignly unless the image projects onto
    its trigger direction above threshold, in which case it emits the
    configured target response. Exposes generate() only."""

    w: np.ndarray
    threshold: float
    target_text: str

    def __post_init__(self):
        self.call_count = 0

    def probe(self, image: ImageTensor) -> float:
        return float(np.sum(self.w * image.data))

    def generate(self, text: str, image: ImageTensor) -> str:
        self.call_count += 1
        if self.probe(image) > self.threshold:
            return f"{self.target_text}"
        arr = image.data
        if arr.shape[2] == 3:
            color = ("red", "green", "blue")[int(np.argmax(arr.mean(axis=(0, 1))))]
        else:
            color = "gray"
        return f"a smooth {color} color field"


def make_probe_victim(
    image_shape: tuple[int, int, int],
    target_text: str,
    epsilon_ref: float = 8.0 / 255.0,
    seed: int = 0,
) -> tuple[ProbeVictimVlm, ProbeAttackOracle]:
    """Victim + matching white-box oracle. The threshold sits at half the
    maximal in-budget attack response, far above clean-image fluctuation."""
    gen = Rng(seed).generator()
    w = gen.standard_normal(image_shape).astype(np.float32)
    w -= w.mean()
    threshold = 0.5 * epsilon_ref * float(np.abs(w).sum())
    victim = ProbeVictimVlm(w=w, threshold=threshold, target_text=target_text)
    return victim, ProbeAttackOracle(w)


def build_surrogate_registry(
    image_shape: tuple[int, int, int] = (32, 32, 3),
    schedule_steps: int = 50,
    predictor_width: int = 32,
    victim_target: str = "the secret password is mango",
    epsilon_ref: float = 8.0 / 255.0,
    seed: int = 0,
) -> ProviderRegistry:
    """All-surrogate registry for desk-scale runs."""
    schedule = cosine_schedule(schedule_steps)
    codec = BlockPoolCodec(factor=4)
    predictor = SurrogateNoisePredictor(
        schedule, channels=image_shape[2], width=predictor_width, seed=seed
    )
    victim, _oracle = make_probe_victim(
        image_shape, victim_target, epsilon_ref=epsilon_ref, seed=seed
    )
    return ProviderRegistry(
        vision_encoder=SurrogateVisionEncoder(seed=seed),
        surrogate_scorer=_default_scorer(seed),
        victim_vlm=victim,
        prefix_lm=TinyCausalLm(seed=seed),
        purifier_codec=codec,
        purifier_predictor=predictor,
    )


def _default_scorer(seed: int) -> EmbedMatchScorer:
    gen = Rng(seed).generator()
    embeddings = gen.standard_normal((64, 8))
    return EmbedMatchScorer(embeddings, seed=seed)
