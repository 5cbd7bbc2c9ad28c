"""Templated synthetic dialogue corpus with near-1 Bayes accuracy on every task.

Each dialogue is about one named entity and walks through a fixed global
order of attribute categories, one turn per category. That structure makes
the tasks learnable at toy scale:

- QA: the answer is always the single passage word following "the <cat> is".
- incoherence slots: the deleted utterance's category pins its original slot,
  because every dialogue presents categories in the same order.
- insertion: the foreign utterance names a different entity.
- question prediction: only the true candidate question names the entity of
  the context and passage.
"""

from __future__ import annotations

from .corpus import Corpus, Dialogue, Turn, resolve_answer_span
from .seeding import derived_rng

CATEGORY_VALUES: dict[str, tuple[str, ...]] = {
    "animal": ("cat", "dog", "fox", "owl", "bat", "cow", "hen", "ram", "eel", "elk", "yak", "ant"),
    "color": ("red", "blue", "green", "gray", "pink", "teal", "amber", "coral", "olive", "crimson", "indigo", "maroon"),
    "city": ("paris", "oslo", "cairo", "lima", "quito", "miami", "dallas", "kyoto", "perth", "milan", "delhi", "bern"),
    "food": ("bread", "rice", "pasta", "soup", "salad", "cheese", "stew", "pie", "taco", "noodles", "curry", "toast"),
    "drink": ("tea", "coffee", "juice", "milk", "soda", "cocoa", "cider", "punch", "nectar", "latte", "mead", "espresso"),
    "sport": ("chess", "tennis", "rugby", "golf", "rowing", "skiing", "boxing", "judo", "karate", "polo", "darts", "fencing"),
    "tool": ("hammer", "wrench", "chisel", "saw", "drill", "pliers", "clamp", "rasp", "awl", "vise", "spanner", "mallet"),
    "plant": ("fern", "moss", "ivy", "rose", "tulip", "daisy", "cactus", "bamboo", "birch", "maple", "cedar", "willow"),
    "metal": ("iron", "copper", "zinc", "tin", "nickel", "silver", "cobalt", "lead", "brass", "steel", "bronze", "titanium"),
    "music": ("jazz", "rock", "folk", "blues", "opera", "tango", "waltz", "samba", "disco", "punk", "soul", "reggae"),
    "weather": ("rain", "snow", "fog", "hail", "wind", "storm", "drizzle", "frost", "thunder", "breeze", "sleet", "mist"),
    "shape": ("circle", "square", "oval", "cube", "cone", "prism", "sphere", "spiral", "wedge", "ring", "arch", "helix"),
    "fabric": ("silk", "wool", "denim", "linen", "velvet", "satin", "tweed", "canvas", "felt", "lace", "suede", "fleece"),
    "gem": ("ruby", "topaz", "jade", "opal", "pearl", "garnet", "quartz", "onyx", "beryl", "zircon", "agate", "lapis"),
    "fruit": ("mango", "apple", "pear", "peach", "grape", "lemon", "lime", "cherry", "melon", "fig", "kiwi", "papaya"),
    "game": ("poker", "bridge", "domino", "bingo", "checkers", "solitaire", "mahjong", "charades", "trivia", "puzzle", "riddle", "maze"),
}

CATEGORY_ORDER: tuple[str, ...] = tuple(CATEGORY_VALUES)

# Varying intro lengths plus per-dialogue fact order keep answer positions
# unpredictable, so span prediction cannot fall back on absolute positions.
INTROS = (
    "{name} keeps a tidy list of favorite things .",
    "{name} wrote down some favorites .",
    "here is what {name} likes best of all these days .",
    "{name} has favorites .",
    "friends say {name} always names the same favorite things .",
)

_ONSETS = "bdfghjklmnprstvwyz"
_VOWELS = "aeiou"


def _name_pool() -> list[str]:
    taken = set()
    for values in CATEGORY_VALUES.values():
        taken.update(values)
    taken.update(CATEGORY_ORDER)
    syllables = [o + v for o in _ONSETS for v in _VOWELS]
    return [a + b for a in syllables for b in syllables if a + b not in taken]


def make_synthetic(
    n_dialogues: int = 200,
    n_turns: int = 10,
    seed: int = 0,
    split: str = "train",
) -> Corpus:
    """Build a synthetic corpus; deterministic in (n_dialogues, n_turns, seed, split)."""
    if not 1 <= n_turns <= len(CATEGORY_ORDER):
        raise ValueError(f"n_turns must be in 1..{len(CATEGORY_ORDER)}")
    rng = derived_rng(seed, "synthetic", split)
    pool = _name_pool()
    if n_dialogues > len(pool):
        raise ValueError(f"at most {len(pool)} dialogues per corpus")
    name_idx = rng.choice(len(pool), size=n_dialogues, replace=False)

    dialogues = []
    for i in range(n_dialogues):
        name = pool[int(name_idx[i])]
        intro = INTROS[int(rng.integers(0, len(INTROS)))]
        facts = []
        turns = []
        for j, cat in enumerate(CATEGORY_ORDER[:n_turns], start=1):
            value = CATEGORY_VALUES[cat][int(rng.integers(0, len(CATEGORY_VALUES[cat])))]
            facts.append(f"the {cat} is {value} .")
            turns.append((j, f"what is the {cat} of {name}", value))
        # Facts appear in a per-dialogue order unrelated to the turn order.
        order = rng.permutation(len(facts))
        passage = " ".join([intro.format(name=name)] + [facts[int(j)] for j in order])
        dialogues.append(
            Dialogue(
                id=f"syn-{split}-{i:04d}",
                domain="Synthetic",
                passage_text=passage,
                turns=tuple(
                    Turn(
                        turn_id=j,
                        question_text=q,
                        answer_text=a,
                        span=resolve_answer_span(passage, a),
                    )
                    for j, q, a in turns
                ),
            )
        )
    return Corpus(dialogues=tuple(dialogues), split=split)
