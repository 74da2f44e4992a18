"""Regenerates the toy corpora, instruction sets and tasks in this directory.

Every file is a deterministic function of the seeds below.
"""

import json
import random
from pathlib import Path

HERE = Path(__file__).parent

ANIMALS = [
    "fox", "owl", "bear", "frog", "duck", "goat", "wolf", "crab", "mole", "seal",
    "hare", "lynx", "toad", "swan", "newt", "mink", "orca", "yak", "emu", "boar",
    "deer", "lark", "wren", "pike", "carp", "moth", "wasp", "ant", "bat", "cat",
]
COLORS = ["red", "blue", "green", "brown", "grey", "white", "black", "gold"]
HOMES = ["forest", "river", "cave", "field", "lake", "hill", "marsh", "barn"]
FOODS = ["fish", "grass", "seeds", "honey", "berries", "roots", "worms", "leaves"]
SOUNDS = ["hoot", "growl", "croak", "quack", "bleat", "howl", "click", "squeak"]
PLACES = ["old bridge", "tall tree", "stone wall", "quiet pond", "long road", "small farm"]
DAYS = ["monday", "tuesday", "wednesday", "thursday", "friday"]
MOODS = ["happy", "tired", "hungry", "calm", "busy"]


def world(seed=7):
    rng = random.Random(seed)
    facts = {}
    for a in ANIMALS:
        facts[a] = {
            "color": rng.choice(COLORS),
            "home": rng.choice(HOMES),
            "food": rng.choice(FOODS),
            "sound": rng.choice(SOUNDS),
        }
    return facts


def fact_sentence(rng, a, f):
    kind = rng.randrange(4)
    if kind == 0:
        return f"the {a} lives in the {f['home']}."
    if kind == 1:
        return f"the {a} eats {f['food']}."
    if kind == 2:
        return f"the {a} is {f['color']}."
    return f"the {a} says {f['sound']}."


def story_sentence(rng, facts):
    a, b = rng.sample(ANIMALS, 2)
    kind = rng.randrange(5)
    if kind == 0:
        return f"one day the {a} met the {b} near the {rng.choice(PLACES)}."
    if kind == 1:
        return f"they talked about {facts[a]['food']} and went home."
    if kind == 2:
        return f"the {a} was {rng.choice(MOODS)}, so it went to the {facts[a]['home']}."
    if kind == 3:
        return f"on {rng.choice(DAYS)} the {a} and the {b} walked to the {rng.choice(PLACES)}."
    return f"the {b} asked the {a} for some {facts[b]['food']}."


def train_corpus(facts, rng, docs=420):
    out = []
    for _ in range(docs):
        sents = []
        for _ in range(rng.randint(5, 10)):
            if rng.random() < 0.55:
                a = rng.choice(ANIMALS)
                sents.append(fact_sentence(rng, a, facts[a]))
            else:
                sents.append(story_sentence(rng, facts))
        out.append(" ".join(sents))
    return "\n\n".join(out) + "\n"


def wiki_corpus(facts, rng, docs=40):
    out = []
    for a in rng.sample(ANIMALS, len(ANIMALS)) + rng.sample(ANIMALS, docs - len(ANIMALS)):
        f = facts[a]
        out.append(
            f"the {a} is an animal. it is {f['color']} and lives in the {f['home']}. "
            f"the {a} eats {f['food']} and says {f['sound']}. "
            f"many animals in the {f['home']} know the {a}."
        )
    return "\n\n".join(out) + "\n"


def ptb_corpus(facts, rng, docs=40):
    out = []
    for _ in range(docs):
        sents = []
        for _ in range(rng.randint(3, 6)):
            food = rng.choice(FOODS)
            sents.append(
                f"the price of {food} rose {rng.randint(2, 40)} percent on {rng.choice(DAYS)}."
            )
            a = rng.choice(ANIMALS)
            sents.append(f"traders said the {a} eats {facts[a]['food']}.")
        out.append(" ".join(sents))
    return "\n\n".join(out) + "\n"


QUESTIONS = {
    "food": ("What does the {a} eat?", "The {a} eats {v}."),
    "home": ("Where does the {a} live?", "The {a} lives in the {v}."),
    "color": ("What color is the {a}?", "The {a} is {v}."),
    "sound": ("What does the {a} say?", "The {a} says {v}."),
}


def sft_records(facts, rng, n, dolly):
    recs = []
    for _ in range(n):
        a = rng.choice(ANIMALS)
        attr = rng.choice(list(QUESTIONS))
        q, r = QUESTIONS[attr]
        use_input = rng.random() < 0.4
        inst = "Answer the question." if use_input else q.format(a=a)
        ctx = q.format(a=a) if use_input else ""
        resp = r.format(a=a, v=facts[a][attr])
        if dolly:
            recs.append({"instruction": inst, "context": ctx, "response": resp, "category": "open_qa"})
        else:
            recs.append({"instruction": inst, "input": ctx, "output": resp})
    return recs


POOLS = {"food": FOODS, "home": HOMES, "color": COLORS, "sound": SOUNDS}
STEMS = {
    "food": ("the {a} eats", " {v}."),
    "home": ("the {a} lives in the", " {v}."),
    "color": ("the {a} is", " {v}."),
    "sound": ("the {a} says", " {v}."),
}


def fact_task(facts, rng, n=200):
    items = []
    for _ in range(n):
        a = rng.choice(ANIMALS)
        attr = rng.choice(list(STEMS))
        stem, cont = STEMS[attr]
        gold = facts[a][attr]
        wrong = rng.sample([v for v in POOLS[attr] if v != gold], 3)
        choices = [gold] + wrong
        rng.shuffle(choices)
        items.append({
            "context": stem.format(a=a),
            "choices": [cont.format(v=c) for c in choices],
            "answer": choices.index(gold),
        })
    return items


def order_task(facts, rng, n=100):
    items = []
    for _ in range(n):
        a, b = rng.sample(ANIMALS, 2)
        place = rng.choice(PLACES)
        good = f" met the {b} near the {place}."
        bad = [
            f" the {b} met near the {place}.",
            f" met near the {b} the {place}.",
            f" near the {place} met the {b}.",
        ]
        choices = [good] + bad
        rng.shuffle(choices)
        items.append({
            "context": f"one day the {a}",
            "choices": choices,
            "answer": choices.index(good),
        })
    return items


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def main():
    facts = world()
    (HERE / "toy_corpus.txt").write_text(train_corpus(facts, random.Random(1)))
    (HERE / "wiki_toy.txt").write_text(wiki_corpus(facts, random.Random(2)))
    (HERE / "ptb_toy.txt").write_text(ptb_corpus(facts, random.Random(3)))
    write_jsonl(HERE / "alpaca_toy.jsonl", sft_records(facts, random.Random(4), 120, dolly=False))
    write_jsonl(HERE / "dolly_toy.jsonl", sft_records(facts, random.Random(5), 120, dolly=True))
    write_jsonl(HERE / "tasks" / "facts.jsonl", fact_task(facts, random.Random(6)))
    write_jsonl(HERE / "tasks" / "word_order.jsonl", order_task(facts, random.Random(8)))


if __name__ == "__main__":
    main()
