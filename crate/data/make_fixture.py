"""Writes the 500-document pipeline fixture and its expected filter counts.

The counts in expected.json come from the small rule implementation below,
which is written independently of the Rust filters.
"""
import json
import random
import string
from pathlib import Path

HERE = Path(__file__).parent
OUT = HERE / "pipeline_fixture"
SOURCES = ["chinese_internet", "github", "wikipedia"]
EN = "river market window garden teacher library morning station music winter".split()
ZH = "的一是在不了有和人这中大为上个国我以要他时来用们生到作地于出就分对成会可主发年动同工也能下过子说产种面而方后多定行学法所民得经十三之进着等部度家电力里如水化高自二理起小物现实加量都两体制机当使点从业本去把性好应开它合还因由其些然前外天政四日那社义事平形相全表间样与关各重新线内数正心反你明看原又么利比或但质气第向道命此变条只没结解问意建月公无系军很情者最立代想已通并提直题党程展五果料象员革位入常文总次品式活设及管特件长求老头基资边流路级少图山统接知较将组见计别她手角期根论运农指几九区强放决西被干做必战先回则任取据处队南给色光门即保治北造百规热领七海口东导器压志世金增争济阶油思术极交受联什认六共权收证改清己美再采转更单风切打白教速花带安场身车例真务具万每目至达走积示议声报斗完类八离华名确才科张信马节话米整空元况今集温传土许步群广石记需段研界拉林律叫且究观越织装影算低持音众书布复容儿须际商非验连断深难近矿千周委素技备半办青省列习响约支般史感劳便团往酸历市克何除消构府称太准精值号率族维划选标写存候毛亲快效斯院查江型眼王按格养易置派层片始却专状育厂京识适属圆包火住调满县局照参红细引听该铁价严".replace(" ", "")
TERMS = ["blockedterm", "forbiddenword", "屏蔽词"]


def is_cjk(c):
    o = ord(c)
    return 0x4E00 <= o <= 0x9FFF or 0x3400 <= o <= 0x4DBF or 0x20000 <= o <= 0x2EBEF or 0x30000 <= o <= 0x3134F


def is_punct(c):
    o = ord(c)
    return (c in string.punctuation or 0x3000 <= o <= 0x303F or 0xFF01 <= o <= 0xFF0F or 0xFF1A <= o <= 0xFF20
            or 0xFF3B <= o <= 0xFF40 or 0xFF5B <= o <= 0xFF65 or 0x2010 <= o <= 0x2027)


def nsfw_count(text):
    low = text.lower()
    n = 0
    for t in TERMS:
        i = 0
        while True:
            j = low.find(t, i)
            if j < 0:
                break
            before = low[j - 1] if j > 0 else ""
            after = low[j + len(t)] if j + len(t) < len(low) else ""
            word = lambda ch: ch.isascii() and ch.isalnum()
            ok_l = not (word(before) and word(t[0]))
            ok_r = not (word(after) and word(t[-1]))
            if ok_l and ok_r:
                n += 1
                i = j + len(t)
            else:
                i = j + 1
    return n


def verdict(text):
    words, in_word, run, best = 0, False, 0, 0
    for c in text:
        letter = c.isascii() and c.isalpha()
        if letter and not in_word:
            words += 1
        in_word = letter
        run = 0 if is_punct(c) else run + 1
        best = max(best, run)
    zh = sum(1 for c in text if is_cjk(c))
    if len(text) < 50:
        return "too_short"
    if best > 2048:
        return "punctuation_run"
    if words + zh < 20:
        return "lang_count"
    if nsfw_count(text) > 3:
        return "nsfw"
    return None


def sentence(rng, lang):
    if lang == "en":
        return " ".join(rng.choice(EN) for _ in range(rng.randint(6, 12))).capitalize() + "."
    return "".join(rng.choice(ZH) for _ in range(rng.randint(8, 16))) + "。"


def normal_doc(rng):
    lang = rng.choice(["en", "zh", "mix"])
    parts = []
    while len(parts) < rng.randint(4, 8) or sum(map(len, parts)) < 60:
        parts.append(sentence(rng, rng.choice(["en", "zh"]) if lang == "mix" else lang))
    return " ".join(parts) if lang == "en" else "".join(parts)


def make(rng, kind):
    if kind == "keep":
        return normal_doc(rng)
    if kind == "too_short":
        return sentence(rng, rng.choice(["en", "zh"]))[:rng.randint(1, 49)]
    if kind == "punctuation_run":
        return "".join(rng.choice(ZH) for _ in range(rng.randint(2049, 2300))) + "。"
    if kind == "lang_count":
        # 19 tokens at most, padded with digits and punctuation
        n = rng.choice([19, 19, 18, 10, 3])
        toks = [rng.choice(EN) for _ in range(n)]
        return " ".join(toks) + " " + "1, 2; " * 12
    if kind == "lang_20":
        return " ".join(rng.choice(EN) for _ in range(20)) + " " + "1, 2; " * 12
    if kind in ("nsfw", "nsfw_3"):
        k = 4 + rng.randint(0, 2) if kind == "nsfw" else 3
        base = normal_doc(rng)
        for _ in range(k):
            term = rng.choice(TERMS)
            term = term.upper() if rng.random() < 0.3 else term
            base += " " + term + "."
        # embedded inside a longer word: never counts
        return base + " unblockedtermed."
    raise ValueError(kind)


def main():
    rng = random.Random(20240601)
    kinds = (["keep"] * 260 + ["too_short"] * 60 + ["punctuation_run"] * 30 + ["lang_count"] * 60
             + ["lang_20"] * 20 + ["nsfw"] * 50 + ["nsfw_3"] * 20)
    assert len(kinds) == 500
    rng.shuffle(kinds)
    OUT.mkdir(exist_ok=True)
    counts = {"too_short": 0, "punctuation_run": 0, "lang_count": 0, "nsfw": 0}
    kept = 0
    files = {s: [] for s in SOURCES}
    for i, kind in enumerate(kinds):
        text = make(rng, kind)
        v = verdict(text)
        expect = {"keep": None, "lang_20": None, "nsfw_3": None}.get(kind, kind)
        assert v == expect, (kind, v, text[:80])
        if v is None:
            kept += 1
        else:
            counts[v] += 1
        src = SOURCES[i % 3]
        files[src].append(json.dumps({"id": f"doc{i:04d}", "source": src, "text": text}, ensure_ascii=False))
    for s, lines in files.items():
        (OUT / f"{s}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    expected = {"documents_read": 500, "kept": kept, "rejected": counts}
    (HERE / "pipeline_fixture_expected.json").write_text(json.dumps(expected, indent=2) + "\n")
    print(expected)


if __name__ == "__main__":
    main()
