"""Templated Mandarin-like sentence grammar and its homophone confusion table.

Used to build desk-scale correction benchmarks when no ASR corpus is at hand.
Every sentence is drawn from one topic, so content words co-occur with
topic-mates. Many confusables turn a word into a valid word of another topic, so fixing
them needs the surrounding context, not a lookup.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

TIMES = ["今天", "明天", "昨天", "每天", "上午", "下午", "晚上", "周末", "五点", "中午"]

# topic -> slot -> fillers; actions map a verb to the objects it licenses
TOPICS = {
    "school": {
        "subj": ["老师", "学生", "同学", "教师"],
        "place": ["学校", "教室", "书店", "学院"],
        "actions": {"写": ["作业", "日记", "诗歌"], "学习": ["数学", "历史", "英语"], "复习": ["功课", "课文"],
                    "看": ["课本", "黑板"]},
    },
    "hospital": {
        "subj": ["医生", "护士", "病人", "大夫"],
        "place": ["医院", "诊所", "病房", "药店"],
        "actions": {"看": ["病人", "报告"], "开": ["药方", "处方"], "检查": ["身体", "血压"], "吃": ["药片", "午饭"]},
    },
    "market": {
        "subj": ["妈妈", "顾客", "老板", "阿姨"],
        "place": ["商店", "超市", "市场", "门店"],
        "actions": {"买": ["水果", "蔬菜", "衣服", "点心"], "卖": ["鲜花", "鸡蛋"], "挑": ["苹果", "西瓜"]},
    },
    "farm": {
        "subj": ["农民", "爷爷", "村长", "叔叔"],
        "place": ["田里", "村里", "果园", "菜地"],
        "actions": {"种": ["小麦", "水稻", "玉米"], "收": ["庄稼", "果子"], "浇": ["菜苗", "花草"]},
    },
    "sport": {
        "subj": ["球员", "教练", "哥哥", "朋友"],
        "place": ["公园", "球场", "操场", "体育馆"],
        "actions": {"踢": ["足球"], "打": ["篮球", "排球"], "看": ["比赛", "球赛"], "练": ["跑步", "游泳"]},
    },
    "travel": {
        "subj": ["司机", "游客", "导游", "乘客"],
        "place": ["车站", "机场", "码头", "路口"],
        "actions": {"坐": ["火车", "汽车", "飞机"], "等": ["班车", "朋友"], "拿": ["行李", "车票"]},
    },
}
ADVERBS = ["一起", "经常", "马上", "已经", "偶尔", "再次"]
TEMPLATES = [
    "{time}{subj}在{place}{verb}{obj}",
    "{subj}{time}{adv}{verb}了{obj}",
    "{time}{subj}和{subj2}在{place}{verb}{obj}",
    "{subj}{adv}去{place}{verb}{obj}",
    "{time}{subj}{adv}在{place}{verb}了{obj}",
]

# Half produce non-words (phonetic slips), half swap in a valid word from
# another topic (学院/医院, 球场/市场, 公园/果园, 书店/药店, 教练/教师).
CONFUSIONS = [
    ("在", "再", 1.0),
    ("了", "乐", 1.0),
    ("病", "并", 1.0),
    ("菜", "彩", 1.0),
    ("师", "诗", 1.0),
    ("生", "声", 1.0),
    ("看", "砍", 1.0),
    ("车", "扯", 1.0),
    ("习", "席", 1.0),
    ("饭", "范", 1.0),
    ("药", "要", 1.0),
    ("药", "书", 1.0),
    ("书", "药", 1.0),
    ("医", "学", 1.0),
    ("学", "医", 1.0),
    ("球", "市", 1.0),
    ("市", "球", 1.0),
    ("公", "果", 1.0),
    ("果", "公", 1.0),
    ("练", "师", 1.0),
]

STOPWORDS = ["的", "了", "在", "和", "去"]

# chance that a sentence borrows its place from another topic; keeps some
# cross-topic substitutions genuinely ambiguous
PLACE_MIX = 0.1


def sample_sentence(rng: np.random.Generator) -> str:
    def pick(xs):
        return xs[rng.integers(len(xs))]

    names = sorted(TOPICS)
    topic = TOPICS[pick(names)]
    place_topic = TOPICS[pick(names)] if rng.random() < PLACE_MIX else topic
    template = pick(TEMPLATES)
    verb = pick(sorted(topic["actions"]))
    subj = pick(topic["subj"])
    subj2 = pick([s for s in topic["subj"] if s != subj])
    return template.format(
        time=pick(TIMES), subj=subj, subj2=subj2, place=pick(place_topic["place"]), adv=pick(ADVERBS),
        verb=verb, obj=pick(topic["actions"][verb]),
    )


def generate_corpus(n: int, seed: int = 0, max_draws: int | None = None) -> list[str]:
    """``n`` distinct sentences in first-seen order."""
    rng = np.random.default_rng(seed)
    seen: dict[str, None] = {}
    limit = max_draws if max_draws is not None else 50 * n
    draws = 0
    while len(seen) < n:
        if draws >= limit:
            raise RuntimeError(f"grammar produced only {len(seen)} distinct sentences in {draws} draws")
        seen.setdefault(sample_sentence(rng), None)
        draws += 1
    return list(seen)


def confusion_model(rate: float = 0.1):
    from .text import ConfusionModel

    table: dict[str, list[tuple[str, float]]] = {}
    for a, b, w in CONFUSIONS:
        table.setdefault(a, []).append((b, w))
    return ConfusionModel(table, rate)


def write_resources(out_dir, n_sentences: int, seed: int = 0) -> dict[str, Path]:
    """Write corpus.txt, confusion.tsv and stopwords.txt into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"corpus": out / "corpus.txt", "confusion": out / "confusion.tsv", "stopwords": out / "stopwords.txt"}
    paths["corpus"].write_text("".join(s + "\n" for s in generate_corpus(n_sentences, seed)), encoding="utf-8")
    paths["confusion"].write_text("".join(f"{a}\t{b}\t{w:g}\n" for a, b, w in CONFUSIONS), encoding="utf-8")
    paths["stopwords"].write_text("".join(s + "\n" for s in STOPWORDS), encoding="utf-8")
    return paths
