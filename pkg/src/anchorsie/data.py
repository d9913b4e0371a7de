"""Document readers, synthetic receipts and the visual-grid renderer."""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .core import (BBox, DocumentAnnotation, Entity, EntityGroup, OcrSequence,
                   OcrWord, aggregate_text, raster_keys, serialize, union_boxes,
                   words_in_box)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ReaderError(ValueError):
    pass


# ---------------------------------------------------------------------------
# canonical document JSON

def _corner_list(box: BBox) -> list[float]:
    return [round(v, 9) for v in box.corners]


def _entity_json(e: Entity) -> dict:
    return {"label": e.label, "text": e.text, "box": _corner_list(e.box), "span": list(e.span)}


def document_to_json(doc: DocumentAnnotation) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "doc_id": doc.doc_id,
        "page_size": list(doc.page_size),
        "order_mode": doc.ocr.order_mode,
        "words": [{"index": w.index, "text": w.text, "box": _corner_list(w.box)} for w in doc.ocr],
        "groups": [{"kind": g.kind, "fields": [_entity_json(e) for e in g.entities]}
                   for g in doc.groups],
        "orphans": [],
    }


def _box_from_list(values, where: str) -> BBox:
    try:
        x0, y0, x1, y1 = (float(v) for v in values)
        return BBox.from_corners(max(0.0, x0), max(0.0, y0), min(1.0, x1), min(1.0, y1))
    except (TypeError, ValueError) as exc:
        raise ReaderError(f"{where}: bad box {values!r} ({exc})") from None


def document_from_json(data: dict) -> DocumentAnnotation:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ReaderError(f"unsupported schema_version {version!r}")
    words = tuple(OcrWord(i, w["text"], _box_from_list(w["box"], f"words[{i}]"))
                  for i, w in enumerate(data.get("words", [])))
    groups = []
    for gi, g in enumerate(data.get("groups", [])):
        ents = [Entity(f["label"], _box_from_list(f["box"], f"groups[{gi}]"), f.get("text", ""),
                       tuple(f.get("span", ()))) for f in g["fields"]]
        if not ents:
            raise ReaderError(f"groups[{gi}] has no fields")
        groups.append(EntityGroup(ents[0], tuple(ents[1:]), g["kind"]))
    return DocumentAnnotation(OcrSequence(words, data.get("order_mode", "as_given")),
                              tuple(groups), tuple(data.get("page_size", (1000.0, 1000.0))),
                              data.get("doc_id", ""))


def load_document(path: str | Path) -> DocumentAnnotation:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ReaderError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    return document_from_json(data)


def save_document(doc: DocumentAnnotation, path: str | Path) -> None:
    Path(path).write_text(json.dumps(document_to_json(doc), indent=1, sort_keys=False) + "\n")


def load_corpus(directory: str | Path) -> list[DocumentAnnotation]:
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if manifest.exists():
        names = json.loads(manifest.read_text())["documents"]
        files = [directory / n["file"] for n in names]
    else:
        files = sorted(p for p in directory.glob("*.json") if p.name != "manifest.json")
    return [load_document(p) for p in files]


# ---------------------------------------------------------------------------
# FUNSD- and CORD-style readers

def _read_json(source) -> Any:
    if isinstance(source, (dict, list)):
        return source
    path = Path(source)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ReaderError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None


def _page_size(data: dict, boxes: list[list[float]]) -> tuple[float, float]:
    if "page_size" in data:
        w, h = data["page_size"]
        return float(w), float(h)
    img = data.get("img") or data.get("meta", {}).get("image_size")
    if img:
        return float(img["width"]), float(img["height"])
    if not boxes:
        return 1000.0, 1000.0
    return max(b[2] for b in boxes), max(b[3] for b in boxes)


def _norm_box(px, size, where) -> BBox:
    w, h = size
    x0, y0, x1, y1 = (float(v) for v in px)
    if x1 < x0 or y1 < y0:
        raise ReaderError(f"{where}: inverted box {px!r}")
    return BBox.from_corners(min(max(x0 / w, 0.0), 1.0), min(max(y0 / h, 0.0), 1.0),
                             min(max(x1 / w, 0.0), 1.0), min(max(y1 / h, 0.0), 1.0))


def _finish(words: list[tuple[str, BBox]], entities: list[tuple[Any, Entity]],
            grouping: list[tuple[str, list]], page, doc_id) -> DocumentAnnotation:
    ocr = OcrSequence(tuple(OcrWord(i, t, b) for i, (t, b) in enumerate(words)))
    lookup = dict(entities)
    groups = tuple(EntityGroup(lookup[members[0]], tuple(lookup[m] for m in members[1:]), kind)
                   for kind, members in grouping)
    return serialize(DocumentAnnotation(ocr, groups, page, doc_id), "raster_scan")


def read_funsd(source, key_label: str = "question", value_label: str = "answer",
               doc_id: str = "") -> DocumentAnnotation:
    """Read a FUNSD-style form: entities with word lists and id links."""
    data = _read_json(source)
    if not isinstance(data, dict) or not isinstance(data.get("form"), list):
        raise ReaderError(f"{source}: expected an object with a 'form' list")
    form = data["form"]
    page = _page_size(data, [f.get("box", [0, 0, 0, 0]) for f in form])
    words: list[tuple[str, BBox]] = []
    entities: list[tuple[Any, Entity]] = []
    labels: dict[Any, str] = {}
    for k, seg in enumerate(form):
        where = f"form[{k}]"
        if "id" not in seg:
            raise ReaderError(f"{where}: missing id")
        span = []
        for wi, w in enumerate(seg.get("words", [])):
            text = str(w.get("text", "")).strip()
            if not text:
                continue
            span.append(len(words))
            words.append((text, _norm_box(w["box"], page, f"{where}.words[{wi}]")))
        labels[seg["id"]] = seg.get("label", "other")
        if not span:
            log.warning("%s: entity %r has no words; skipped", where, seg["id"])
            continue
        box = _norm_box(seg["box"], page, where) if "box" in seg else union_boxes(words[i][1] for i in span)
        box = union_boxes([box] + [words[i][1] for i in span])
        text = " ".join(words[i][0] for i in span)
        entities.append((seg["id"], Entity(labels[seg["id"]], box, text, tuple(span))))
    known = {eid for eid, _ in entities}
    values_of: dict[Any, list] = {}
    owner: dict[Any, Any] = {}
    for k, seg in enumerate(form):
        for pair in seg.get("linking", []):
            if len(pair) != 2:
                raise ReaderError(f"form[{k}]: malformed link {pair!r}")
            for eid in pair:
                if eid not in labels:
                    raise ReaderError(f"form[{k}]: link references unknown id {eid!r}")
            a, b = pair
            if labels[a] == value_label and labels[b] == key_label:
                a, b = b, a
            if labels[a] != key_label or labels[b] != value_label:
                continue
            if a not in known or b not in known or b in owner:
                if b in owner and owner[b] != a:
                    log.warning("form[%d]: value %r already linked to %r", k, b, owner[b])
                continue
            owner[b] = a
            values_of.setdefault(a, []).append(b)
    grouping = []
    for eid, e in entities:
        if eid in owner:
            continue
        members = [eid] + values_of.get(eid, [])
        kind = "key_value" if e.label == key_label else "singleton"
        grouping.append((kind, members))
    return _finish(words, entities, grouping, page, doc_id)


CORD_LABEL_MAP = {
    "menu.nm": "name", "menu.cnt": "count", "menu.price": "price",
    "menu.unitprice": "unit_price", "sub_total.subtotal_price": "subtotal",
    "sub_total.tax_price": "tax", "total.total_price": "total",
}


def _quad_box(w: dict) -> list[float]:
    if "box" in w:
        return w["box"]
    q = w["quad"]
    xs = [q[f"x{i}"] for i in range(1, 5)]
    ys = [q[f"y{i}"] for i in range(1, 5)]
    return [min(xs), min(ys), max(xs), max(ys)]


def read_cord(source, label_map: dict | None = None, name_label: str = "name",
              key_label: str = "key", doc_id: str = "") -> DocumentAnnotation:
    """Read a CORD-style receipt: categorized lines grouped by ``group_id``."""
    data = _read_json(source)
    if isinstance(data, list):
        data = {"valid_line": data}
    if not isinstance(data, dict) or not isinstance(data.get("valid_line", []), list):
        raise ReaderError(f"{source}: expected an object with a 'valid_line' list")
    label_map = CORD_LABEL_MAP if label_map is None else label_map
    lines = data.get("valid_line", [])
    all_boxes = []
    for li, line in enumerate(lines):
        for wi, w in enumerate(line.get("words", [])):
            try:
                all_boxes.append(_quad_box(w))
            except KeyError:
                raise ReaderError(f"valid_line[{li}].words[{wi}]: missing quad/box") from None
    page = _page_size(data, all_boxes)
    words: list[tuple[str, BBox]] = []
    entities: list[tuple[Any, Entity]] = []
    by_group: dict[Any, list] = {}
    for li, line in enumerate(lines):
        label = label_map.get(line.get("category", ""), line.get("category", "other"))
        parts: dict[bool, list[int]] = {True: [], False: []}
        for wi, w in enumerate(line.get("words", [])):
            text = str(w.get("text", "")).strip()
            if not text:
                continue
            parts[bool(w.get("is_key", 0))].append(len(words))
            words.append((text, _norm_box(_quad_box(w), page, f"valid_line[{li}].words[{wi}]")))
        gid = line.get("group_id", f"line-{li}")
        for is_key, span in parts.items():
            if not span:
                continue
            box = union_boxes(words[i][1] for i in span)
            lab = key_label if is_key else label
            eid = (li, is_key)
            entities.append((eid, Entity(lab, box, " ".join(words[i][0] for i in span), tuple(span))))
            by_group.setdefault(gid, []).append(eid)
    lookup = dict(entities)
    keys = raster_keys([OcrWord(i, t, b) for i, (t, b) in enumerate(words)])
    grouping = []
    for gid, members in by_group.items():
        ents = [lookup[m] for m in members]
        first = lambda m: min(keys[i] for i in lookup[m].span)  # noqa: E731
        if any(e.label == key_label for e in ents):
            kind = "key_value"
            prim = next(m for m in members if lookup[m].label == key_label)
        elif len(members) == 1:
            kind, prim = "singleton", members[0]
        else:
            kind = "line_item"
            named = [m for m in members if lookup[m].label == name_label]
            if named:
                prim = named[0]
            else:
                prim = min(members, key=first)
                log.warning("group %r has no %r entity; primary falls back to the first entity",
                            gid, name_label)
        rest = sorted((m for m in members if m != prim), key=first)
        grouping.append((kind, [prim] + rest))
    return _finish(words, entities, grouping, page, doc_id)


# ---------------------------------------------------------------------------
# synthetic receipts

FOODS = ("Chicken", "Katsu", "Curry", "Beef", "Noodle", "Soup", "Rice", "Fried",
         "Spicy", "Tofu", "Pork", "Bun", "Green", "Tea", "Iced", "Latte", "Mocha",
         "Cheese", "Burger", "Fries", "Salad", "Garlic", "Bread", "Lemon", "Soda",
         "Salmon", "Sushi", "Roll", "Egg", "Tart", "Mango", "Juice", "Pasta",
         "Pizza", "Wings", "Shrimp", "Dumpling", "Steak", "Onion", "Mushroom",
         "Vanilla", "Cake", "Cookie", "Donut", "Bagel", "Waffle", "Honey", "Milk")
STORES = ("Cafe", "Bistro", "Kitchen", "Grill", "Deli", "Diner", "Bakery", "Express",
          "Golden", "Happy", "Corner", "Sunny", "Royal", "Urban", "Little")
CASHIERS = ("Anna", "Budi", "Chen", "Dewi", "Eko", "Fitri", "Gita", "Hana", "Ivan", "Joko")
HEADER_KEYS = (("Date:", "date"), ("Time:", "time"), ("Cashier:", "cashier"), ("Table:", "table"))
FOOTER_KEYS = ((("Subtotal",), ("Sub", "Total")), (("Tax",), ("Service", "Tax")),
               (("Total",), ("Grand", "Total")))
FOOTER_LABELS = ("subtotal", "tax", "total")
FILLERS = (("Thank", "you"), ("Please", "come", "again"), ("See", "you", "soon"))

CHAR_W = 0.0135
WORD_GAP = 0.012
NAME_X, COUNT_X, UNIT_X, PRICE_RIGHT, VALUE_X = 0.06, 0.53, 0.63, 0.94, 0.36


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_docs: int = 100
    line_item_range: tuple[int, int] = (1, 6)
    kv_pair_range: tuple[int, int] = (1, 3)
    # probability that a multi-word item name wraps onto the next row
    wrap_prob: float = 0.3
    unit_price_prob: float = 0.25
    jitter: float = 0.08
    word_drop: float = 0.1
    labels: tuple[str, ...] = ("store", "key", "date", "time", "cashier", "table",
                               "name", "count", "unit_price", "price",
                               "subtotal", "tax", "total")

    def __post_init__(self):
        for name in ("line_item_range", "kv_pair_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a nonempty range, got {(lo, hi)}")
        for name in ("wrap_prob", "unit_price_prob", "word_drop"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if not 0.0 <= self.jitter < 0.25:
            raise ValueError("jitter must lie in [0, 0.25)")


def _price(rng) -> str:
    value = rng.integers(1, 400) * 0.25 + (rng.integers(0, 2) * 0.5)
    text = f"{value:.2f}"
    return "$" + text if rng.random() < 0.5 else text


def _layout(rng, cfg: SynthConfig):
    """Row-major layout: a list of rows, each a list of (text, x0, tag, ent_id)."""
    rows: list[list[tuple]] = []
    ents: dict[int, dict] = {}
    groups: list[tuple[str, list[int]]] = []

    def new_entity(label):
        eid = len(ents)
        ents[eid] = {"label": label}
        return eid

    def place(row, x, words, eid):
        for w in words:
            row.append((w, x, eid))
            x += len(w) * CHAR_W + WORD_GAP
        return x

    def place_right(row, right, word, eid):
        row.append((word, right - len(word) * CHAR_W, eid))

    store = [str(rng.choice(STORES)) for _ in range(rng.integers(1, 3))]
    eid = new_entity("store")
    row: list = []
    width = sum(len(w) * CHAR_W for w in store) + WORD_GAP * (len(store) - 1)
    place(row, 0.5 - width / 2, store, eid)
    rows.append(row)
    groups.append(("singleton", [eid]))

    n_kv = int(rng.integers(cfg.kv_pair_range[0], cfg.kv_pair_range[1] + 1))
    for k in rng.permutation(len(HEADER_KEYS))[:min(n_kv, len(HEADER_KEYS))]:
        key_text, label = HEADER_KEYS[k]
        value = {"date": lambda: f"{rng.integers(1, 29):02d}/{rng.integers(1, 13):02d}/20{rng.integers(18, 24)}",
                 "time": lambda: f"{rng.integers(7, 23):02d}:{rng.integers(0, 60):02d}",
                 "cashier": lambda: str(rng.choice(CASHIERS)),
                 "table": lambda: str(rng.integers(1, 40))}[label]()
        key_id, val_id = new_entity("key"), new_entity(label)
        row = []
        place(row, NAME_X, [key_text], key_id)
        place(row, VALUE_X, [value], val_id)
        rows.append(row)
        groups.append(("key_value", [key_id, val_id]))

    rows.append([("-" * 24, NAME_X, None)])

    n_items = int(rng.integers(cfg.line_item_range[0], cfg.line_item_range[1] + 1))
    for _ in range(n_items):
        n_words = int(rng.integers(1, 4))
        name = [str(w) for w in rng.choice(FOODS, size=n_words, replace=False)]
        name_id, cnt_id = new_entity("name"), new_entity("count")
        members = [name_id, cnt_id]
        wrap = n_words > 1 and rng.random() < cfg.wrap_prob
        cut = int(rng.integers(1, n_words)) if wrap else n_words
        row = []
        place(row, NAME_X, name[:cut], name_id)
        place(row, COUNT_X, [str(rng.integers(1, 10))], cnt_id)
        if rng.random() < cfg.unit_price_prob:
            up_id = new_entity("unit_price")
            place(row, UNIT_X, ["@" + _price(rng).lstrip("$")], up_id)
            members.append(up_id)
        price_id = new_entity("price")
        place_right(row, PRICE_RIGHT, _price(rng), price_id)
        members.append(price_id)
        rows.append(row)
        if wrap:
            row = []
            place(row, NAME_X + 0.02, name[cut:], name_id)
            rows.append(row)
        groups.append(("line_item", members))

    rows.append([("-" * 24, NAME_X, None)])

    footer = [i for i in range(3) if i == 2 or rng.random() < 0.5]
    for i in footer:
        key_words = FOOTER_KEYS[i][int(rng.integers(0, 2))]
        key_id, val_id = new_entity("key"), new_entity(FOOTER_LABELS[i])
        row = []
        place(row, NAME_X, list(key_words), key_id)
        place_right(row, PRICE_RIGHT, _price(rng), val_id)
        rows.append(row)
        groups.append(("key_value", [key_id, val_id]))

    filler = list(FILLERS[int(rng.integers(0, len(FILLERS)))])
    row = []
    place(row, 0.3, filler, None)
    rows.append(row)
    return rows, ents, groups


def _synth_one(rng, cfg: SynthConfig, doc_id: str) -> DocumentAnnotation | None:
    rows, ents, groups = _layout(rng, cfg)
    pitch = min(0.045, 0.94 / len(rows))
    height = 0.5 * pitch
    top = 0.03
    words: list[tuple[str, BBox]] = []
    spans: dict[int, list[int]] = {e: [] for e in ents}
    for r, row in enumerate(rows):
        cy = top + (r + 0.5) * pitch
        for text, x0, eid in row:
            if eid is None and rng.random() < cfg.word_drop:
                continue
            width = len(text) * CHAR_W
            dx, dy = rng.uniform(-cfg.jitter, cfg.jitter, size=2) * pitch
            x0 = min(max(x0 + dx, 0.0), 1.0 - width)
            box = BBox.from_corners(x0, cy + dy - height / 2, x0 + width, cy + dy + height / 2)
            if eid is not None:
                spans[eid].append(len(words))
            words.append((text, box))
    ocr = OcrSequence(tuple(OcrWord(i, t, b) for i, (t, b) in enumerate(words)))
    entities = {}
    for eid, info in ents.items():
        span = spans[eid]
        box = union_boxes(ocr[i].box for i in span)
        inside = words_in_box(box, ocr)
        if sorted(w.index for w in inside) != sorted(span):
            return None
        entities[eid] = Entity(info["label"], box, aggregate_text(inside), tuple(sorted(span)))
    out_groups = tuple(EntityGroup(entities[m[0]], tuple(entities[x] for x in m[1:]), kind)
                       for kind, m in groups)
    doc = DocumentAnnotation(ocr, out_groups, (800.0, 1200.0), doc_id)
    return serialize(doc, "raster_scan")


def synth_generate(cfg: SynthConfig) -> list[DocumentAnnotation]:
    """Deterministic synthetic receipts; each document gets its own child seed."""
    docs = []
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_docs)
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        doc = None
        while doc is None:
            doc = _synth_one(rng, cfg, f"synth-{cfg.seed}-{i:05d}")
        docs.append(doc)
    return docs


# ---------------------------------------------------------------------------
# visual grid

N_SIGNATURE = 6
CURRENCY = set("$€£¥")


@dataclass(frozen=True)
class VisualGrid:
    """``(grid_size, grid_size, channels)`` features standing in for the page image.

    Channel 0 is ink coverage, the next ``N_SIGNATURE`` channels a hashed
    character-shape signature, the last one a digit/currency indicator.
    """
    features: np.ndarray

    @property
    def grid_size(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[2]


def word_shape(text: str) -> str:
    out = []
    for ch in text:
        c = "X" if ch.isupper() else "x" if ch.islower() else "d" if ch.isdigit() else ch
        if not out or out[-1] != c:
            out.append(c)
    return "".join(out)


def grid_channels() -> int:
    return 2 + N_SIGNATURE


def render_visual_grid(doc: DocumentAnnotation | OcrSequence, grid_size: int = 16) -> VisualGrid:
    ocr = doc.ocr if isinstance(doc, DocumentAnnotation) else doc
    feats = np.zeros((grid_size, grid_size, grid_channels()), dtype=np.float64)
    edges = np.linspace(0.0, 1.0, grid_size + 1)
    cell = 1.0 / grid_size
    for w in ocr:
        x0, y0, x1, y1 = w.box.corners
        ox = np.clip(np.minimum(edges[1:], x1) - np.maximum(edges[:-1], x0), 0.0, None) / cell
        oy = np.clip(np.minimum(edges[1:], y1) - np.maximum(edges[:-1], y0), 0.0, None) / cell
        cover = np.outer(oy, ox)
        if not cover.any():
            continue
        feats[:, :, 0] += cover
        sig = 1 + zlib.crc32(word_shape(w.text).encode()) % N_SIGNATURE
        feats[:, :, sig] += cover
        if any(ch.isdigit() or ch in CURRENCY for ch in w.text):
            feats[:, :, -1] += cover
    np.clip(feats, 0.0, 1.0, out=feats)
    return VisualGrid(feats.astype(np.float32))
