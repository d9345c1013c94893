"""Synthetic multimodal relation datasets with the class signal in chosen channels.

A signal-bearing channel places every instance of a relation around that
relation's unit-norm cluster centre (plus isotropic Gaussian noise); all other
channels are pure noise. Object signal means each label slot shows one of the
relation's two preferred labels with probability ``preferred_prob`` and a
distractor otherwise.

Output directory layout::

    tokens.bank  images.bank  glove.txt  <split>.jsonl ...  oracle.json  spec.json
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hve import io
from hve.errors import ConfigError, FormatError, GenerationError

SIGNALS = ("text", "image", "objects", "image+objects", "mixed")
MAX_CENTRE_TRIES = 100
_FLOAT_KEYS = {"mixed_p", "noise_sigma", "preferred_prob", "max_cosine"}


@dataclass
class SynthSpec:
    num_relations: int = 10
    instances_per_relation: int = 20
    n_tokens: int = 8
    signal: str = "image"
    mixed_p: float = 0.5  # visual share of the class signal when signal == "mixed"
    noise_sigma: float = 0.05
    vocab: list | None = None
    num_distractors: int = 10
    objects_per_instance: int = 3
    preferred_prob: float = 0.9
    max_cosine: float = 0.3
    d_text: int = 768
    d_image: int = 512
    d_o: int = 50
    splits: dict | None = None  # split name -> number of relations, assigned in order
    seed: int = 0

    def validate(self):
        errs = []
        if not isinstance(self.num_relations, int) or self.num_relations < 2:
            errs.append("num_relations: must be an integer >= 2")
        for name in ("instances_per_relation", "n_tokens", "d_text", "d_image", "d_o"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                errs.append(f"{name}: must be a positive integer")
        if not isinstance(self.objects_per_instance, int) or self.objects_per_instance < 0:
            errs.append("objects_per_instance: must be a non-negative integer")
        if self.signal not in SIGNALS:
            errs.append(f"signal: {self.signal!r} not in {SIGNALS}")
        if not 0.0 <= self.mixed_p <= 1.0:
            errs.append("mixed_p: must be in [0, 1]")
        if not 0.0 <= self.preferred_prob <= 1.0:
            errs.append("preferred_prob: must be in [0, 1]")
        if self.noise_sigma < 0:
            errs.append("noise_sigma: must be non-negative")
        if not -1.0 < self.max_cosine <= 1.0:
            errs.append("max_cosine: must be in (-1, 1]")
        if self.vocab is not None:
            if len(set(self.vocab)) != len(self.vocab):
                errs.append("vocab: labels must be unique")
            elif isinstance(self.num_relations, int) and len(self.vocab) < 2 * self.num_relations + 1:
                errs.append("vocab: need at least 2 labels per relation plus one distractor")
        if self.splits is not None:
            if not isinstance(self.splits, dict) or not self.splits:
                errs.append("splits: must be a non-empty object")
            elif sum(self.splits.values()) != self.num_relations:
                errs.append(f"splits: relation counts sum to {sum(self.splits.values())}, "
                            f"expected {self.num_relations}")
        if not isinstance(self.seed, int) or self.seed < 0:
            errs.append("seed: must be a non-negative integer")
        if errs:
            raise ConfigError(errs)
        return self

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("synth spec: top level must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = [f"{k}: unknown key" for k in doc if k not in known]
        for k in _FLOAT_KEYS & doc.keys():
            v = doc[k]
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                unknown.append(f"{k}: must be a number")
        doc = {k: v for k, v in doc.items() if not (k in _FLOAT_KEYS and f"{k}: must be a number" in unknown)}
        try:
            spec = cls(**{k: v for k, v in doc.items() if k in known}).validate()
        except ConfigError as exc:
            raise ConfigError(unknown + exc.problems) from None
        if unknown:
            raise ConfigError(unknown)
        return spec

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(doc)

    def channel_weights(self):
        """Signal amplitude in (text, image) and the preferred-label probability for objects."""
        if self.signal == "mixed":
            p = self.mixed_p
            return math.sqrt(1.0 - p), math.sqrt(p), self.preferred_prob * p
        text = 1.0 if self.signal == "text" else 0.0
        image = 1.0 if self.signal in ("image", "image+objects") else 0.0
        objects = self.preferred_prob if self.signal in ("objects", "image+objects") else 0.0
        return text, image, objects


def separated_centres(rng, count, dim, max_cosine, tries=MAX_CENTRE_TRIES):
    """Unit vectors with pairwise cosine below ``max_cosine`` (rejection sampling)."""
    centres = []
    for i in range(count):
        for _ in range(tries):
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            if all(float(v @ c) < max_cosine for c in centres):
                centres.append(v)
                break
        else:
            raise GenerationError(
                f"could not place centre {i + 1} of {count} in {dim} dimensions with cosine < "
                f"{max_cosine} after {tries} tries; use fewer relations or a looser max_cosine"
            )
    return np.stack(centres)


def _vocab(spec):
    if spec.vocab is not None:
        return list(spec.vocab)
    return [f"obj{i:03d}" for i in range(2 * spec.num_relations + spec.num_distractors)]


def generate(spec: SynthSpec, out_dir):
    """Write a dataset for ``spec`` into ``out_dir`` and return the oracle report."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(spec.seed)
    s_centre_t, s_centre_i, s_words, s_inst = (np.random.default_rng(s) for s in root.spawn(4))

    R = spec.num_relations
    w_text, w_image, p_pref = spec.channel_weights()
    text_centres = separated_centres(s_centre_t, R, spec.d_text, spec.max_cosine)
    image_centres = separated_centres(s_centre_i, R, spec.d_image, spec.max_cosine)

    vocab = _vocab(spec)
    words = sorted({w for label in vocab for w in label.lower().split()})
    word_vecs = s_words.normal(size=(len(words), spec.d_o))
    word_vecs /= np.linalg.norm(word_vecs, axis=1, keepdims=True)
    io.write_glove(out / "glove.txt", dict(zip(words, word_vecs)))

    preferred = [vocab[2 * r: 2 * r + 2] for r in range(R)]
    distractors = vocab[2 * R:]
    relations = [f"rel{r:03d}" for r in range(R)]

    sigma = spec.noise_sigma
    token_rows, image_rows, records = [], [], []
    for r, rel in enumerate(relations):
        for j in range(spec.instances_per_relation):
            toks = sigma * s_inst.normal(size=(spec.n_tokens, spec.d_text)) + w_text * text_centres[r]
            img = sigma * s_inst.normal(size=spec.d_image) + w_image * image_centres[r]
            objs = []
            for _ in range(spec.objects_per_instance):
                if p_pref > 0 and s_inst.random() < p_pref:
                    objs.append(preferred[r][int(s_inst.integers(2))])
                elif p_pref > 0:
                    objs.append(distractors[int(s_inst.integers(len(distractors)))])
                else:
                    objs.append(vocab[int(s_inst.integers(len(vocab)))])
            start = len(token_rows) * spec.n_tokens
            token_rows.append(toks)
            image_rows.append(img)
            records.append({
                "id": f"{rel}-{j:04d}",
                "relation": rel,
                "tokens_range": [start, start + spec.n_tokens],
                "image_row": len(image_rows) - 1,
                "objects": objs,
                "head": f"head{r:03d}_{j:04d}",
                "tail": f"tail{r:03d}_{j:04d}",
            })

    tokens = np.concatenate(token_rows, axis=0)
    images = np.stack(image_rows)
    io.write_feature_bank(out / "tokens.bank", tokens, "f32")
    io.write_feature_bank(out / "images.bank", images, "f32")

    splits = spec.splits or {"all": R}
    per_split = {}
    cursor = 0
    for name, count in splits.items():
        chosen = set(relations[cursor: cursor + count])
        cursor += count
        recs = [rec for rec in records if rec["relation"] in chosen]
        io.write_manifest(out / f"{name}.jsonl", recs, "tokens.bank", "images.bank")
        per_split[name] = verify(out / f"{name}.jsonl", out / "glove.txt")

    (out / "spec.json").write_text(json.dumps(dataclasses.asdict(spec), indent=1, sort_keys=True) + "\n")
    (out / "oracle.json").write_text(json.dumps(per_split, indent=1, sort_keys=True) + "\n")
    return per_split


# --------------------------------------------------------------------------
# oracle


def nearest_centroid_accuracy(features, labels):
    """Leave-one-out nearest-centroid label recovery."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    idx = np.array([classes.index(l) for l in labels])
    sums = np.stack([features[idx == c].sum(axis=0) for c in range(len(classes))])
    counts = np.bincount(idx, minlength=len(classes)).astype(np.float64)
    correct = 0
    for x, c in zip(features, idx):
        cent_sums = sums.copy()
        cnt = counts.copy()
        cent_sums[c] -= x
        cnt[c] -= 1
        valid = cnt > 0
        cents = cent_sums[valid] / cnt[valid, None]
        ids = np.flatnonzero(valid)
        pred = ids[np.argmin(((cents - x) ** 2).sum(axis=1))]
        correct += int(pred == c)
    return correct / len(labels)


def modality_features(dataset, table):
    text = np.stack([inst.tokens.mean(axis=0) for inst in dataset.instances])
    image = np.stack([inst.image for inst in dataset.instances])
    objs = []
    for inst in dataset.instances:
        vecs = []
        for label in inst.objects:
            ws = [table.get(w) for w in label.lower().split()]
            vecs.append(np.mean([np.zeros(table.dim) if v is None else v for v in ws], axis=0))
        objs.append(np.mean(vecs, axis=0) if vecs else np.zeros(table.dim))
    return {"text": text, "image": image, "objects": np.stack(objs)}


def verify(manifest, glove):
    """Nearest-centroid recoverability of the relation label from each modality."""
    dataset = io.open_dataset(manifest)
    if len(dataset) == 0:
        raise FormatError("dataset has no instances", manifest)
    table = io.load_glove(glove)
    labels = [inst.relation for inst in dataset.instances]
    n_rel = len(set(labels))
    if n_rel < 2:
        raise FormatError(f"need at least 2 relations for the oracle, found {n_rel}", manifest)
    feats = modality_features(dataset, table)
    report = {name: nearest_centroid_accuracy(f, labels) for name, f in feats.items()}
    report.update(chance=1.0 / n_rel, num_relations=n_rel, num_instances=len(labels))
    return report
