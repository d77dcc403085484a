"""Self-contained pipeline workspaces for the mock backend.

``make_mock_workspace`` writes an expert registry with delta archives and
domain embeddings, a base model, a labeled target corpus and a config file,
so ``samkit run --config ...`` works without any model or server.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ner_eval import Instance, write_corpus
from .selection import write_embeddings
from .tensor_store import TensorMap, save_tensor_archive
from .toylab import gen_synthetic_domain, make_domain_family, text_embedding

LAYOUT = {"layer0.weight": (8, 16), "layer0.bias": (8,), "layer1.weight": (4, 8)}


def _random_tensors(rng: np.random.Generator, scale: float) -> TensorMap:
    return TensorMap({k: (rng.standard_normal(s) * scale).astype(np.float32) for k, s in LAYOUT.items()})


def make_mock_workspace(
    root,
    n_experts: int = 6,
    n_target: int = 20,
    seed: int = 0,
    perfect: bool = True,
    domain_instances: int = 30,
) -> Path:
    """Build a workspace under ``root`` and return the path of its config.json.

    Experts are synthetic source domains; the target mixes the first two.
    With ``perfect`` every mock expert reproduces the gold labels, otherwise
    each expert recalls its own private types well and everything else poorly.
    """
    root = Path(root)
    (root / "experts").mkdir(parents=True, exist_ok=True)
    sources, targets = make_domain_family(n_sources=n_experts, n_targets=1, seed=seed, instances=domain_instances)
    rng = np.random.default_rng(seed)

    save_tensor_archive(_random_tensors(rng, 1.0), root / "base.safetensors")
    registry, profiles = [], {}
    for i, spec in enumerate(sources):
        eid = f"expert{i}"
        data = gen_synthetic_domain(spec, "train")
        write_embeddings([text_embedding(inst.tokens) for inst in data.instances], root / "experts" / f"{eid}.jsonl")
        save_tensor_archive(_random_tensors(rng, 0.01), root / "experts" / f"{eid}.safetensors")
        registry.append(
            {
                "id": eid,
                "domain_label": spec.domain_id,
                "delta_path": f"experts/{eid}.safetensors",
                "embedding_path": f"experts/{eid}.jsonl",
            }
        )
        if perfect:
            profiles[eid] = {"seed": i}
        else:
            own = {t: 0.95 for t in spec.entity_types if t.startswith("kind")}
            profiles[eid] = {"recall_by_type": own, "default_recall": 0.6, "spurious_rate": 0.02, "seed": i}
    (root / "registry.json").write_text(json.dumps(registry, indent=2) + "\n")

    target = gen_synthetic_domain(targets[0].__class__(**{**targets[0].to_dict(), "instances": n_target}), "test")
    corpus = [Instance(inst.instance_id, inst.text, inst.gold) for inst in target.instances]
    write_corpus(corpus, root / "corpus.jsonl")
    write_embeddings([text_embedding(inst.tokens) for inst in target.instances], root / "corpus_embeddings.jsonl")

    config = {
        "registry_path": str(root / "registry.json"),
        "target_corpus_path": str(root / "corpus.jsonl"),
        "target_embeddings_path": str(root / "corpus_embeddings.jsonl"),
        "base_model_path": str(root / "base.safetensors"),
        "output_dir": str(root / "out"),
        "entity_types": target.types(),
        "seed": seed,
        "mock": True,
        "mock_profiles": profiles,
    }
    path = root / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n")
    return path
