#!/usr/bin/env python3
"""Train the triplet-objective linear embedding on a synthetic corpus and
show the objective descending plus a before/after retrieval comparison."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from coqharness.corpus import TheoremRecord  # noqa: E402
from coqharness.retriever import (  # noqa: E402
    TrainHyper,
    build_index,
    retrieve,
    train_embedding,
)
from coqharness.sentences import Sentence  # noqa: E402


def synthetic_corpus(n: int) -> list[TheoremRecord]:
    records = []
    for i in range(n):
        statement = f"Lemma lem{i}: holds tok{i}a tok{i}b tok{i}c."
        proof = f"Proof. tac tok{i}a tok{i}b tok{i}c. Qed."
        records.append(
            TheoremRecord(
                id=f"syn.v::lem{i}",
                name=f"lem{i}",
                statement=Sentence(statement, (0, len(statement))),
                proof=(Sentence(proof, (0, len(proof))),),
                file="syn.v",
                preceding_source="",
                index_in_file=i,
            )
        )
    return records


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--records", type=int, default=12)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--learning-rate", type=float, default=0.2)
    parser.add_argument("--seed", type=int, default=5)
    args = parser.parse_args()

    records = synthetic_corpus(args.records)
    hyper = TrainHyper(
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        seed=args.seed,
        feature_dim=512,
        embed_dim=32,
    )
    model = train_embedding(records, hyper)
    print(f"objective: {model.initial_objective:.4f} -> {model.final_objective:.4f}")
    for row in model.history[:: max(1, args.epochs // 10)]:
        print(f"  epoch {row['epoch']:3d}  train={row['train_objective']:.4f}  "
              f"holdout={row['val_objective']:.4f}")

    index = build_index(records, feature_dim=512)
    query = records[args.records // 2]
    lexical = retrieve(index, query, 3)
    embedded = retrieve(index, query, 3, mode="embedded", model=model)
    print(f"query: {query.name}")
    print(f"  lexical top-3:  {[rid for rid, _ in lexical]}")
    print(f"  embedded top-3: {[rid for rid, _ in embedded]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
