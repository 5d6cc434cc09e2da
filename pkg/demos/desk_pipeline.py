#!/usr/bin/env python3
"""Desk-scale end-to-end run: synthesize, train, narrate and score."""

from __future__ import annotations

import argparse
import json
import shutil
import time
from pathlib import Path

from pdum.kags.config import RunConfig
from pdum.kags.data import parse_manifest
from pdum.kags.knowledge import load_knowledge_graph
from pdum.kags.metrics import evaluate_stories
from pdum.kags.model import generate_album, prepare_album
from pdum.kags.synth import SynthSpec, synthesize_dataset
from pdum.kags.trainer import checkpoint_load, train


def demo(work_dir: Path, albums: int, epochs: int, beam: int, seed: int, cleanup: bool) -> None:
    print(f"Using work directory {work_dir}")
    work_dir.mkdir(parents=True, exist_ok=True)

    spec = SynthSpec(m_boxes=8, grid=4, feature_dim=32)
    dataset = synthesize_dataset(work_dir / "data", albums, seed, spec)
    print(f"Synthesized {len(dataset.albums)} albums into {dataset.manifest}")

    config = RunConfig.scaled(feature_dim=spec.feature_dim, epochs=epochs, seed=seed)
    started = time.perf_counter()
    result = train(config, dataset.manifest, dataset.knowledge, work_dir / "model")
    print(f"Trained {epochs} epochs in {time.perf_counter() - started:.1f}s -> {result.checkpoint}")
    last = result.log.read_text(encoding="utf-8").splitlines()[-1]
    print(f"Last epoch: {last}")

    state = checkpoint_load(result.checkpoint)
    graph = load_knowledge_graph(dataset.knowledge)
    predictions = work_dir / "predictions.jsonl"
    with predictions.open("w", encoding="utf-8") as handle:
        for record in parse_manifest(dataset.manifest, n_images=config.n_images):
            example = prepare_album(record, graph, state.vocab, state.config)
            hypotheses = generate_album(state.model, example, state.vocab, state.config, beam=beam)
            sentences = [" ".join(state.vocab.decode(h.tokens)) for h in hypotheses]
            handle.write(json.dumps({"album_id": record.album_id, "sentences": sentences}) + "\n")
            print(f"{record.album_id}:")
            for generated, reference in zip(sentences, record.references[0]):
                print(f"  {generated:<45} | {reference}")

    report = evaluate_stories(predictions, dataset.manifest, n_images=config.n_images)
    print("Scores (x100): " + ", ".join(f"{key}={value:.1f}" for key, value in report.to_json().items()))

    if cleanup:
        print(f"Removing {work_dir}")
        shutil.rmtree(work_dir, ignore_errors=True)


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Synthesize a few albums, memorize them with the scaled preset and score the stories.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--work-dir", type=Path, default=Path("/tmp/pdum-kags-demo"), help="Scratch directory.")
    parser.add_argument("--albums", type=int, default=4, help="Number of synthetic albums.")
    parser.add_argument("--epochs", type=int, default=300, help="Training epochs.")
    parser.add_argument("--beam", type=int, default=3, help="Beam size (1 decodes greedily).")
    parser.add_argument("--seed", type=int, default=0, help="Seed for data and training.")
    parser.add_argument("--cleanup", action="store_true", help="Remove the work directory afterwards.")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    demo(args.work_dir.expanduser().resolve(), args.albums, args.epochs, args.beam, args.seed, args.cleanup)


if __name__ == "__main__":
    main()
