#!/usr/bin/env python3
"""Tour of the synthetic conversation corpus.

Generates a small corpus, prints what a record looks like, and checks the
two properties the rest of the pipeline leans on: labels persist along a
conversation, and the audio features cluster around per-label anchors.
"""
import numpy as np

from ecss.corpus import (
    EMOTION_NAMES,
    INTENSITY_NAMES,
    GeneratorConfig,
    audio_anchor,
    corpus_stats,
    generate_corpus,
    split_corpus,
)

corpus = generate_corpus(GeneratorConfig(n_conversations=40, seed=7))
stats = corpus_stats(corpus)
print(f"{stats.n_conversations} conversations, {stats.n_utterances} turns, "
      f"mean {stats.mean_turns:.1f} turns each")

split = split_corpus(corpus)
print("split sizes:", {k: len(v) for k, v in split.items()})

print("\nemotion marginals (skewed mode):")
for name, count in zip(EMOTION_NAMES, stats.emotion_counts):
    print(f"  {name:<9} {count / stats.n_utterances:.3f}")

conv = corpus[0]
turn = conv.turns[0]
print(f"\nfirst turn of {conv.id}:")
print(f"  speaker {turn.speaker}, emotion {EMOTION_NAMES[turn.emotion]}, "
      f"intensity {INTENSITY_NAMES[turn.intensity]}")
print(f"  {len(turn.text_tokens)} tokens, audio feature dim "
      f"{turn.audio_feat.shape[0]}")
print(f"  targets: mel {turn.targets.mel.shape}, durations "
      f"{turn.targets.duration.tolist()}")

# Label persistence: how often does a turn keep the previous turn's label?
keeps = [int(a.emotion == b.emotion)
         for c in corpus for a, b in zip(c.turns, c.turns[1:])]
print(f"\nemotion persistence along conversations: {np.mean(keeps):.3f}")

# Anchor geometry: distance to the turn's own anchor vs the nearest other.
own, other = [], []
for c in corpus[:10]:
    for t in c.turns:
        mine = audio_anchor(int(t.emotion), int(t.intensity), t.speaker)
        own.append(np.linalg.norm(t.audio_feat - mine))
        best = min(
            np.linalg.norm(t.audio_feat
                           - audio_anchor(e, i, t.speaker))
            for e in range(7) for i in range(3)
            if (e, i) != (int(t.emotion), int(t.intensity)))
        other.append(best)
print(f"audio distance to own anchor {np.mean(own):.3f}, to nearest "
      f"foreign anchor {np.mean(other):.3f}")
