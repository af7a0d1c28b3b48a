"""
Masking an annotated corpus and reading its position ids
========================================================

A walk from annotated sentences to prompts, and from prompts to the
mask-relative position ids that condition the attention head.
"""

# %%
# Build a small synthetic corpus. Every sentence carries outcome spans, and
# the generator guarantees that all five prompt types show up after masking.
from collections import Counter

from pbprompt import corpus, position

sentences = corpus.generate_synthetic_corpus(seed=0, n_sentences=40, vocab_size=120)
print(" ".join(sentences[0].tokens))
print(sentences[0].outcome_spans)

# %%
# Custom masking replaces each annotated span with ``[MASK]`` tokens and
# classifies the result by where the blanks sit.
prompts = corpus.mask_corpus(sentences, "custom")
print(Counter(p.prompt_type.value for p in prompts))

# %%
# Random masking hides about 15% of tokens regardless of the annotation.
random_prompts = corpus.mask_corpus(sentences, "random", rate=0.15, seed=0)
masked = sum(len(p.masked_positions) for p in random_prompts)
total = sum(len(p.tokens) for p in random_prompts)
print(f"masked fraction: {masked / total:.3f}")

# %%
# Position ids are measured from an anchor span. Tokens inside the anchor get
# 0, tokens before it count down, tokens after it count up.
toy = corpus.apply_custom_masking(corpus.AnnotatedSentence(
    ["[x]", "b", "c", "[y]", "e", "f", "[z]"], [corpus.Span(0, 0), corpus.Span(3, 3), corpus.Span(6, 6)]))
for seq in position.all_mask_position_sequences(toy):
    print(seq.anchor_span_index, seq.ids)

# %%
# A multi-mask prompt gets one id sequence per anchor; the head averages the
# representations they produce.
mixed = next(p for p in prompts if p.prompt_type is corpus.PromptType.MIXED)
print(" ".join(mixed.tokens))
for seq in position.all_mask_position_sequences(mixed):
    print(seq.ids)

# %%
# Split into train and test, then keep the test prompts whose answers are
# rare in training and whose context differs from any training prompt.
spec = corpus.SplitSpec(train_fraction=0.8, seed=0)
train, test = corpus.split_dataset(prompts, spec)
general = corpus.build_generalisation_testset(train, test, spec)
print(len(train), len(test), len(general))
print([p.answer_frequencies for p in general[:5]])
