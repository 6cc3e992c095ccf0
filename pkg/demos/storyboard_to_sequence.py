"""
From a storyboard to an interleaved token sequence
===================================================

Each paragraph of a storyboard becomes one segment: its text tokens, then its
video tokens. Neighbouring segments share one frame of video, stored once.
Attention stays inside segments; the shared frame belongs to both.
"""

from pathlib import Path

import numpy as np

from tttlab.pipeline import FULL_SCALE, TOY, assemble_sequence, build_local_mask, parse_storyboard

HERE = Path(__file__).resolve().parent
board_file = HERE.parent / "tests" / "fixtures" / "storyboards" / "v03_two_scenes.txt"
text = board_file.read_text(encoding="utf-8")
print(text)

sb = parse_storyboard(text)
print("scenes:", len(sb.scenes), "paragraphs per scene:", [len(s) for s in sb.scenes])

# the toy profile: 4 tokens per frame, 3 frames per segment, 5 text tokens, 1 shared frame
seq = assemble_sequence(sb, TOY)
print("sequence length", len(seq))
for sp in seq.spans:
    print(f"  segment {sp.segment} (scene {sp.scene}): text {sp.text_start}..{sp.text_start + sp.text_len - 1}"
          f"  video {sp.video_start}..{sp.end - 1}  shared {sp.shared_len} tokens from {sp.shared_start}")

# the local mask as a picture: '#' where a token may attend
mask = build_local_mask(seq).dense()
for row in mask:
    print("".join("#" if m else "." for m in row))

# full scale: 21 three-second segments of 13 frames, 1350 tokens per frame
print("video tokens for 21 segments at full scale:", FULL_SCALE.video_tokens(21))
print("context length per segment count:", [FULL_SCALE.context_length(n) for n in (1, 3, 6, 10, 21)])
print("symmetric:", np.array_equal(mask, mask.T))
