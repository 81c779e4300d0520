"""
Panorama positional encoding
============================

Each canvas pixel gets sinusoids of its normalized x and y coordinate at
log-spaced frequencies. A tile's crop of this map tells the context encoder
where the tile sits on the canvas.
"""
import numpy as np
import torch

from genpano.conditioning import ContextEncoder, ContextEncoderConfig, encode_context
from genpano.posenc import TileBox, build_posenc, crop_posenc, frequencies

pm = build_posenc(256, 768)
print("channels:", pm.channels, "frequencies:", np.round(frequencies(1.0, 50.0, 3), 3))

# pixel centers straddle the canvas middle, so phases there are close to zero
print("x-channels next to the middle:", pm.values[0, 383, :6].round(3))

###############################################################################
# Two tiles at different positions give different 77-token contexts.
torch.manual_seed(0)
enc = ContextEncoder(ContextEncoderConfig(12, 32, (7, 11), 64))
left = encode_context(crop_posenc(pm, TileBox(0, 64, 128, 128)), enc)
right = encode_context(crop_posenc(pm, TileBox(640, 64, 128, 128)), enc)
print("context shape:", tuple(left.shape), " distance left/right:", float((left - right).norm()))
