"""CPU reference implementation of a compressed KV cache: two-pass attention
with cumulative scores, heavy-hitter selection, 2-bit group quantization and
byte accounting."""

__version__ = "0.1.0"
