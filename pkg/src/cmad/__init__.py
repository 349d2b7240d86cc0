"""Chord/MIDI/drum-conditioned music-token generation via a gated attention adaptor."""

__version__ = "0.1.0"
