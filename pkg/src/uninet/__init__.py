"""uninet: multi-granular network traffic tokenization with a small attention encoder.

Modules, bottom-up: :mod:`capture` (pcap and record ingest), :mod:`assembler`
(flows, sessions, windows), :mod:`features`, :mod:`codec` (binning, token
sequences, five-key examples), :mod:`model` (encoder with manual backprop),
:mod:`heads`, :mod:`training`, :mod:`metrics`, :mod:`synth`, :mod:`pipelines`
and :mod:`cli`.
"""

__version__ = "0.1.0"
