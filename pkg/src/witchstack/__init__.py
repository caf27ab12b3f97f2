"""witchstack: a desk-scale watch/phone companion protocol stack.

The package emulates the paired-device communication stack of a smartwatch
and its phone on loopback TCP: link framing and channel negotiation, an
IKEv2-style handshake with AEAD tunnels per data protection class, a
topic-routed messaging bus, per-message layered encryption for the most
sensitive payloads, anchor-ordered health-data replication, and an
internet-sharing proxy with a user-controlled firewall.

Alongside the protocol engines it ships a watch emulator, a phone endpoint,
a scenario harness with attack reproductions and their mitigations, an
offline transcript dissector, and a local control API for the CLI and the
browser UI.
"""

__version__ = "0.1.0"
