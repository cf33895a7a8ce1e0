"""A modular LoRaWAN network server: connector, central server, join server
and network controller wired together over a topic bus."""

__version__ = "0.1.0"
