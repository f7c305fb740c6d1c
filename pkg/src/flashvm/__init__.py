"""Volatile/non-volatile memory mapping toolchain and intermittent-execution emulator."""
