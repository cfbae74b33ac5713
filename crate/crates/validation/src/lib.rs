//! Holds the end-to-end acceptance target under `tests/`.
