//! Placeholder library target; the interesting code is in `benches/`.
