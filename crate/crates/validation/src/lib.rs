//! Acceptance suite; see `tests/acceptance.rs`. Run with
//! `cargo test -p lifshitz-validation --test acceptance`.
