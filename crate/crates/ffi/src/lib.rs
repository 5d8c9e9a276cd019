//! C ABI for loading exported models and running integer-only enhancement.

#![allow(clippy::missing_safety_doc)]
