//! Seed derivation. Every RNG in the crate is seeded from values produced
//! here; there is no global RNG state.
//!
//! `cell_seed(master, cell, item) = mix(mix(master, cell), fnv1a(item))`
//! where `mix(a, b) = splitmix64(a ^ splitmix64(b))`.

/// One round of the SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

/// 64-bit FNV-1a.
pub fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Per-(cell, item) seed for the matrix runner.
pub fn cell_seed(master: u64, cell_index: u64, item_id: &str) -> u64 {
    mix(mix(master, cell_index), fnv1a(item_id))
}
