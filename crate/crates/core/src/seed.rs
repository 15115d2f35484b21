/// Derives an independent stream seed from a run seed and a tag, so that
/// stages seeded from one `--seed` do not share random sequences.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut z = seed ^ ((crc32fast::hash(tag.as_bytes()) as u64) << 32 | tag.len() as u64);
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_tags_distinct_seeds() {
        assert_eq!(derive_seed(1, "flip"), derive_seed(1, "flip"));
        assert_ne!(derive_seed(1, "flip"), derive_seed(1, "rotate"));
        assert_ne!(derive_seed(1, "flip"), derive_seed(2, "flip"));
    }
}
