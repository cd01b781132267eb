//! Named seed streams, so one experiment seed fans out to independent
//! sub-seeds (split, removal, init, MI split) without unseeded randomness.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable across platforms and releases: FNV-1a of the stream name mixed
/// into `base` by splitmix64.
pub fn derive_seed(base: u64, stream: &str) -> u64 {
    let h = stream
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME));
    splitmix64(base ^ splitmix64(h))
}

pub const SPLIT: &str = "split";
pub const REMOVAL: &str = "removal";
pub const INIT: &str = "init";
pub const MI_SPLIT: &str = "mi-split";
pub const NEGATIVES: &str = "negatives";
pub const SYNTHETIC: &str = "synthetic";
