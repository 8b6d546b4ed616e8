//! Stable seed derivation.
//!
//! Every sub-seed in the workspace is `derive_seed(master, component, index)`.
//! The mix is FNV-1a over the component name followed by SplitMix64 rounds, so
//! the mapping is fixed across platforms and compiler versions.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Derives an independent seed for `component` instance `index` from `master`.
pub fn derive_seed(master: u64, component: &str, index: u64) -> u64 {
    let h = splitmix64(master ^ fnv1a(component.as_bytes()));
    splitmix64(h ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}
