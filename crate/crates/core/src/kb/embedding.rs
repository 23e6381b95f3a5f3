//! Seeded feature hashing of an entity's (attribute, value) pairs.
//!
//! Each pair is hashed together with the entity id and the global seed; the
//! hash seeds a splitmix64 stream that picks `dim / 4` signed coordinates.
//! Contributions are ±1, so accumulation is exact and independent of pair
//! order. The sum is L2-normalized.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const FIELD_SEP: u8 = 0x1f;

pub(crate) fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            h ^= u64::from(FIELD_SEP);
            h = h.wrapping_mul(FNV_PRIME);
        }
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Embedding of `entity_id` given its current facts.
pub fn hashed_embedding<'a>(
    entity_id: &str,
    facts: impl IntoIterator<Item = (&'a str, &'a str)>,
    dim: usize,
    seed: u64,
) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dim == 0 {
        return v;
    }
    let taps = (dim / 4).max(1);
    let seed_bytes = seed.to_le_bytes();
    for (attribute, value) in facts {
        let mut state = fnv1a(&[&seed_bytes, entity_id.as_bytes(), attribute.as_bytes(), value.as_bytes()]);
        for _ in 0..taps {
            let r = splitmix64(&mut state);
            let index = ((r >> 32) % dim as u64) as usize;
            v[index] += if r & 1 == 0 { 1.0 } else { -1.0 };
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}
