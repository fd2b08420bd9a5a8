//! Deterministic offline embedder: signed feature hashing of whitespace
//! tokens, L2-normalized.

use std::hash::Hasher;

use fnv::FnvHasher;

use super::EmbedError;

/// Minimum dimension accepted by [`local_test_embed`].
pub const MIN_DIM: usize = 8;

const BUCKET_KEY: u64 = 0xcbf2_9ce4_8422_2325;
const SIGN_KEY: u64 = 0x84222325_cbf29ce4;

fn fnv(key: u64, bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::with_key(key);
    h.write(bytes);
    h.finish()
}

/// Each token adds +1 or -1 (sign from a second hash) to bucket
/// `fnv1a(token) mod dim`; the sum is scaled to unit length.
pub fn local_test_embed(text: &str, dim: usize) -> Result<Vec<f64>, EmbedError> {
    if dim < MIN_DIM {
        return Err(EmbedError::Config(format!(
            "local-test embedder needs dim >= {MIN_DIM}, got {dim}"
        )));
    }
    let mut v = vec![0.0f64; dim];
    for token in text.split_whitespace() {
        let bucket = (fnv(BUCKET_KEY, token.as_bytes()) % dim as u64) as usize;
        let sign = if fnv(SIGN_KEY, token.as_bytes()) >> 63 == 0 {
            1.0
        } else {
            -1.0
        };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(EmbedError::Degenerate(text.to_string()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}
