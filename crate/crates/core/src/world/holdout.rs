use sha2::{Digest, Sha256};

use super::{Placement, PromptSpec};

/// One in this many prompt/placement combinations is reserved for testing.
pub const HOLDOUT_BUCKETS: u64 = 5;

/// Stable key of a prompt and a placement quantized to half cells.
pub fn combination_key(prompt: &PromptSpec, placement: Placement) -> u64 {
    let q = |v: f64| (2.0 * v).round() as i64;
    let text = format!(
        "{}|{}|{}|{}",
        serde_json::to_string(prompt).expect("prompt serializes"),
        q(placement.cx),
        q(placement.cy),
        q(placement.half)
    );
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn is_held_out(prompt: &PromptSpec, placement: Placement) -> bool {
    combination_key(prompt, placement) % HOLDOUT_BUCKETS == 0
}
