use sha2::{Digest, Sha256};

/// Child seed for a named role, the first eight bytes of
/// `sha256(seed_le || role)`. Stable across platforms and releases.
pub fn role_seed(seed: u64, role: &str) -> u64 {
    let h = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(role.as_bytes())
        .finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&h[..8]);
    u64::from_le_bytes(head)
}
