//! ChaCha20 keystream (original 64-bit-counter/64-bit-nonce variant).
//!
//! The secure channel encrypts by XORing this keystream; authentication is
//! a separate HMAC (encrypt-then-MAC, see [`super::channel`]). The test
//! suite checks the keystream word for word against `rand_chacha`'s
//! ChaCha20 generator, which implements the same function independently.

const SIGMA: [u32; 4] = [0x6170_7865, 0x3320_646e, 0x7962_2d32, 0x6b20_6574];
const ROUNDS: usize = 20;
pub const BLOCK_LEN: usize = 64;

#[inline]
fn quarter_round(state: &mut [u32; 16], a: usize, b: usize, c: usize, d: usize) {
    state[a] = state[a].wrapping_add(state[b]);
    state[d] = (state[d] ^ state[a]).rotate_left(16);
    state[c] = state[c].wrapping_add(state[d]);
    state[b] = (state[b] ^ state[c]).rotate_left(12);
    state[a] = state[a].wrapping_add(state[b]);
    state[d] = (state[d] ^ state[a]).rotate_left(8);
    state[c] = state[c].wrapping_add(state[d]);
    state[b] = (state[b] ^ state[c]).rotate_left(7);
}

/// One 64-octet keystream block for (key, block counter, nonce).
pub fn block(key: &[u8; 32], counter: u64, nonce: u64) -> [u8; BLOCK_LEN] {
    let mut state = [0u32; 16];
    state[..4].copy_from_slice(&SIGMA);
    for i in 0..8 {
        state[4 + i] = u32::from_le_bytes(key[4 * i..4 * i + 4].try_into().unwrap());
    }
    state[12] = counter as u32;
    state[13] = (counter >> 32) as u32;
    state[14] = nonce as u32;
    state[15] = (nonce >> 32) as u32;

    let mut working = state;
    for _ in 0..ROUNDS / 2 {
        quarter_round(&mut working, 0, 4, 8, 12);
        quarter_round(&mut working, 1, 5, 9, 13);
        quarter_round(&mut working, 2, 6, 10, 14);
        quarter_round(&mut working, 3, 7, 11, 15);
        quarter_round(&mut working, 0, 5, 10, 15);
        quarter_round(&mut working, 1, 6, 11, 12);
        quarter_round(&mut working, 2, 7, 8, 13);
        quarter_round(&mut working, 3, 4, 9, 14);
    }

    let mut out = [0u8; BLOCK_LEN];
    for i in 0..16 {
        let word = working[i].wrapping_add(state[i]);
        out[4 * i..4 * i + 4].copy_from_slice(&word.to_le_bytes());
    }
    out
}

/// XORs the keystream for (key, nonce) into `data`, starting at block 0.
pub fn xor_keystream(key: &[u8; 32], nonce: u64, data: &mut [u8]) {
    for (block_index, chunk) in data.chunks_mut(BLOCK_LEN).enumerate() {
        let ks = block(key, block_index as u64, nonce);
        for (byte, k) in chunk.iter_mut().zip(ks.iter()) {
            *byte ^= k;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha20Rng;
    use rand_core::{RngCore, SeedableRng};

    /// rand_chacha implements the same djb-variant block function with the
    /// 64-bit stream id in the nonce words; it serves as an independent
    /// keystream oracle.
    fn oracle_keystream(key: &[u8; 32], nonce: u64, len: usize) -> Vec<u8> {
        let mut rng = ChaCha20Rng::from_seed(*key);
        rng.set_stream(nonce);
        let mut out = vec![0u8; len];
        rng.fill_bytes(&mut out);
        out
    }

    #[test]
    fn keystream_matches_rand_chacha() {
        let mut probe = crate::rng::SimRng::from_seed(99);
        for case in 0..16 {
            let key: [u8; 32] = probe.bytes();
            let nonce = probe.next_u64();
            let len = 1 + (case * 37) % 300;
            let expected = oracle_keystream(&key, nonce, len);
            let mut ours = vec![0u8; len];
            xor_keystream(&key, nonce, &mut ours);
            assert_eq!(ours, expected, "case {case}");
        }
    }

    #[test]
    fn xor_is_involutive() {
        let key = [7u8; 32];
        let mut data = b"attack at dawn".to_vec();
        let original = data.clone();
        xor_keystream(&key, 42, &mut data);
        assert_ne!(data, original);
        xor_keystream(&key, 42, &mut data);
        assert_eq!(data, original);
    }

    #[test]
    fn nonces_give_distinct_streams() {
        let key = [1u8; 32];
        assert_ne!(block(&key, 0, 0), block(&key, 0, 1));
        assert_ne!(block(&key, 0, 0), block(&key, 1, 0));
    }
}
