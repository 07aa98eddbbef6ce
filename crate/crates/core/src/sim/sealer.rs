use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use rand::Rng;
use sha2::{Digest, Sha256};

use super::SimError;
use crate::money::MicroCpm;
use crate::nurl::{classify_price, PriceValue};

const IV_LEN: usize = 16;
const PRICE_LEN: usize = 8;
const SIG_LEN: usize = 4;
const TOKEN_BYTES: usize = IV_LEN + PRICE_LEN + SIG_LEN;
pub const TOKEN_CHARS: usize = 38;

/// Keyed, invertible price encoding laid out like the 28-byte ciphertexts
/// exchanges use: initialization vector, masked price, signature.
#[derive(Debug, Clone)]
pub struct Sealer {
    key: [u8; 32],
}

impl Sealer {
    pub fn new(key: [u8; 32]) -> Self {
        Sealer { key }
    }

    pub fn from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"sealer");
        h.update(seed.to_be_bytes());
        Sealer { key: h.finalize().into() }
    }

    fn pad(&self, iv: &[u8]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(iv);
        h.finalize().into()
    }

    fn signature(&self, iv: &[u8], price: &[u8]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(iv);
        h.update(price);
        h.update(b"sig");
        h.finalize().into()
    }

    pub fn seal_with_iv(&self, cpm: MicroCpm, iv: [u8; IV_LEN]) -> String {
        let price = cpm.micros().to_be_bytes();
        let pad = self.pad(&iv);
        let mut out = [0u8; TOKEN_BYTES];
        out[..IV_LEN].copy_from_slice(&iv);
        for i in 0..PRICE_LEN {
            out[IV_LEN + i] = price[i] ^ pad[i];
        }
        out[IV_LEN + PRICE_LEN..].copy_from_slice(&self.signature(&iv, &price)[..SIG_LEN]);
        URL_SAFE_NO_PAD.encode(out)
    }

    /// Seals with a fresh IV, redrawing in the vanishingly rare case the
    /// token would read as a decimal price.
    pub fn seal<R: Rng>(&self, cpm: MicroCpm, rng: &mut R) -> String {
        loop {
            let token = self.seal_with_iv(cpm, rng.random());
            if matches!(classify_price(&token), Ok(PriceValue::Encrypted { .. })) {
                return token;
            }
        }
    }

    pub fn unseal(&self, token: &str) -> Result<MicroCpm, SimError> {
        let bad = || SimError::BadToken(token.to_string());
        let bytes = URL_SAFE_NO_PAD.decode(token).map_err(|_| bad())?;
        if bytes.len() != TOKEN_BYTES {
            return Err(bad());
        }
        let iv = &bytes[..IV_LEN];
        let pad = self.pad(iv);
        let mut price = [0u8; PRICE_LEN];
        for i in 0..PRICE_LEN {
            price[i] = bytes[IV_LEN + i] ^ pad[i];
        }
        if bytes[IV_LEN + PRICE_LEN..] != self.signature(iv, &price)[..SIG_LEN] {
            return Err(bad());
        }
        Ok(MicroCpm::from_micros(i64::from_be_bytes(price)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn round_trip() {
        let s = Sealer::from_seed(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = s.seal(MicroCpm::from_micros(950_000), &mut rng);
        assert_eq!(t.len(), TOKEN_CHARS);
        assert_eq!(s.unseal(&t).unwrap(), MicroCpm::from_micros(950_000));
    }

    #[test]
    fn distinct_prices_distinct_tokens() {
        let s = Sealer::from_seed(2);
        let iv = [7u8; IV_LEN];
        assert_ne!(s.seal_with_iv(MicroCpm::from_micros(1), iv), s.seal_with_iv(MicroCpm::from_micros(2), iv));
    }

    #[test]
    fn wrong_key_or_tampering_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Sealer::from_seed(3).seal(MicroCpm::from_micros(5), &mut rng);
        assert!(matches!(Sealer::from_seed(4).unseal(&t), Err(SimError::BadToken(_))));
        let mut chars: Vec<char> = t.chars().collect();
        chars[20] = if chars[20] == 'A' { 'B' } else { 'A' };
        let tampered: String = chars.into_iter().collect();
        assert!(Sealer::from_seed(3).unseal(&tampered).is_err());
        assert!(Sealer::from_seed(3).unseal("B6A3F3C19F50C7FD").is_err());
    }

    #[test]
    fn ten_thousand_tokens_unique_and_encrypted() {
        let s = Sealer::from_seed(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen = HashSet::new();
        for i in 0..10_000i64 {
            let cpm = MicroCpm::from_micros(1 + i * 37 % 5_000_000);
            let t = s.seal(cpm, &mut rng);
            assert_eq!(t.len(), TOKEN_CHARS);
            assert!(classify_price(&t).unwrap().is_encrypted(), "{t}");
            assert_eq!(s.unseal(&t).unwrap(), cpm);
            assert!(seen.insert(t));
        }
    }
}
