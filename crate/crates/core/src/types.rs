//! Shared primitive types.

use std::fmt;
use std::str::FromStr;

pub use primitive_types::U256;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// 32-byte storage word.
pub type Word = [u8; 32];

pub const ZERO_WORD: Word = [0u8; 32];

/// 20-byte account address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address(pub [u8; 20]);

impl Address {
    pub const fn new(bytes: [u8; 20]) -> Self {
        Self(bytes)
    }

    /// Address whose last 8 bytes hold `n` big-endian. Handy for test
    /// fixtures and generated workloads.
    pub fn from_u64(n: u64) -> Self {
        let mut b = [0u8; 20];
        b[12..].copy_from_slice(&n.to_be_bytes());
        Self(b)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid address `{0}`: expected 40 hex digits with optional 0x prefix")]
pub struct ParseAddressError(String);

impl FromStr for Address {
    type Err = ParseAddressError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw = s.strip_prefix("0x").unwrap_or(s);
        let bytes = hex::decode(raw).map_err(|_| ParseAddressError(s.to_string()))?;
        let arr: [u8; 20] = bytes
            .try_into()
            .map_err(|_| ParseAddressError(s.to_string()))?;
        Ok(Self(arr))
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn u256_to_word(v: U256) -> Word {
    let mut w = [0u8; 32];
    v.to_big_endian(&mut w);
    w
}

pub fn word_to_u256(w: &Word) -> U256 {
    U256::from_big_endian(w)
}

pub fn u64_to_word(v: u64) -> Word {
    let mut w = [0u8; 32];
    w[24..].copy_from_slice(&v.to_be_bytes());
    w
}

/// Low 8 bytes of a word as a big-endian integer.
pub fn word_low_u64(w: &Word) -> u64 {
    u64::from_be_bytes(w[24..].try_into().expect("8 bytes"))
}

/// Parse a decimal or `0x`-prefixed hex amount.
pub fn parse_u256(s: &str) -> Option<U256> {
    let s = s.trim();
    if let Some(h) = s.strip_prefix("0x") {
        if h.is_empty() || h.len() > 64 {
            return None;
        }
        U256::from_str_radix(h, 16).ok()
    } else {
        U256::from_dec_str(s).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn address_parse_roundtrip() {
        let a = Address::from_u64(0xdead_beef);
        let s = a.to_string();
        assert_eq!(s.parse::<Address>().unwrap(), a);
        assert!("0x1234".parse::<Address>().is_err());
    }

    #[test]
    fn word_helpers() {
        assert_eq!(word_low_u64(&u64_to_word(42)), 42);
        let v = U256::from(1u64) << 200;
        assert_eq!(word_to_u256(&u256_to_word(v)), v);
        assert_eq!(parse_u256("0x10"), Some(U256::from(16u64)));
        assert_eq!(parse_u256("1000"), Some(U256::from(1000u64)));
        assert_eq!(parse_u256("abc"), None);
    }
}
