//! Serde adapters that render byte fields as hex strings so registry and
//! trace files stay human-readable.

use serde::{Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer>(bytes: impl AsRef<[u8]>, ser: S) -> Result<S::Ok, S::Error> {
    ser.serialize_str(&hex::encode(bytes.as_ref()))
}

pub fn deserialize<'de, D, T>(de: D) -> Result<T, D::Error>
where
    D: Deserializer<'de>,
    T: TryFromHex,
{
    let s = String::deserialize(de)?;
    let raw = hex::decode(&s).map_err(serde::de::Error::custom)?;
    T::try_from_hex(raw).map_err(serde::de::Error::custom)
}

pub trait TryFromHex: Sized {
    fn try_from_hex(raw: Vec<u8>) -> Result<Self, String>;
}

impl TryFromHex for Vec<u8> {
    fn try_from_hex(raw: Vec<u8>) -> Result<Self, String> {
        Ok(raw)
    }
}

impl<const N: usize> TryFromHex for [u8; N] {
    fn try_from_hex(raw: Vec<u8>) -> Result<Self, String> {
        raw.try_into()
            .map_err(|v: Vec<u8>| format!("expected {N} octets, got {}", v.len()))
    }
}
