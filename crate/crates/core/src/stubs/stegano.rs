//! Text carried in the leading pixel bytes of an RGB8 raster:
//! `"MGCT" | len u32-BE | UTF-8 bytes`, one byte per channel, row-major
//! from pixel (0,0).

use super::StubError;

pub const MAGIC: &[u8; 4] = b"MGCT";
const HEADER: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SteganoPayload {
    pub text: String,
}

/// Overwrites the start of `rgb` with the payload.
pub fn stegano_encode(rgb: &mut [u8], text: &str) -> Result<(), StubError> {
    let bytes = text.as_bytes();
    let needed = HEADER + bytes.len();
    if needed > rgb.len() {
        return Err(StubError::PayloadTooLarge { needed, capacity: rgb.len() });
    }
    rgb[..4].copy_from_slice(MAGIC);
    rgb[4..8].copy_from_slice(&(bytes.len() as u32).to_be_bytes());
    rgb[8..needed].copy_from_slice(bytes);
    Ok(())
}

/// `None` when the magic is absent or the payload is cut short / not UTF-8.
pub fn stegano_decode(rgb: &[u8]) -> Option<SteganoPayload> {
    if rgb.len() < HEADER || &rgb[..4] != MAGIC {
        return None;
    }
    let len = u32::from_be_bytes([rgb[4], rgb[5], rgb[6], rgb[7]]) as usize;
    let body = rgb.get(HEADER..HEADER.checked_add(len)?)?;
    let text = std::str::from_utf8(body).ok()?.to_string();
    Some(SteganoPayload { text })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn capacity_is_enforced() {
        let mut buf = vec![0u8; 16 * 16 * 3];
        let fits = "x".repeat(768 - 8);
        assert!(stegano_encode(&mut buf, &fits).is_ok());
        let too_big = "x".repeat(768 - 7);
        assert!(matches!(stegano_encode(&mut buf, &too_big), Err(StubError::PayloadTooLarge { .. })));
    }

    #[test]
    fn truncated_length_is_rejected() {
        let mut buf = vec![0u8; 20];
        stegano_encode(&mut buf, "hello").unwrap();
        buf[7] = 200;
        assert_eq!(stegano_decode(&buf), None);
    }

    proptest! {
        #[test]
        fn round_trip(text in "\\PC{0,200}", extra in 0usize..64) {
            let mut buf = vec![0xAAu8; 8 + text.len() + extra];
            stegano_encode(&mut buf, &text).unwrap();
            prop_assert_eq!(stegano_decode(&buf).unwrap().text, text);
        }
    }
}
