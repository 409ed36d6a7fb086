//! Byte-level primitives shared by stubs, ingest and the wire format.

pub mod b64;
pub mod hash;
pub mod png;

pub use self::hash::{fnv1a64, SplitMix64};
pub use self::png::{decode_png, encode_png, png_dimensions, PngError, RgbImage};
