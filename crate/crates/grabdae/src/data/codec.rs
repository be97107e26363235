//! Binary PPM (P6) and PGM (P5) codecs, maxval 255.
//!
//! Channels map to [0,1] by /255 on decode; encode rounds back, so the byte
//! round trip is the identity on any 8-bit image. Masks use P5 with
//! 255 = foreground, 0 = background.

use crate::error::{Error, Result};
use crate::grabmask::Mask;
use crate::image::Image;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.pos, msg: msg.into() })
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek();
        if b.is_some() {
            self.pos += 1;
        }
        b
    }

    /// Whitespace and `#`-to-end-of-line comments between header tokens.
    fn skip_separators(&mut self) {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => {
                    self.pos += 1;
                }
                Some(b'#') => {
                    while let Some(b) = self.bump() {
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn read_uint(&mut self) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        let mut v: usize = 0;
        while let Some(b) = self.peek() {
            if !b.is_ascii_digit() {
                break;
            }
            v = v
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or(Error::Format { offset: self.pos, msg: "integer overflow".into() })?;
            self.pos += 1;
        }
        if self.pos == start {
            return self.err("expected an unsigned integer");
        }
        Ok(v)
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        // exactly one whitespace byte separates the header from the payload
        match self.bump() {
            Some(b) if b.is_ascii_whitespace() => {}
            _ => return self.err("expected single whitespace before payload"),
        }
        if self.bytes.len() < self.pos + len {
            return Err(Error::Format {
                offset: self.bytes.len(),
                msg: format!(
                    "truncated payload: need {len} bytes, have {}",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str, channels: usize) -> Result<(usize, usize, &'a [u8])> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[0..2] != magic.as_bytes() {
        return cur.err(format!("bad magic, expected {magic}"));
    }
    cur.pos = 2;
    let width = cur.read_uint()?;
    let height = cur.read_uint()?;
    if width == 0 || height == 0 {
        return cur.err("extents must be positive");
    }
    let maxval = cur.read_uint()?;
    if maxval != 255 {
        return cur.err(format!("only maxval 255 is supported, got {maxval}"));
    }
    let data = cur.payload(width * height * channels)?;
    Ok((width, height, data))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (width, height, data) = parse_header(bytes, "P6", 3)?;
    let pixels = data.iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(width, height, pixels)
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_pgm_mask(bytes: &[u8]) -> Result<Mask> {
    let (width, height, data) = parse_header(bytes, "P5", 1)?;
    let mut fg = Vec::with_capacity(data.len());
    for (i, &b) in data.iter().enumerate() {
        match b {
            255 => fg.push(true),
            0 => fg.push(false),
            other => {
                return Err(Error::Format {
                    offset: bytes.len() - data.len() + i,
                    msg: format!("mask bytes must be 0 or 255, got {other}"),
                })
            }
        }
    }
    Ok(Mask { width, height, fg })
}

pub fn encode_pgm_mask(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.fg.iter().map(|&b| if b { 255u8 } else { 0u8 }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_by_one_white() {
        let bytes = b"P6\n1 1\n255\n\xff\xff\xff";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!((img.width, img.height), (1, 1));
        assert_eq!(img.pixels, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn known_two_by_two_fixture() {
        // hand-written bytes: red, green / blue, mid-gray
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[
            255, 0, 0, 0, 255, 0, //
            0, 0, 255, 128, 128, 128,
        ]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.rgb(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.rgb(1, 0), [0.0, 1.0, 0.0]);
        assert_eq!(img.rgb(0, 1), [0.0, 0.0, 1.0]);
        let g = 128.0 / 255.0;
        assert_eq!(img.rgb(1, 1), [g, g, g]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P6 # a comment\n# another\n2 1 # inline\n255\n\x01\x02\x03\x04\x05\x06";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        match decode_ppm(b"P5\n1 1\n255\n\x00") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = b"P6\n2 2\n255\n\x00\x00\x00";
        match decode_ppm(bytes) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, bytes.len());
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn mask_round_trip() {
        let mask = Mask { width: 3, height: 2, fg: vec![true, false, true, false, false, true] };
        let bytes = encode_pgm_mask(&mask);
        assert_eq!(decode_pgm_mask(&bytes).unwrap(), mask);
    }

    #[test]
    fn mask_rejects_intermediate_values() {
        let bytes = b"P5\n1 1\n255\n\x80";
        assert!(matches!(decode_pgm_mask(bytes), Err(Error::Format { .. })));
    }

    proptest! {
        /// decode ∘ encode is the identity on 8-bit images.
        #[test]
        fn ppm_byte_round_trip(
            w in 1usize..8,
            h in 1usize..8,
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let mut raw = format!("P6\n{w} {h}\n255\n").into_bytes();
            for _ in 0..w * h * 3 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                raw.push((state >> 56) as u8);
            }
            let img = decode_ppm(&raw).unwrap();
            let encoded = encode_ppm(&img);
            prop_assert_eq!(encoded, raw);
        }
    }
}
