//! LSB-matching embedding: flip the least significant bit of seeded pixel
//! positions toward a random message by adding or subtracting 1.

use crate::error::{Error, Result};
use crate::image::Image8;
use crate::rng;
use rand::seq::index;
use rand::Rng;
use std::fs;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedSpec {
    /// Message bits per pixel, in (0, 1].
    pub payload_bpp: f64,
    pub seed: u64,
}

impl EmbedSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.payload_bpp > 0.0 && self.payload_bpp <= 1.0) {
            return Err(Error::Config(format!(
                "payload {} bpp outside (0, 1]",
                self.payload_bpp
            )));
        }
        Ok(())
    }
}

/// Number of message bits carried at this payload: round(bpp * w * h).
pub fn n_secret(payload_bpp: f64, width: usize, height: usize) -> usize {
    (payload_bpp * (width * height) as f64).round() as usize
}

/// One visited pixel position in embedding order. delta 0 records a pixel
/// whose least significant bit already matched its message bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChangeRecord {
    pub x: usize,
    pub y: usize,
    pub delta: i8,
}

/// Embeds a seeded random message. Positions are drawn without replacement;
/// a mismatched bit is fixed by +1 or -1 with equal probability, except at
/// the value-range ends where only one direction stays in range (0 takes +1,
/// 255 takes -1). The record list has exactly n_secret entries.
pub fn embed_lsb_matching(cover: &Image8, spec: &EmbedSpec) -> Result<(Image8, Vec<ChangeRecord>)> {
    spec.validate()?;
    let (w, h) = (cover.width(), cover.height());
    let n = n_secret(spec.payload_bpp, w, h);
    let mut r = rng::stream(spec.seed);
    let mut stego = cover.clone();
    let mut records = Vec::with_capacity(n);
    for pos in index::sample(&mut r, w * h, n) {
        let bit = u8::from(r.gen::<bool>());
        let v = stego.pixels()[pos];
        let delta: i8 = if v & 1 == bit {
            0
        } else if v == 0 {
            1
        } else if v == 255 {
            -1
        } else if r.gen::<bool>() {
            1
        } else {
            -1
        };
        stego.pixels_mut()[pos] = v.wrapping_add_signed(delta);
        records.push(ChangeRecord {
            x: pos % w,
            y: pos / w,
            delta,
        });
    }
    Ok((stego, records))
}

/// Writes the audit log: one `x y delta` line per visited position, in
/// embedding order.
pub fn write_audit(records: &[ChangeRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for rec in records {
        text.push_str(&format!("{} {} {}\n", rec.x, rec.y, rec.delta));
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_audit(path: &Path) -> Result<Vec<ChangeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_ascii_whitespace();
        let parse = |tok: Option<&str>, what: &str| -> Result<i64> {
            tok.ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: missing {what}",
                    path.display(),
                    lineno + 1
                ))
            })?
            .parse()
            .map_err(|_| {
                Error::Data(format!(
                    "{}:{}: bad {what} '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        let x = parse(it.next(), "x")?;
        let y = parse(it.next(), "y")?;
        let delta = parse(it.next(), "delta")?;
        if x < 0 || y < 0 || !(-1..=1).contains(&delta) || it.next().is_some() {
            return Err(Error::Data(format!(
                "{}:{}: malformed record '{line}'",
                path.display(),
                lineno + 1
            )));
        }
        records.push(ChangeRecord {
            x: x as usize,
            y: y as usize,
            delta: delta as i8,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize_cover, Texture};
    use tempfile::tempdir;

    fn cover(seed: u64) -> Image8 {
        synthesize_cover(64, 64, seed, Texture::Mixed).unwrap()
    }

    #[test]
    fn payload_bit_counts_match_rounding() {
        assert_eq!(n_secret(1.0, 64, 64), 4096);
        assert_eq!(n_secret(0.4, 64, 64), 1638);
        assert_eq!(n_secret(0.2, 16, 16), 51);
    }

    #[test]
    fn spec_rejects_out_of_range_payload() {
        for bad in [0.0, -0.5, 1.1] {
            let spec = EmbedSpec {
                payload_bpp: bad,
                seed: 0,
            };
            assert!(spec.validate().is_err(), "{bad}");
        }
    }

    #[test]
    fn embedding_is_deterministic_and_bounded() {
        let c = cover(1);
        let spec = EmbedSpec {
            payload_bpp: 0.4,
            seed: 11,
        };
        let (s1, r1) = embed_lsb_matching(&c, &spec).unwrap();
        let (s2, r2) = embed_lsb_matching(&c, &spec).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(r1, r2);
        assert_eq!(r1.len(), 1638);
        for (a, b) in c.pixels().iter().zip(s1.pixels()) {
            assert!((i16::from(*a) - i16::from(*b)).abs() <= 1);
        }
    }

    #[test]
    fn records_cover_distinct_positions_and_match_the_diff() {
        let c = cover(2);
        let spec = EmbedSpec {
            payload_bpp: 1.0,
            seed: 3,
        };
        let (s, records) = embed_lsb_matching(&c, &spec).unwrap();
        let mut seen = vec![false; 64 * 64];
        for rec in &records {
            let pos = rec.y * 64 + rec.x;
            assert!(!seen[pos], "position revisited");
            seen[pos] = true;
            let diff = i16::from(s.pixels()[pos]) - i16::from(c.pixels()[pos]);
            assert_eq!(diff, i16::from(rec.delta));
        }
        assert!(seen.iter().all(|&v| v));
    }

    #[test]
    fn mismatched_bits_change_about_half_the_pixels_at_full_payload() {
        let c = cover(4);
        let spec = EmbedSpec {
            payload_bpp: 1.0,
            seed: 5,
        };
        let (_, records) = embed_lsb_matching(&c, &spec).unwrap();
        let changed = records.iter().filter(|r| r.delta != 0).count();
        let fraction = changed as f64 / records.len() as f64;
        assert!((0.47..=0.53).contains(&fraction), "{fraction}");
    }

    #[test]
    fn range_ends_are_forced_inward() {
        let mut pixels = vec![0u8; 16 * 16];
        pixels[200..].fill(255);
        let c = Image8::new(16, 16, pixels).unwrap();
        let spec = EmbedSpec {
            payload_bpp: 1.0,
            seed: 9,
        };
        let (_stego, records) = embed_lsb_matching(&c, &spec).unwrap();
        for rec in &records {
            match c.pixels()[rec.y * 16 + rec.x] {
                0 => assert!(rec.delta == 0 || rec.delta == 1),
                255 => assert!(rec.delta == 0 || rec.delta == -1),
                _ => {}
            }
        }
        let changed = records.iter().filter(|r| r.delta != 0).count();
        assert!(changed > 0);
    }

    #[test]
    fn audit_roundtrip_preserves_records() {
        let c = cover(6);
        let spec = EmbedSpec {
            payload_bpp: 0.2,
            seed: 7,
        };
        let (_, records) = embed_lsb_matching(&c, &spec).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("audit.txt");
        write_audit(&records, &path).unwrap();
        assert_eq!(read_audit(&path).unwrap(), records);

        let bpp = records.len() as f64 / (64.0 * 64.0);
        assert_eq!(n_secret(bpp, 64, 64), records.len());
    }

    #[test]
    fn malformed_audit_lines_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("audit.txt");
        fs::write(&path, "1 2 5\n").unwrap();
        assert!(read_audit(&path).is_err());
        fs::write(&path, "1 2\n").unwrap();
        assert!(read_audit(&path).is_err());
        fs::write(&path, "a b c\n").unwrap();
        assert!(read_audit(&path).is_err());
    }
}
