//! File formats used by the command line. Images are PGM (P2/P5 in, P5 out);
//! text inputs are token-id files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{Method, RelevanceMap};
use crate::model::{InputSpec, ModelConfig, ModelInput};
use crate::tensor::Tensor;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse(format!("pgm: bad {what} at byte {start}")))
    }
}

/// Decodes a P2 or P5 graymap into an `H×W` tensor scaled to `[0, 1]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let magic = bytes.get(..2).ok_or_else(|| Error::Parse("pgm: file too short".into()))?;
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        _ => return Err(Error::Parse("pgm: expected magic P2 or P5".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse(format!("pgm: empty image {width}×{height}")));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(Error::Parse(format!("pgm: maxval {maxval} outside 1..=65535")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Parse("pgm: image too large".into()))?;
    let raw: Vec<usize> = if binary {
        // exactly one whitespace byte separates the header from the data
        if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::Parse("pgm: missing separator before pixel data".into()));
        }
        let data = &bytes[h.pos + 1..];
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if data.len() < need {
            return Err(Error::Parse(format!("pgm: expected {need} data bytes, found {}", data.len())));
        }
        if wide {
            data[..need].chunks(2).map(|c| (c[0] as usize) << 8 | c[1] as usize).collect()
        } else {
            data[..n].iter().map(|&b| b as usize).collect()
        }
    } else {
        (0..n).map(|_| h.number("pixel")).collect::<Result<_>>()?
    };
    if let Some(v) = raw.iter().find(|&&v| v > maxval) {
        return Err(Error::Parse(format!("pgm: pixel value {v} exceeds maxval {maxval}")));
    }
    Tensor::new(vec![height, width], raw.iter().map(|&v| v as f64 / maxval as f64).collect())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|e| in_file(path, e))
}

/// Prefixes a parse error's message with the file it came from.
fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    }
}

/// Encodes a 2-D map as an 8-bit P5 graymap, min-max normalized. A constant
/// map encodes as all zeros.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: map.shape().to_vec(),
            reason: "pgm output needs a 2-D map".into(),
        });
    }
    if !map.is_finite() {
        return Err(Error::InvalidArgument("map holds non-finite values".into()));
    }
    let (lo, hi) = min_max(map);
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(map)?).map_err(|e| Error::io(path, e))
}

fn min_max(t: &Tensor) -> (f64, f64) {
    t.data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Whitespace-separated token ids. The synthetic vocabulary has no surface
/// words, so ids are the text format.
pub fn parse_tokens(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .enumerate()
        .map(|(i, w)| {
            w.parse()
                .map_err(|_| Error::Parse(format!("token {i}: {w:?} is not a token id")))
        })
        .collect()
}

/// Loads an input file in the form the model expects: a PGM for image
/// models, a token-id file for text models.
pub fn read_input(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ModelInput> {
    let path = path.as_ref();
    match config.input {
        InputSpec::Image { height, width, .. } => {
            let img = read_pgm(path)?;
            if img.shape() != [height, width] {
                return Err(Error::InputMismatch(format!(
                    "{}: image is {}×{}, model expects {height}×{width}",
                    path.display(),
                    img.shape()[0],
                    img.shape()[1]
                )));
            }
            Ok(ModelInput::Image(img))
        }
        InputSpec::Text { .. } => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let ids = parse_tokens(&text).map_err(|e| in_file(path, e))?;
            Ok(ModelInput::Tokens(ids))
        }
    }
}

/// JSON form of one explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapFile {
    pub method: Method,
    pub target_class: usize,
    pub predicted_class: usize,
    pub logits: Vec<f64>,
    /// One score per content token, before any normalization.
    pub token_scores: Vec<f64>,
    /// `[rows, cols]` of the patch grid for image models.
    pub grid: Option<[usize; 2]>,
    /// Range of the dense map that the PGM stretches to 0..255.
    pub raw_min: f64,
    pub raw_max: f64,
}

impl HeatmapFile {
    pub fn new(map: &RelevanceMap, logits: &Tensor) -> Self {
        let (raw_min, raw_max) = min_max(map.dense());
        HeatmapFile {
            method: map.method,
            target_class: map.target_class,
            predicted_class: logits.argmax(),
            logits: logits.data().to_vec(),
            token_scores: map.token_scores.data().to_vec(),
            grid: map.grid.map(|(r, c)| [r, c]),
            raw_min,
            raw_max,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_and_binary_decode_alike() {
        let p2 = b"P2\n# comment\n3 2\n4\n0 1 2\n3 4 0\n";
        let mut p5 = b"P5 3 2 4\n".to_vec();
        p5.extend([0u8, 1, 2, 3, 4, 0]);
        let a = parse_pgm(p2).unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        assert_eq!(a.data(), &[0.0, 0.25, 0.5, 0.75, 1.0, 0.0]);
        assert_eq!(parse_pgm(&p5).unwrap(), a);
    }

    #[test]
    fn sixteen_bit_samples_are_big_endian() {
        let mut p5 = b"P5\n2 1\n1000\n".to_vec();
        p5.extend([0x01, 0xf4, 0x03, 0xe8]);
        assert_eq!(parse_pgm(&p5).unwrap().data(), &[0.5, 1.0]);
    }

    #[test]
    fn malformed_files_are_parse_errors() {
        for bad in [
            &b""[..],
            b"P6\n1 1\n255\n\0",
            b"P2\n2 2\n255\n1 2 3",
            b"P2\n1 1\n3\n9\n",
            b"P5\n2 2\n255\n\x01",
            b"P2\n0 4\n255\n",
            b"P2\nx 4\n255\n",
            b"P5\n1 1\n70000\n\0\0",
        ] {
            assert!(matches!(parse_pgm(bad), Err(Error::Parse(_))), "{bad:?}");
        }
    }

    #[test]
    fn encoding_stretches_to_full_range() {
        let t = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 3.0]).unwrap();
        let bytes = encode_pgm(&t).unwrap();
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 64, 255]);
        let back = parse_pgm(&bytes).unwrap();
        assert_eq!(back.data(), &[0.0, 64.0 / 255.0, 1.0]);
        let flat = encode_pgm(&Tensor::ones(&[2, 2])).unwrap();
        assert_eq!(&flat[flat.len() - 4..], &[0, 0, 0, 0]);
        assert!(encode_pgm(&Tensor::ones(&[4])).is_err());
    }

    #[test]
    fn token_files() {
        assert_eq!(parse_tokens(" 3 4\n5\t6 ").unwrap(), vec![3, 4, 5, 6]);
        assert!(parse_tokens("3 four").is_err());
        assert!(parse_tokens("-1").is_err());
    }
}
