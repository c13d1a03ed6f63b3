use serde::{Deserialize, Serialize};

use super::FusionError;
use crate::dataset::SidecarToken;

/// Symbols 0x20..=0x7F map to 0..96; everything else to [`UNKNOWN_SYMBOL`].
pub const PRINTABLE_SYMBOLS: usize = 96;
pub const UNKNOWN_SYMBOL: usize = PRINTABLE_SYMBOLS;
pub const VOCAB_SIZE: usize = PRINTABLE_SYMBOLS + 1;

pub const POSITION_DIM: usize = 8;
pub const ASPECT_MIN: f64 = 0.05;
pub const ASPECT_MAX: f64 = 20.0;

/// One OCR detection: its text, pixel box and the size of the source image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrToken {
    pub text: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl OcrToken {
    pub fn from_sidecar(t: &SidecarToken, image_width: u32, image_height: u32) -> Self {
        OcrToken {
            text: t.text.clone(),
            x: t.x as f64,
            y: t.y as f64,
            w: t.w as f64,
            h: t.h as f64,
            image_width: image_width as f64,
            image_height: image_height as f64,
        }
    }

    fn check(&self) -> Result<(), String> {
        let vals = [self.x, self.y, self.w, self.h, self.image_width, self.image_height];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err("non-finite geometry".into());
        }
        if self.image_width <= 0.0 || self.image_height <= 0.0 {
            return Err("image size must be positive".into());
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(format!("box size {}x{} must be positive", self.w, self.h));
        }
        if self.x < 0.0 || self.x + self.w > self.image_width {
            return Err(format!(
                "box x-range [{}, {}] outside image width {}",
                self.x,
                self.x + self.w,
                self.image_width
            ));
        }
        if self.y < 0.0 || self.y + self.h > self.image_height {
            return Err(format!(
                "box y-range [{}, {}] outside image height {}",
                self.y,
                self.y + self.h,
                self.image_height
            ));
        }
        Ok(())
    }
}

/// Normalized box geometry:
/// `(x/W, y/H, w/W, h/H, cx/W, cy/H, clamp(w/h), w*h/(W*H))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionalFeature(pub [f64; POSITION_DIM]);

pub fn encode_positions(tokens: &[OcrToken]) -> Result<Vec<PositionalFeature>, FusionError> {
    tokens
        .iter()
        .enumerate()
        .map(|(index, t)| {
            t.check()
                .map_err(|reason| FusionError::InvalidToken { index, reason })?;
            let (iw, ih) = (t.image_width, t.image_height);
            Ok(PositionalFeature([
                t.x / iw,
                t.y / ih,
                t.w / iw,
                t.h / ih,
                (t.x + t.w / 2.0) / iw,
                (t.y + t.h / 2.0) / ih,
                (t.w / t.h).clamp(ASPECT_MIN, ASPECT_MAX),
                (t.w * t.h) / (iw * ih),
            ]))
        })
        .collect()
}

/// Top-to-bottom, then left-to-right.
pub fn reading_order(tokens: &[OcrToken]) -> Vec<&OcrToken> {
    let mut sorted: Vec<&OcrToken> = tokens.iter().collect();
    sorted.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)));
    sorted
}

pub fn symbol_index(ch: char) -> usize {
    let code = ch as u32;
    if (0x20..0x80).contains(&code) {
        (code - 0x20) as usize
    } else {
        UNKNOWN_SYMBOL
    }
}

/// Symbol ids of the token texts joined by single spaces, capped at `max_chars`.
pub fn text_symbols(ordered: &[&OcrToken], max_chars: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, t) in ordered.iter().enumerate() {
        if i > 0 {
            out.push(symbol_index(' '));
        }
        out.extend(t.text.chars().map(symbol_index));
    }
    out.truncate(max_chars);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tok(text: &str, x: f64, y: f64, w: f64, h: f64, iw: f64, ih: f64) -> OcrToken {
        OcrToken {
            text: text.into(),
            x,
            y,
            w,
            h,
            image_width: iw,
            image_height: ih,
        }
    }

    #[test]
    fn encodes_reference_box() {
        let f = encode_positions(&[tok("A", 10.0, 20.0, 100.0, 30.0, 200.0, 100.0)]).unwrap();
        let expect = [0.05, 0.2, 0.5, 0.3, 0.3, 0.35, 100.0 / 30.0, 0.15];
        for (a, b) in f[0].0.iter().zip(expect) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_tokens_encode_to_empty() {
        assert!(encode_positions(&[]).unwrap().is_empty());
    }

    #[test]
    fn aspect_is_clamped() {
        let wide = encode_positions(&[tok("A", 0.0, 0.0, 100.0, 1.0, 200.0, 100.0)]).unwrap();
        assert_eq!(wide[0].0[6], ASPECT_MAX);
        let tall = encode_positions(&[tok("A", 0.0, 0.0, 1.0, 100.0, 200.0, 100.0)]).unwrap();
        assert_eq!(tall[0].0[6], ASPECT_MIN);
    }

    #[test]
    fn rejects_out_of_bounds_box_by_index() {
        let tokens = [
            tok("ok", 0.0, 0.0, 10.0, 10.0, 50.0, 50.0),
            tok("bad", 45.0, 0.0, 10.0, 10.0, 50.0, 50.0),
        ];
        match encode_positions(&tokens) {
            Err(FusionError::InvalidToken { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(encode_positions(&[tok("z", 0.0, 0.0, 0.0, 4.0, 50.0, 50.0)]).is_err());
        assert!(encode_positions(&[tok("n", -1.0, 0.0, 4.0, 4.0, 50.0, 50.0)]).is_err());
    }

    #[test]
    fn symbols_and_order() {
        assert_eq!(symbol_index(' '), 0);
        assert_eq!(symbol_index('~'), 94);
        assert_eq!(symbol_index('\u{7f}'), 95);
        assert_eq!(symbol_index('é'), UNKNOWN_SYMBOL);
        let tokens = [
            tok("B", 50.0, 10.0, 5.0, 5.0, 100.0, 100.0),
            tok("C", 0.0, 40.0, 5.0, 5.0, 100.0, 100.0),
            tok("A", 5.0, 10.0, 5.0, 5.0, 100.0, 100.0),
        ];
        let ordered = reading_order(&tokens);
        let texts: Vec<_> = ordered.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["A", "B", "C"]);
        let syms = text_symbols(&ordered, 4);
        assert_eq!(syms, vec![symbol_index('A'), 0, symbol_index('B'), 0]);
    }
}
