//! Byte-level tokenizer and mixed image/text sequence assembly.
//!
//! Text maps to raw byte ids 0-255 plus four specials. The literal marker
//! `[IMG]` in rendered text is the single escape sequence: during sequence
//! assembly it expands to the image patch rows followed by the IMG special
//! token.

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const IMG_TOKEN: u16 = 256;
pub const PAD_TOKEN: u16 = 257;
pub const BOS_TOKEN: u16 = 258;
pub const EOS_TOKEN: u16 = 259;
pub const VOCAB_SIZE: usize = 260;

/// Literal marker that stands for the image insertion point in rendered text.
pub const IMG_MARKER: &str = "[IMG]";

/// Byte-level ids with BOS/EOS. Truncation to `budget` tokens keeps the
/// prefix and re-appends EOS.
pub fn tokenize_text(text: &str, budget: usize) -> Vec<u16> {
    assert!(budget >= 2, "token budget must fit BOS and EOS");
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS_TOKEN);
    for &b in text.as_bytes() {
        ids.push(b as u16);
    }
    ids.push(EOS_TOKEN);
    if ids.len() > budget {
        ids.truncate(budget - 1);
        ids.push(EOS_TOKEN);
    }
    ids
}

/// Inverse of [`tokenize_text`] for round-trip checks; specials are dropped.
pub fn decode_text(ids: &[u16]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Splits a `[c, h, w]` image into `(h/p)*(w/p)` flattened patches of length
/// `c*p*p`, in row-major patch order (channel-major within each patch).
pub fn patchify<T: Element>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    if image.rank() != 3 {
        return Err(Error::shape(format!(
            "patchify expects [c,h,w], got {:?}",
            image.shape()
        )));
    }
    if p == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(gh * gw * c * p * p);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        let y = gy * p + dy;
                        let x = gx * p + dx;
                        out.push(image.data()[ch * h * w + y * w + x]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![gh * gw, c * p * p], out))
}

/// One encoder input: an ordered mix of text token ids and image patch rows,
/// with an attention mask and a designated pooling position.
#[derive(Debug, Clone)]
pub struct TokenSequence<T: Element> {
    positions: Vec<SeqPos>,
    patch_rows: Option<Tensor<T>>,
    mask: Vec<bool>,
    pool_pos: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqPos {
    Token(u16),
    /// Row index into the patch matrix.
    Patch(usize),
}

impl<T: Element> TokenSequence<T> {
    /// Assembles a sequence from rendered text (with optional `[IMG]` marker)
    /// and an optional image. When the text would overflow `max_seq`, the
    /// trailing text segment is truncated prefix-first with EOS re-appended;
    /// if the fixed parts (BOS, patches, IMG, EOS) alone overflow, that is an
    /// error.
    pub fn build(text: &str, image: Option<&Tensor<T>>, config: &ModelConfig) -> Result<Self> {
        let marker_count = text.matches(IMG_MARKER).count();
        match (marker_count, image.is_some()) {
            (0, false) => {}
            (1, true) => {}
            (n, has) => {
                return Err(Error::invalid(format!(
                    "input has {n} [IMG] markers but image is {}",
                    if has { "present" } else { "absent" }
                )))
            }
        }

        let mut positions = vec![SeqPos::Token(BOS_TOKEN)];
        let mut patch_rows = None;

        let push_bytes = |positions: &mut Vec<SeqPos>, s: &str| {
            for &b in s.as_bytes() {
                positions.push(SeqPos::Token(b as u16));
            }
        };

        if let Some(img) = image {
            let idx = text.find(IMG_MARKER).unwrap();
            let (pre, rest) = text.split_at(idx);
            let post = &rest[IMG_MARKER.len()..];
            push_bytes(&mut positions, pre);
            let patches = patchify(img, config.patch_size)?;
            if patches.shape()[1] != config.patch_dim() {
                return Err(Error::shape(format!(
                    "patch vectors have length {}, model expects {}",
                    patches.shape()[1],
                    config.patch_dim()
                )));
            }
            for r in 0..patches.shape()[0] {
                positions.push(SeqPos::Patch(r));
            }
            patch_rows = Some(patches);
            positions.push(SeqPos::Token(IMG_TOKEN));
            // Fixed parts must fit before any text truncation can help.
            let fixed = positions.len() + 1; // + EOS
            if fixed > config.max_seq {
                return Err(Error::invalid(format!(
                    "sequence needs {fixed} non-text positions but max_seq is {}",
                    config.max_seq
                )));
            }
            let text_budget = config.max_seq - positions.len() - 1;
            for &b in post.as_bytes().iter().take(text_budget) {
                positions.push(SeqPos::Token(b as u16));
            }
        } else {
            let text_budget = config.max_seq - 2;
            for &b in text.as_bytes().iter().take(text_budget) {
                positions.push(SeqPos::Token(b as u16));
            }
        }
        positions.push(SeqPos::Token(EOS_TOKEN));
        debug_assert!(positions.len() <= config.max_seq);

        let mask = vec![true; positions.len()];
        let pool_pos = positions.len() - 1;
        Ok(Self {
            positions,
            patch_rows,
            mask,
            pool_pos,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[SeqPos] {
        &self.positions
    }

    pub fn patch_rows(&self) -> Option<&Tensor<T>> {
        self.patch_rows.as_ref()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Position pooled as the sequence embedding (the last real token).
    pub fn pool_pos(&self) -> usize {
        self.pool_pos
    }

    /// Appends masked-out PAD tokens; the pooling position is unchanged.
    pub fn append_padding(&mut self, n: usize) {
        for _ in 0..n {
            self.positions.push(SeqPos::Token(PAD_TOKEN));
            self.mask.push(false);
        }
    }

    /// Appends real (unmasked) tokens without moving the pooling position.
    /// Only useful for causality checks.
    pub fn append_tokens_keep_pool(&mut self, ids: &[u16]) {
        for &id in ids {
            self.positions.push(SeqPos::Token(id));
            self.mask.push(true);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::desk_default()
    }

    #[test]
    fn byte_identity_mapping() {
        assert_eq!(tokenize_text("ab", 16), vec![258, 97, 98, 259]);
        assert_eq!(tokenize_text("", 16), vec![258, 259]);
    }

    #[test]
    fn truncation_keeps_prefix_and_eos() {
        let ids = tokenize_text("abcdef", 5);
        assert_eq!(ids, vec![258, 97, 98, 99, 259]);
    }

    #[test]
    fn decode_round_trip() {
        for text in ["hello world", "", "Ünïcødé ok", "tabs\tand\nnewlines"] {
            let ids = tokenize_text(text, 256);
            assert_eq!(decode_text(&ids), text);
        }
    }

    #[test]
    fn patchify_counts() {
        let img = Tensor::<f64>::zeros(&[1, 8, 8]);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[4, 16]);

        let img = Tensor::<f64>::zeros(&[3, 16, 16]);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[16, 48]);
    }

    #[test]
    fn patchify_constant_single_patch() {
        let img = Tensor::<f64>::full(&[1, 4, 4], 0.5);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 16]);
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        let img = Tensor::<f64>::zeros(&[1, 6, 8]);
        assert!(patchify(&img, 4).is_err());
    }

    #[test]
    fn patch_order_is_row_major() {
        // 1x4x4 image, p=2: patches are the four 2x2 quadrants in reading order.
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn sequence_without_image() {
        let seq = TokenSequence::<f64>::build("hi", None, &cfg()).unwrap();
        assert_eq!(seq.len(), 4); // BOS h i EOS
        assert_eq!(seq.pool_pos(), 3);
        assert!(seq.patch_rows().is_none());
    }

    #[test]
    fn sequence_with_image_marker() {
        let img = Tensor::<f64>::zeros(&[1, 8, 8]);
        let seq = TokenSequence::build("[IMG] ok", Some(&img), &cfg()).unwrap();
        // BOS, 4 patches, IMG, ' ', 'o', 'k', EOS
        assert_eq!(seq.len(), 10);
        assert_eq!(seq.positions()[1], SeqPos::Patch(0));
        assert_eq!(seq.positions()[5], SeqPos::Token(IMG_TOKEN));
    }

    #[test]
    fn marker_image_mismatch_rejected() {
        let img = Tensor::<f64>::zeros(&[1, 8, 8]);
        assert!(TokenSequence::<f64>::build("[IMG] no image", None, &cfg()).is_err());
        assert!(TokenSequence::build("no marker", Some(&img), &cfg()).is_err());
        assert!(TokenSequence::build("[IMG] [IMG]", Some(&img), &cfg()).is_err());
    }

    #[test]
    fn padding_masks_out() {
        let mut seq = TokenSequence::<f64>::build("x", None, &cfg()).unwrap();
        let pool = seq.pool_pos();
        seq.append_padding(3);
        assert_eq!(seq.pool_pos(), pool);
        assert_eq!(seq.mask()[seq.len() - 1], false);
    }
}
