//! Mean-pool token compression — the baseline V2PE is contrasted with.
//!
//! Each image's visual-token embeddings are pooled in consecutive groups of
//! `1/ratio` (the ragged tail pools whatever remains), shrinking the token
//! count instead of the positional footprint. Textual tokens pass through.

use ndarray::Array2;

use super::{ModelError, Real};
use crate::rational::Dyadic;
use crate::tokenstream::{Token, TokenStream};

/// Pool each image's embedding run at `ratio` and rebuild the stream.
///
/// `ratio` must be a unit fraction `1/2^k` in `(0, 1]`; `1` is the identity.
/// The pooled token keeps its group's first symbol id (the embeddings are
/// what feed the model). Positions for the reduced stream are the caller's
/// to derive, uniformly, afterwards.
pub fn compress_visual_tokens<T: Real>(
    stream: &TokenStream,
    embeddings: &Array2<T>,
    ratio: Dyadic,
) -> Result<(TokenStream, Array2<T>), ModelError> {
    if !ratio.is_valid_increment() || ratio.numerator() != 1 {
        return Err(ModelError::InvalidRatio(ratio));
    }
    if embeddings.nrows() != stream.len() {
        return Err(ModelError::EmbedShape {
            rows: embeddings.nrows(),
            cols: embeddings.ncols(),
            expected_rows: stream.len(),
            expected_cols: embeddings.ncols(),
        });
    }
    let group = ratio.denominator() as usize;
    if group == 1 {
        return Ok((stream.clone(), embeddings.clone()));
    }

    let width = embeddings.ncols();
    let mut tokens: Vec<Token> = Vec::new();
    let mut rows: Vec<Vec<T>> = Vec::new();
    let mut i = 0;
    let toks = stream.tokens();
    while i < toks.len() {
        match toks[i].image_id {
            None => {
                tokens.push(toks[i]);
                rows.push(embeddings.row(i).to_vec());
                i += 1;
            }
            Some(image_id) => {
                let start = i;
                while i < toks.len() && toks[i].image_id == Some(image_id) {
                    i += 1;
                }
                let mut offset = start;
                while offset < i {
                    let end = (offset + group).min(i);
                    let count = T::from_f64((end - offset) as f64);
                    let mut mean = vec![T::zero(); width];
                    for r in offset..end {
                        for (c, slot) in mean.iter_mut().enumerate() {
                            *slot = *slot + embeddings[[r, c]];
                        }
                    }
                    for slot in &mut mean {
                        *slot = *slot / count;
                    }
                    tokens.push(Token::visual(image_id, toks[offset].symbol_id));
                    rows.push(mean);
                    offset = end;
                }
            }
        }
    }

    let mut out = Array2::zeros((rows.len(), width));
    for (r, row) in rows.iter().enumerate() {
        for (c, &x) in row.iter().enumerate() {
            out[[r, c]] = x;
        }
    }
    let reduced = TokenStream::new(tokens, stream.vocab_size())
        .map_err(|e| ModelError::Config(e.to_string()))?;
    Ok((reduced, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenstream::StreamBuilder;

    fn embeds_for(stream: &TokenStream) -> Array2<f32> {
        // Row i = [i, i] so pooled means are easy to read off.
        Array2::from_shape_fn((stream.len(), 2), |(i, _)| i as f32)
    }

    #[test]
    fn ratio_one_is_identity() {
        let mut b = StreamBuilder::new();
        b.push_text(1);
        b.push_image(&[2, 3, 4]);
        let s = b.finish(8).unwrap();
        let e = embeds_for(&s);
        let (rs, re) = compress_visual_tokens(&s, &e, Dyadic::ONE).unwrap();
        assert_eq!(rs, s);
        assert_eq!(re, e);
    }

    #[test]
    fn pools_groups_of_four() {
        // 8 visual tokens, ratio 1/4 -> 2 pooled tokens, each the mean of 4.
        let mut b = StreamBuilder::new();
        b.push_image(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let s = b.finish(8).unwrap();
        let e = embeds_for(&s);
        let (rs, re) = compress_visual_tokens(&s, &e, "1/4".parse().unwrap()).unwrap();
        assert_eq!(rs.len(), 2);
        assert_eq!(re.nrows(), 2);
        assert_eq!(re[[0, 0]], 1.5); // mean of 0..=3
        assert_eq!(re[[1, 0]], 5.5); // mean of 4..=7
    }

    #[test]
    fn ragged_tail_pools_remainder() {
        // 7 visual tokens, ratio 1/4 -> groups of 4 and 3.
        let mut b = StreamBuilder::new();
        b.push_image(&[0, 1, 2, 3, 4, 5, 6]);
        let s = b.finish(8).unwrap();
        let e = embeds_for(&s);
        let (rs, re) = compress_visual_tokens(&s, &e, "1/4".parse().unwrap()).unwrap();
        assert_eq!(rs.len(), 2);
        assert_eq!(re[[0, 0]], 1.5); // mean of 0..=3
        assert_eq!(re[[1, 0]], 5.0); // mean of 4..=6
    }

    #[test]
    fn text_passes_through_and_ids_stay_dense() {
        let mut b = StreamBuilder::new();
        b.push_text(1);
        b.push_image(&[2; 5]);
        b.push_text(3);
        b.push_image(&[4; 2]);
        let s = b.finish(8).unwrap();
        let e = embeds_for(&s);
        let (rs, _) = compress_visual_tokens(&s, &e, "1/2".parse().unwrap()).unwrap();
        // 1 text + ceil(5/2)=3 pooled + 1 text + ceil(2/2)=1 pooled.
        assert_eq!(rs.len(), 6);
        assert_eq!(rs.n_images(), 2);
        assert_eq!(rs.count_by_modality(), (2, 4));
    }

    #[test]
    fn rejects_non_unit_ratio() {
        let mut b = StreamBuilder::new();
        b.push_image(&[1, 2]);
        let s = b.finish(8).unwrap();
        let e = embeds_for(&s);
        assert!(matches!(
            compress_visual_tokens(&s, &e, "3/4".parse().unwrap()),
            Err(ModelError::InvalidRatio(_))
        ));
    }
}
