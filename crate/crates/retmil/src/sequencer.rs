//! Splitting an N x d feature sequence into fixed-length subsequences.
//!
//! With N = q*l + r, subsequences 1..q are consecutive blocks of length l.
//! The remainder R (length r) is extended to a full row by one of three
//! rules:
//!
//! - r = 0: no extension row at all (the empty extension is dropped).
//! - 0 < r < l/2: with l - r = a*r + b, the row is R, then R repeated a
//!   times, then the first b elements of R.
//! - r >= l/2: the row is R followed by its own first l - r elements.
//!
//! Remainder tokens therefore appear only in the last row (possibly several
//! times within it), and every token of the first q blocks appears exactly
//! once. A provenance map records which original token fills each slot so
//! per-slot scores can be scattered back.

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Slot-to-token map for one split. Token indices are 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub n_tokens: usize,
    pub subseq_len: usize,
    /// `rows[b][s]` is the original token index feeding row `b`, slot `s`.
    pub rows: Vec<Vec<usize>>,
}

impl Provenance {
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }
}

/// The padded subsequence stack plus its provenance.
pub struct SubsequenceBatch<T: Scalar> {
    /// `[B, l, d]` stack of subsequence features.
    pub stack: Tensor<T>,
    pub provenance: Provenance,
}

impl<T: Scalar> SubsequenceBatch<T> {
    pub fn num_rows(&self) -> usize {
        self.provenance.num_rows()
    }
}

/// Compute the slot-to-token map for a sequence of `n` tokens and subsequence
/// length `l` without touching feature data.
pub fn compute_provenance(n: usize, l: usize) -> Result<Provenance> {
    if l < 1 {
        return Err(Error::Input(format!("subsequence length {l} must be >= 1")));
    }
    if n < 1 {
        return Err(Error::Input("cannot split an empty sequence".into()));
    }
    let q = n / l;
    let r = n % l;
    let mut rows: Vec<Vec<usize>> = Vec::with_capacity(q + usize::from(r > 0));
    for j in 0..q {
        rows.push((j * l..(j + 1) * l).collect());
    }
    if r > 0 {
        let rem_start = q * l;
        let remainder: Vec<usize> = (rem_start..n).collect();
        let mut row = remainder.clone();
        if 2 * r < l {
            // l - r = a*r + b with 0 <= b < r
            let a = (l - r) / r;
            let b = (l - r) % r;
            for _ in 0..a {
                row.extend_from_slice(&remainder);
            }
            row.extend_from_slice(&remainder[..b]);
        } else {
            row.extend_from_slice(&remainder[..l - r]);
        }
        debug_assert_eq!(row.len(), l);
        rows.push(row);
    }
    Ok(Provenance { n_tokens: n, subseq_len: l, rows })
}

/// Split a feature sequence into the padded `[B, l, d]` stack.
pub fn split_and_pad<T: Scalar>(seq: &FeatureSequence<T>, l: usize) -> Result<SubsequenceBatch<T>> {
    let provenance = compute_provenance(seq.n, l)?;
    let d = seq.d;
    let b = provenance.num_rows();
    let mut data = Vec::with_capacity(b * l * d);
    for row in &provenance.rows {
        for &tok in row {
            data.extend_from_slice(seq.row(tok));
        }
    }
    let stack = Tensor::from_vec(&[b, l, d], data)?;
    Ok(SubsequenceBatch { stack, provenance })
}

/// Gather one subsequence row as an `[l, d]` tensor straight from the source
/// sequence. Used by the streaming forward path, which never materializes the
/// full stack.
pub fn gather_row<T: Scalar>(seq: &FeatureSequence<T>, provenance: &Provenance, row: usize) -> Result<Tensor<T>> {
    let slots = &provenance.rows[row];
    let mut data = Vec::with_capacity(slots.len() * seq.d);
    for &tok in slots {
        data.extend_from_slice(seq.row(tok));
    }
    Tensor::from_vec(&[slots.len(), seq.d], data)
}

/// Scatter per-slot scores back onto original tokens: a token's score is the
/// sum over every slot it fills.
pub fn provenance_scatter<T: Scalar>(provenance: &Provenance, per_slot: &[T]) -> Result<Vec<T>> {
    let b = provenance.num_rows();
    let l = provenance.subseq_len;
    if per_slot.len() != b * l {
        return Err(Error::dim(
            "provenance_scatter",
            format!("{} scores for {b} rows x {l} slots", per_slot.len()),
        ));
    }
    let mut out = vec![T::zero(); provenance.n_tokens];
    for (row, slots) in provenance.rows.iter().enumerate() {
        for (slot, &tok) in slots.iter().enumerate() {
            out[tok] += per_slot[row * l + slot];
        }
    }
    Ok(out)
}
