use super::bpe::{EncodedRow, Vocabulary, PAD};
use crate::error::{Error, Result};

/// Right-padded id matrix `[batch, len]` with a matching mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<u32>,
    mask: Vec<bool>,
    batch: usize,
    len: usize,
}

impl TokenBatch {
    /// Pads rows to the longest real length among them. Each row must be a
    /// mask prefix of `true` followed by `false`, with `PAD` wherever the mask
    /// is false.
    pub fn from_rows(rows: &[EncodedRow]) -> Result<TokenBatch> {
        if rows.is_empty() {
            return Err(Error::pre("token_batch", "no rows"));
        }
        let mut real = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            if row.ids.len() != row.mask.len() {
                return Err(Error::pre("token_batch", format!("row {r}: ids and mask lengths differ")));
            }
            let n = row.mask.iter().take_while(|&&m| m).count();
            if row.mask[n..].iter().any(|&m| m) || row.ids[n..].iter().any(|&i| i != PAD) {
                return Err(Error::pre("token_batch", format!("row {r}: padding is not a suffix")));
            }
            if n == 0 {
                return Err(Error::pre("token_batch", format!("row {r} is empty")));
            }
            real.push(n);
        }
        let len = *real.iter().max().expect("non-empty");
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut mask = Vec::with_capacity(rows.len() * len);
        for (row, &n) in rows.iter().zip(&real) {
            ids.extend_from_slice(&row.ids[..n]);
            ids.extend(std::iter::repeat(PAD).take(len - n));
            mask.extend((0..len).map(|i| i < n));
        }
        Ok(TokenBatch {
            ids,
            mask,
            batch: rows.len(),
            len,
        })
    }

    pub fn encode(vocab: &Vocabulary, texts: &[&str], max_len: usize) -> Result<TokenBatch> {
        let rows = texts
            .iter()
            .map(|t| vocab.encode_unpadded(t, max_len))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(&rows)
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    pub fn row_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.len..(b + 1) * self.len]
    }

    /// Real (unpadded) length of row `b`.
    pub fn row_len(&self, b: usize) -> usize {
        self.row_mask(b).iter().filter(|&&m| m).count()
    }

    /// Drops the last column; used to build decoder inputs under teacher forcing.
    pub fn without_last(&self) -> Result<TokenBatch> {
        self.columns(0, self.len - 1)
    }

    /// Drops the first column; the matching labels for [`TokenBatch::without_last`].
    pub fn without_first(&self) -> Result<TokenBatch> {
        self.columns(1, self.len)
    }

    fn columns(&self, from: usize, to: usize) -> Result<TokenBatch> {
        if to <= from {
            return Err(Error::pre("token_batch", "sequence too short to shift"));
        }
        let len = to - from;
        let mut ids = Vec::with_capacity(self.batch * len);
        let mut mask = Vec::with_capacity(self.batch * len);
        for b in 0..self.batch {
            ids.extend_from_slice(&self.row(b)[from..to]);
            mask.extend_from_slice(&self.row_mask(b)[from..to]);
        }
        Ok(TokenBatch {
            ids,
            mask,
            batch: self.batch,
            len,
        })
    }
}
