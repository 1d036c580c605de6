use crate::error::{Error, Result};

/// Square self-attention mask; `true` means the key is blocked for the query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    fn from_rule(len: usize, rule: impl Fn(usize, usize) -> bool) -> Result<Self> {
        if len == 0 {
            return Err(Error::config("mask length", "must be at least 1"));
        }
        let mut blocked = vec![false; len * len];
        for q in 0..len {
            for k in 0..len {
                blocked[q * len + k] = rule(q, k);
            }
        }
        Ok(AttentionMask { len, blocked })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_blocked(&self, query: usize, key: usize) -> bool {
        self.blocked[query * self.len + key]
    }

    /// All blocked `(query, key)` pairs in row-major order.
    pub fn blocked_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.len)
            .flat_map(|q| (0..self.len).map(move |k| (q, k)))
            .filter(|&(q, k)| self.is_blocked(q, k))
            .collect()
    }

    /// Expands to `[batch, len, len]`, also blocking padded keys.
    pub fn with_key_padding(&self, key_pad: &[bool], batch: usize) -> Vec<bool> {
        let l = self.len;
        assert_eq!(key_pad.len(), batch * l, "key padding must be [batch, len]");
        let mut out = vec![false; batch * l * l];
        for b in 0..batch {
            for q in 0..l {
                for k in 0..l {
                    out[(b * l + q) * l + k] = self.blocked[q * l + k] || key_pad[b * l + k];
                }
            }
        }
        out
    }
}

/// Auto-regressive mask: key `j` is blocked for query `i` iff `j > i`.
pub fn build_causal_mask(len: usize) -> Result<AttentionMask> {
    AttentionMask::from_rule(len, |q, k| k > q)
}

/// Target mask for the auxiliary decoder: query `i` cannot see key `i + 1`,
/// the token it predicts. Every other position, past or future, is visible.
pub fn build_target_mask(len: usize) -> Result<AttentionMask> {
    AttentionMask::from_rule(len, |q, k| k == q + 1)
}

/// `[batch, lq, lk]` mask blocking only padded keys (cross attention).
pub fn key_padding_mask(key_pad: &[bool], batch: usize, lq: usize, lk: usize) -> Vec<bool> {
    assert_eq!(key_pad.len(), batch * lk);
    let mut out = vec![false; batch * lq * lk];
    for b in 0..batch {
        for q in 0..lq {
            out[(b * lq + q) * lk..(b * lq + q + 1) * lk]
                .copy_from_slice(&key_pad[b * lk..(b + 1) * lk]);
        }
    }
    out
}
