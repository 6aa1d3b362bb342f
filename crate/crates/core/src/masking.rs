//! Gist attention masks for decoder-only and encoder-decoder layouts.
//!
//! A sequence is laid out as `(prompt, gist × k, input/output, pad…)`.
//! Everything after the last gist token is blind to everything before the
//! first one, so the prompt's content can only reach later positions
//! through the gist activations.
//!
//! All constructors treat a sequence without any gist token as
//! degenerate and return an all-zero mask; callers then fall back to a
//! plain causal/pad mask (see [`decoder_mask`]).

use std::fmt::Write as _;

/// Token ids annotated with the reserved gist and pad ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub gist_id: u32,
    pub pad_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Prompt,
    Gist,
    /// Input or output: anything after the last gist token.
    Body,
    Pad,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, gist_id: u32, pad_id: u32) -> Self {
        Self {
            ids,
            gist_id,
            pad_id,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn first_gist(&self) -> Option<usize> {
        self.ids.iter().position(|&t| t == self.gist_id)
    }

    pub fn last_gist(&self) -> Option<usize> {
        self.ids.iter().rposition(|&t| t == self.gist_id)
    }

    pub fn num_gist(&self) -> usize {
        self.ids.iter().filter(|&&t| t == self.gist_id).count()
    }

    /// Per-position roles. Tokens sitting between two gist runs count as gist.
    pub fn roles(&self) -> Vec<Role> {
        let (first, last) = (self.first_gist(), self.last_gist());
        self.ids
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                if t == self.pad_id {
                    Role::Pad
                } else if t == self.gist_id {
                    Role::Gist
                } else {
                    match (first, last) {
                        (Some(f), _) if i < f => Role::Prompt,
                        (_, Some(l)) if i > l => Role::Body,
                        (Some(_), Some(_)) => Role::Gist,
                        _ => Role::Prompt,
                    }
                }
            })
            .collect()
    }

    /// Problems that the masks tolerate but the data pipeline never emits.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let (Some(f), Some(l)) = (self.first_gist(), self.last_gist()) {
            if self.ids[f..=l].iter().any(|&t| t != self.gist_id) {
                out.push(format!("non-contiguous gist tokens between positions {f} and {l}"));
            }
        }
        if let Some(p) = self.ids.iter().position(|&t| t == self.pad_id) {
            if self.ids[p..].iter().any(|&t| t != self.pad_id) {
                out.push(format!("pad token at position {p} is followed by non-pad tokens"));
            }
        }
        out
    }
}

/// Boolean attention permission table of shape `[batch, 1, queries, keys]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GistMask {
    batch: usize,
    queries: usize,
    keys: usize,
    allow: Vec<bool>,
}

impl GistMask {
    pub fn from_fn(
        batch: usize,
        queries: usize,
        keys: usize,
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Self {
        let mut allow = Vec::with_capacity(batch * queries * keys);
        for b in 0..batch {
            for r in 0..queries {
                for c in 0..keys {
                    allow.push(f(b, r, c));
                }
            }
        }
        Self {
            batch,
            queries,
            keys,
            allow,
        }
    }

    /// Lower-triangular mask for `seq` new positions preceded by `past`
    /// cached positions (all of which are visible).
    pub fn causal(batch: usize, past: usize, seq: usize) -> Self {
        Self::from_fn(batch, seq, past + seq, |_, r, c| c <= past + r)
    }

    /// Causal mask that additionally hides pad columns.
    pub fn causal_pad<S: AsRef<[u32]>>(batch: &[S], pad_id: u32) -> Self {
        let seq = seq_len(batch);
        Self::from_fn(batch.len(), seq, seq, |b, r, c| {
            c <= r && batch[b].as_ref()[c] != pad_id
        })
    }

    /// `[batch, 1, queries, keys]`
    pub fn shape(&self) -> [usize; 4] {
        [self.batch, 1, self.queries, self.keys]
    }

    pub fn get(&self, b: usize, r: usize, c: usize) -> bool {
        self.allow[(b * self.queries + r) * self.keys + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    pub fn into_vec(self) -> Vec<bool> {
        self.allow
    }

    /// True when no cell is permitted (the degenerate no-gist result).
    pub fn is_empty(&self) -> bool {
        !self.allow.iter().any(|&a| a)
    }

    pub fn and(&self, other: &GistMask) -> GistMask {
        assert_eq!(self.shape(), other.shape(), "mask shapes differ");
        GistMask {
            allow: self
                .allow
                .iter()
                .zip(&other.allow)
                .map(|(a, b)| *a && *b)
                .collect(),
            ..*self
        }
    }

    /// Rows `rows` of batch item `b` as a standalone single-item mask.
    pub fn select_rows(&self, b: usize, rows: std::ops::Range<usize>) -> GistMask {
        let n = rows.len();
        let start = rows.start;
        GistMask::from_fn(1, n, self.keys, |_, r, c| self.get(b, start + r, c))
    }

    /// 0/1 table of batch item `b`; rows are queries, columns keys.
    pub fn render(&self, b: usize, labels: Option<&[String]>) -> String {
        let label = |i: usize| -> String {
            labels
                .and_then(|l| l.get(i).cloned())
                .unwrap_or_else(|| i.to_string())
        };
        let width = (0..self.queries.max(self.keys))
            .map(|i| label(i).chars().count())
            .max()
            .unwrap_or(1)
            .max(1);
        let mut s = String::new();
        let _ = write!(s, "{:>width$} |", "");
        for c in 0..self.keys {
            let _ = write!(s, " {:>width$}", label(c));
        }
        s.push('\n');
        let _ = writeln!(s, "{}-+{}", "-".repeat(width), "-".repeat((width + 1) * self.keys));
        for r in 0..self.queries {
            let _ = write!(s, "{:>width$} |", label(r));
            for c in 0..self.keys {
                let _ = write!(s, " {:>width$}", u8::from(self.get(b, r, c)));
            }
            s.push('\n');
        }
        s
    }
}

fn seq_len<S: AsRef<[u32]>>(batch: &[S]) -> usize {
    let n = batch.first().map_or(0, |s| s.as_ref().len());
    assert!(
        batch.iter().all(|s| s.as_ref().len() == n),
        "batch rows must share one length"
    );
    n
}

/// `out[i] = Σ_{j ≥ i} x[j]`, computed as `x + total − cumsum(x)`.
pub fn reverse_cumsum(x: &[i64]) -> Vec<i64> {
    let total: i64 = x.iter().sum();
    let mut running = 0;
    x.iter()
        .map(|&v| {
            running += v;
            v + total - running
        })
        .collect()
}

fn gist_indicator(ids: &[u32], gist_id: u32) -> Vec<i64> {
    ids.iter().map(|&t| i64::from(t == gist_id)).collect()
}

/// 1 at positions at or after the first gist token.
pub fn make_mask_pre_first_gist(ids: &[u32], gist_id: u32) -> Vec<bool> {
    let mut running = 0;
    gist_indicator(ids, gist_id)
        .into_iter()
        .map(|v| {
            running += v;
            running >= 1
        })
        .collect()
}

/// 1 at positions at or before the last gist token.
pub fn make_mask_post_last_gist(ids: &[u32], gist_id: u32) -> Vec<bool> {
    reverse_cumsum(&gist_indicator(ids, gist_id))
        .into_iter()
        .map(|v| v >= 1)
        .collect()
}

/// Decoder-only gist mask, before composition with the causal mask.
///
/// Rows at or before the last gist see columns at or before the last gist;
/// rows after it see columns at or after the first gist. Pad columns are
/// always hidden.
pub fn make_gist_mask<S: AsRef<[u32]>>(batch: &[S], gist_id: u32, pad_id: u32) -> GistMask {
    let seq = seq_len(batch);
    let helpers: Vec<(Vec<bool>, Vec<bool>)> = batch
        .iter()
        .map(|s| {
            let ids = s.as_ref();
            (
                make_mask_post_last_gist(ids, gist_id),
                make_mask_pre_first_gist(ids, gist_id),
            )
        })
        .collect();
    GistMask::from_fn(batch.len(), seq, seq, |b, r, c| {
        let (upto_last, from_first) = &helpers[b];
        let visible = if upto_last[r] {
            upto_last[c]
        } else {
            from_first[c]
        };
        visible && batch[b].as_ref()[c] != pad_id
    })
}

/// Per-cell re-derivation of [`make_gist_mask`] without prefix sums.
pub fn brute_force_gist_mask<S: AsRef<[u32]>>(batch: &[S], gist_id: u32, pad_id: u32) -> GistMask {
    let seq = seq_len(batch);
    GistMask::from_fn(batch.len(), seq, seq, |b, r, c| {
        let ids = batch[b].as_ref();
        if ids[c] == pad_id {
            return false;
        }
        let mut first = None;
        let mut last = None;
        for (i, &t) in ids.iter().enumerate() {
            if t == gist_id {
                if first.is_none() {
                    first = Some(i);
                }
                last = Some(i);
            }
        }
        match (first, last) {
            (Some(f), Some(l)) => {
                if r <= l {
                    c <= l
                } else {
                    c >= f
                }
            }
            _ => false,
        }
    })
}

/// Bidirectional encoder mask: prompt and gist tokens attend among
/// {prompt, gist}; input tokens attend among {gist, input}.
pub fn make_encoder_gist_mask<S: AsRef<[u32]>>(batch: &[S], gist_id: u32, pad_id: u32) -> GistMask {
    let seq = seq_len(batch);
    let roles: Vec<Vec<Role>> = batch
        .iter()
        .map(|s| encoder_roles(s.as_ref(), gist_id))
        .collect();
    GistMask::from_fn(batch.len(), seq, seq, |b, r, c| {
        if batch[b].as_ref()[c] == pad_id {
            return false;
        }
        match (roles[b][r], roles[b][c]) {
            (Role::Pad, _) | (_, Role::Pad) => false,
            (Role::Prompt | Role::Gist, col) => matches!(col, Role::Prompt | Role::Gist),
            (Role::Body, col) => matches!(col, Role::Gist | Role::Body),
        }
    })
}

/// Encoder roles ignoring pad ids (pad columns are removed separately).
/// Without any gist every token is marked pad so that the mask is empty.
fn encoder_roles(ids: &[u32], gist_id: u32) -> Vec<Role> {
    let first = ids.iter().position(|&t| t == gist_id);
    let last = ids.iter().rposition(|&t| t == gist_id);
    match (first, last) {
        (Some(f), Some(l)) => (0..ids.len())
            .map(|i| {
                if i < f {
                    Role::Prompt
                } else if i <= l {
                    Role::Gist
                } else {
                    Role::Body
                }
            })
            .collect(),
        _ => vec![Role::Pad; ids.len()],
    }
}

/// Decoder-to-encoder cross-attention mask: every decoder row may attend
/// encoder columns at or after the first gist, never prompt or pad columns.
pub fn make_cross_attention_gist_mask<S: AsRef<[u32]>>(
    encoder: &[S],
    gist_id: u32,
    pad_id: u32,
    decoder_len: usize,
) -> GistMask {
    let seq = seq_len(encoder);
    let from_first: Vec<Vec<bool>> = encoder
        .iter()
        .map(|s| make_mask_pre_first_gist(s.as_ref(), gist_id))
        .collect();
    GistMask::from_fn(encoder.len(), decoder_len, seq, |b, _, c| {
        from_first[b][c] && encoder[b].as_ref()[c] != pad_id
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Causal + pad only.
    Causal,
    /// Gist mask composed with causal; falls back to causal without gists.
    Gist,
}

/// Mask actually fed to a decoder-only forward pass.
pub fn decoder_mask<S: AsRef<[u32]>>(batch: &[S], gist_id: u32, pad_id: u32, mode: MaskMode) -> GistMask {
    let causal = GistMask::causal_pad(batch, pad_id);
    if mode == MaskMode::Causal {
        return causal;
    }
    let seq = seq_len(batch);
    let gist = make_gist_mask(batch, gist_id, pad_id);
    // Items without gist tokens keep their causal rows.
    GistMask::from_fn(batch.len(), seq, seq, |b, r, c| {
        let has_gist = batch[b].as_ref().contains(&gist_id);
        causal.get(b, r, c) && (!has_gist || gist.get(b, r, c))
    })
}
