//! Window and shifted-window multi-head self-attention.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::params::Session;

/// Logit added between tokens from different regions of a shifted window.
pub const MASK_LOGIT: f64 = -100.0;

/// Original token index for every (window, position) slot, windows in
/// row-major order over a `grid × grid` token map.
///
/// With a non-zero `shift` the map is first rolled by `−shift` along both
/// axes, so window 0 starts at token `(shift, shift)`.
pub fn window_partition(grid: usize, window: usize, shift: usize) -> Vec<usize> {
    let per_side = grid / window;
    let mut out = Vec::with_capacity(grid * grid);
    for wr in 0..per_side {
        for wc in 0..per_side {
            for a in 0..window {
                for b in 0..window {
                    let r = (wr * window + a + shift) % grid;
                    let c = (wc * window + b + shift) % grid;
                    out.push(r * grid + c);
                }
            }
        }
    }
    out
}

/// `N × N` lookup into the `(2w−1)²`-row bias table, `N = w²`.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for p in 0..n {
        let (pr, pc) = (p / window, p % window);
        for q in 0..n {
            let (qr, qc) = (q / window, q % window);
            idx.push((pr + window - 1 - qr) * span + (pc + window - 1 - qc));
        }
    }
    idx
}

/// Additive mask `[windows, N, N]` that stops tokens which were not adjacent
/// before the cyclic shift from attending to each other.
pub fn shift_mask(grid: usize, window: usize, shift: usize) -> Vec<f64> {
    let per_side = grid / window;
    let n = window * window;
    let mut out = vec![0.0; per_side * per_side * n * n];
    if shift == 0 {
        return out;
    }
    let region = |coord: usize| {
        if coord < grid - window {
            0
        } else if coord < grid - shift {
            1
        } else {
            2
        }
    };
    for wr in 0..per_side {
        for wc in 0..per_side {
            let win = wr * per_side + wc;
            let label = |p: usize| {
                let (a, b) = (p / window, p % window);
                region(wr * window + a) * 3 + region(wc * window + b)
            };
            for p in 0..n {
                for q in 0..n {
                    if label(p) != label(q) {
                        out[(win * n + p) * n + q] = MASK_LOGIT;
                    }
                }
            }
        }
    }
    out
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (slot, &token) in perm.iter().enumerate() {
        inv[token] = slot;
    }
    inv
}

/// Geometry of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub grid: usize,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

/// Output of [`window_attention`]; `probs` is `[windows·heads, N, N]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub output: Var,
    pub probs: Var,
}

/// `SoftMax(q·kᵀ/√d + B [+ mask])·v` inside each window, followed by the
/// output projection. Parameters are read from `{prefix}qkv.*`,
/// `{prefix}proj.*` and `{prefix}rel_bias`.
pub fn window_attention(s: &mut Session<'_>, x: Var, shape: AttentionShape, prefix: &str) -> Result<AttentionOutput> {
    let AttentionShape {
        grid,
        channels,
        heads,
        window,
        shift,
    } = shape;
    let tokens = grid * grid;
    if window == 0 || grid % window != 0 || channels % heads != 0 || (shift != 0 && shift >= window) {
        return Err(Error::Config(format!(
            "attention over {grid}x{grid} grid with window {window}, shift {shift}, {channels} channels / {heads} heads"
        )));
    }
    if s.graph.shape(x) != [tokens, channels] {
        return Err(Error::shape("window_attention", s.graph.shape(x), &[tokens, channels]));
    }
    let d = channels / heads;
    let n = window * window;
    let windows = tokens / n;
    let batch = windows * heads;

    let w_qkv = s.param(&format!("{prefix}qkv.weight"))?;
    let b_qkv = s.param(&format!("{prefix}qkv.bias"))?;
    let qkv = s.graph.linear(x, w_qkv, Some(b_qkv))?;

    let part = window_partition(grid, window, shift);
    let c3 = 3 * channels;
    // q and v: [windows·heads, N, d]; kᵀ: [windows·heads, d, N].
    let mut q_idx = Vec::with_capacity(batch * n * d);
    let mut v_idx = Vec::with_capacity(batch * n * d);
    let mut kt_idx = Vec::with_capacity(batch * n * d);
    for win in 0..windows {
        for h in 0..heads {
            for p in 0..n {
                let row = part[win * n + p] * c3;
                for j in 0..d {
                    q_idx.push(row + h * d + j);
                    v_idx.push(row + 2 * channels + h * d + j);
                }
            }
            for j in 0..d {
                for p in 0..n {
                    kt_idx.push(part[win * n + p] * c3 + channels + h * d + j);
                }
            }
        }
    }
    let q = s.graph.gather(qkv, q_idx, &[batch, n, d])?;
    let q = s.graph.scale(q, 1.0 / (d as f64).sqrt());
    let kt = s.graph.gather(qkv, kt_idx, &[batch, d, n])?;
    let v = s.graph.gather(qkv, v_idx, &[batch, n, d])?;

    let logits = s.graph.matmul(q, kt)?;

    let table = s.param(&format!("{prefix}rel_bias"))?;
    let rel = relative_position_index(window);
    let mut bias_idx = Vec::with_capacity(batch * n * n);
    for _win in 0..windows {
        for h in 0..heads {
            bias_idx.extend(rel.iter().map(|&r| r * heads + h));
        }
    }
    let bias = s.graph.gather(table, bias_idx, &[batch, n, n])?;
    let mut logits = s.graph.add(logits, bias)?;

    if shift > 0 {
        let mask = shift_mask(grid, window, shift);
        let mut full = Vec::with_capacity(batch * n * n);
        for win in 0..windows {
            for _h in 0..heads {
                full.extend_from_slice(&mask[win * n * n..(win + 1) * n * n]);
            }
        }
        let mask = s
            .graph
            .constant(crate::tensor::Tensor::new(vec![batch, n, n], full)?);
        logits = s.graph.add(logits, mask)?;
    }

    let probs = s.graph.softmax_lastdim(logits)?;
    let ctx = s.graph.matmul(probs, v)?;

    // Back to token-major [tokens, channels], undoing the shift.
    let inv = invert(&part);
    let mut out_idx = Vec::with_capacity(tokens * channels);
    for slot in inv.iter().take(tokens) {
        let (win, p) = (slot / n, slot % n);
        for h in 0..heads {
            let base = ((win * heads + h) * n + p) * d;
            out_idx.extend(base..base + d);
        }
    }
    let merged = s.graph.gather(ctx, Rc::<[usize]>::from(out_idx), &[tokens, channels])?;

    let w_proj = s.param(&format!("{prefix}proj.weight"))?;
    let b_proj = s.param(&format!("{prefix}proj.bias"))?;
    let output = s.graph.linear(merged, w_proj, Some(b_proj))?;
    Ok(AttentionOutput { output, probs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unshifted_partition_is_blockwise() {
        let part = window_partition(4, 2, 0);
        assert_eq!(&part[..4], &[0, 1, 4, 5]);
        assert_eq!(&part[12..], &[10, 11, 14, 15]);
    }

    #[test]
    fn shifted_partition_covers_every_token_once() {
        let part = window_partition(8, 4, 2);
        let mut seen = vec![0; 64];
        for &t in &part {
            seen[t] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(part[0], 2 * 8 + 2);
    }

    #[test]
    fn relative_index_spans_table() {
        let idx = relative_position_index(3);
        assert_eq!(idx.len(), 81);
        assert_eq!(*idx.iter().max().unwrap(), 24);
        // Zero displacement maps to the centre row of the table.
        for p in 0..9 {
            assert_eq!(idx[p * 9 + p], 12);
        }
    }

    #[test]
    fn shift_mask_blocks_wrapped_neighbours() {
        let mask = shift_mask(4, 2, 1);
        // Window 0 holds only interior tokens: nothing masked.
        assert!(mask[..16].iter().all(|&v| v == 0.0));
        // The last window mixes wrapped rows and columns.
        assert!(mask[48..].iter().any(|&v| v == MASK_LOGIT));
        assert!(shift_mask(4, 2, 0).iter().all(|&v| v == 0.0));
    }
}
