//! Swin-style window attention encoder and decoder.
//!
//! Encoder: patch embedding, then per stage a run of blocks alternating
//! regular and half-shifted windows, with 2×2 patch merging between stages and
//! a linear head to the latent channels. The decoder mirrors it with patch
//! expansion (linear widening followed by depth-to-space).
//!
//! Tokens are stored as rows `[batch · height · width, dim]` in raster order.

use std::rc::Rc;

use super::tape::Var;
use super::{Graph, SwinConfig};

/// Mask value between tokens that come from different regions of a rolled map.
const MASK_NEG: f64 = -100.0;

pub(crate) fn stage_dim(cfg: &SwinConfig, stage: usize) -> usize {
    cfg.embed_dim << stage
}

pub(crate) fn block_layout(prefix: &str, d: usize, mlp_ratio: usize) -> Vec<(String, Vec<usize>)> {
    let hidden = d * mlp_ratio;
    [
        ("norm1.gamma", vec![d]),
        ("norm1.beta", vec![d]),
        ("qkv.weight", vec![d, 3 * d]),
        ("qkv.bias", vec![3 * d]),
        ("proj.weight", vec![d, d]),
        ("proj.bias", vec![d]),
        ("norm2.gamma", vec![d]),
        ("norm2.beta", vec![d]),
        ("fc1.weight", vec![d, hidden]),
        ("fc1.bias", vec![hidden]),
        ("fc2.weight", vec![hidden, d]),
        ("fc2.bias", vec![d]),
    ]
    .into_iter()
    .map(|(n, dims)| (format!("{prefix}.{n}"), dims))
    .collect()
}

pub(crate) fn layout(cfg: &SwinConfig) -> Vec<(String, Vec<usize>)> {
    let p2 = 2 * cfg.patch_size * cfg.patch_size;
    let stages = cfg.depths.len();
    let last = stage_dim(cfg, stages - 1);
    let c = cfg.latent_channels;
    let mut out = vec![
        ("enc.embed.weight".to_string(), vec![p2, cfg.embed_dim]),
        ("enc.embed.bias".to_string(), vec![cfg.embed_dim]),
        ("enc.embed_norm.gamma".to_string(), vec![cfg.embed_dim]),
        ("enc.embed_norm.beta".to_string(), vec![cfg.embed_dim]),
    ];
    for (s, &depth) in cfg.depths.iter().enumerate() {
        let d = stage_dim(cfg, s);
        for b in 0..depth {
            out.extend(block_layout(
                &format!("enc.stage{s}.block{b}"),
                d,
                cfg.mlp_ratio,
            ));
        }
        if s + 1 < stages {
            out.push((format!("enc.merge{s}.norm.gamma"), vec![4 * d]));
            out.push((format!("enc.merge{s}.norm.beta"), vec![4 * d]));
            out.push((format!("enc.merge{s}.weight"), vec![4 * d, 2 * d]));
        }
    }
    out.push(("enc.head_norm.gamma".into(), vec![last]));
    out.push(("enc.head_norm.beta".into(), vec![last]));
    out.push(("enc.head.weight".into(), vec![last, c]));
    out.push(("enc.head.bias".into(), vec![c]));

    out.push(("dec.embed.weight".into(), vec![c, last]));
    out.push(("dec.embed.bias".into(), vec![last]));
    for s in (0..stages).rev() {
        let d = stage_dim(cfg, s);
        for b in 0..cfg.depths[s] {
            out.extend(block_layout(
                &format!("dec.stage{s}.block{b}"),
                d,
                cfg.mlp_ratio,
            ));
        }
        if s > 0 {
            out.push((format!("dec.expand{s}.weight"), vec![d, 2 * d]));
            out.push((format!("dec.expand{s}.norm.gamma"), vec![d / 2]));
            out.push((format!("dec.expand{s}.norm.beta"), vec![d / 2]));
        }
    }
    out.push(("dec.head_norm.gamma".into(), vec![cfg.embed_dim]));
    out.push(("dec.head_norm.beta".into(), vec![cfg.embed_dim]));
    out.push(("dec.head.weight".into(), vec![cfg.embed_dim, p2]));
    out.push(("dec.head.bias".into(), vec![p2]));
    out
}

/// Token grid resolution at `stage`.
pub(crate) fn stage_resolution(
    cfg: &SwinConfig,
    n_delay: usize,
    n_tx: usize,
    stage: usize,
) -> (usize, usize) {
    (
        (n_delay / cfg.patch_size) >> stage,
        (n_tx / cfg.patch_size) >> stage,
    )
}

struct Grid {
    batch: usize,
    h: usize,
    w: usize,
}

impl Grid {
    fn tokens(&self) -> usize {
        self.batch * self.h * self.w
    }
}

/// Expands a row permutation to element indices for rows of width `d`.
fn expand_rows(rows: &[usize], d: usize) -> Rc<[usize]> {
    rows.iter()
        .flat_map(|&r| (0..d).map(move |e| r * d + e))
        .collect::<Vec<_>>()
        .into()
}

fn invert(perm: &[usize]) -> Rc<[usize]> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv.into()
}

/// Element index of the patched input: row = token, features `(channel, py, px)`.
fn patch_index(batch: usize, n_delay: usize, n_tx: usize, p: usize) -> Vec<usize> {
    let (hp, wp) = (n_delay / p, n_tx / p);
    let plane = n_delay * n_tx;
    let mut idx = Vec::with_capacity(batch * 2 * plane);
    for b in 0..batch {
        for r in 0..hp {
            for c in 0..wp {
                for ch in 0..2 {
                    for py in 0..p {
                        for px in 0..p {
                            idx.push(b * 2 * plane + ch * plane + (r * p + py) * n_tx + c * p + px);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Token row index for each window position, windows taken on the map rolled by `-shift`.
fn window_rows(g: &Grid, ws: usize, shift: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(g.tokens());
    for b in 0..g.batch {
        for wr in 0..g.h / ws {
            for wc in 0..g.w / ws {
                for i in 0..ws {
                    for j in 0..ws {
                        let r = (wr * ws + i + shift) % g.h;
                        let c = (wc * ws + j + shift) % g.w;
                        rows.push((b * g.h + r) * g.w + c);
                    }
                }
            }
        }
    }
    rows
}

/// Additive attention mask for shifted windows, laid out `[windows · heads, n, n]`.
fn shift_mask(g: &Grid, ws: usize, shift: usize, heads: usize) -> Vec<f64> {
    let region = |x: usize, size: usize| -> usize {
        if x < size - ws {
            0
        } else if x < size - shift {
            1
        } else {
            2
        }
    };
    let n = ws * ws;
    let windows = (g.h / ws) * (g.w / ws);
    let mut per_window = Vec::with_capacity(windows * n * n);
    for wr in 0..g.h / ws {
        for wc in 0..g.w / ws {
            let labels: Vec<usize> = (0..n)
                .map(|t| {
                    let (i, j) = (t / ws, t % ws);
                    region(wr * ws + i, g.h) * 3 + region(wc * ws + j, g.w)
                })
                .collect();
            for &a in &labels {
                for &b in &labels {
                    per_window.push(if a == b { 0.0 } else { MASK_NEG });
                }
            }
        }
    }
    let mut mask = Vec::with_capacity(g.batch * windows * heads * n * n);
    for _ in 0..g.batch {
        for w in 0..windows {
            let block = &per_window[w * n * n..(w + 1) * n * n];
            for _ in 0..heads {
                mask.extend_from_slice(block);
            }
        }
    }
    mask
}

/// Splits `[windows · n, 3d]` qkv rows into `[windows · heads, n, hd]` for part 0/1/2.
fn head_split_index(windows: usize, n: usize, d: usize, heads: usize, part: usize) -> Rc<[usize]> {
    let hd = d / heads;
    let mut idx = Vec::with_capacity(windows * n * d);
    for w in 0..windows {
        for h in 0..heads {
            for t in 0..n {
                for e in 0..hd {
                    idx.push((w * n + t) * 3 * d + part * d + h * hd + e);
                }
            }
        }
    }
    idx.into()
}

/// Inverse of the head split: `[windows · heads, n, hd]` back to `[windows · n, d]`.
fn head_merge_index(windows: usize, n: usize, d: usize, heads: usize) -> Rc<[usize]> {
    let hd = d / heads;
    let mut idx = Vec::with_capacity(windows * n * d);
    for w in 0..windows {
        for t in 0..n {
            for h in 0..heads {
                for e in 0..hd {
                    idx.push(((w * heads + h) * n + t) * hd + e);
                }
            }
        }
    }
    idx.into()
}

/// 2×2 neighbourhood concatenation `[B·h·w, d] -> [B·(h/2)·(w/2), 4d]`.
fn merge_index(g: &Grid, d: usize) -> Vec<usize> {
    let (h2, w2) = (g.h / 2, g.w / 2);
    let mut idx = Vec::with_capacity(g.tokens() * d);
    for b in 0..g.batch {
        for r in 0..h2 {
            for c in 0..w2 {
                for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let row = (b * g.h + 2 * r + dr) * g.w + 2 * c + dc;
                    idx.extend((0..d).map(|e| row * d + e));
                }
            }
        }
    }
    idx
}

/// Tokens `[B·h·w, C]` to channel-major latents `[B, C, h, w]`.
fn latent_index(g: &Grid, c: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(g.tokens() * c);
    for b in 0..g.batch {
        for ch in 0..c {
            for r in 0..g.h {
                for q in 0..g.w {
                    idx.push(((b * g.h + r) * g.w + q) * c + ch);
                }
            }
        }
    }
    idx
}

fn linear(graph: &mut Graph, x: Var, prefix: &str, k: usize, n: usize, bias: bool) -> Var {
    let w = graph.p(&format!("{prefix}.weight"));
    let y = graph.tape.matmul(x, w, k, n);
    if bias {
        let b = graph.p(&format!("{prefix}.bias"));
        graph.tape.add_bias(y, b)
    } else {
        y
    }
}

fn norm(graph: &mut Graph, x: Var, prefix: &str) -> Var {
    let g = graph.p(&format!("{prefix}.gamma"));
    let b = graph.p(&format!("{prefix}.beta"));
    graph.tape.layer_norm(x, g, b)
}

fn block(
    graph: &mut Graph,
    cfg: &SwinConfig,
    prefix: &str,
    x: Var,
    grid: &Grid,
    d: usize,
    shifted: bool,
) -> Var {
    let ws = cfg.window.min(grid.h).min(grid.w);
    let shift = if shifted && grid.h.min(grid.w) > ws {
        ws / 2
    } else {
        0
    };
    let heads = cfg.heads;
    let hd = d / heads;
    let n = ws * ws;
    let windows = grid.batch * (grid.h / ws) * (grid.w / ws);

    let rows = window_rows(grid, ws, shift);
    let to_windows = expand_rows(&rows, d);
    let from_windows = invert(&to_windows);

    let h = norm(graph, x, &format!("{prefix}.norm1"));
    let h = graph.tape.gather(h, to_windows);
    let qkv = linear(graph, h, &format!("{prefix}.qkv"), d, 3 * d, true);
    let q = graph
        .tape
        .gather(qkv, head_split_index(windows, n, d, heads, 0));
    let k = graph
        .tape
        .gather(qkv, head_split_index(windows, n, d, heads, 1));
    let v = graph
        .tape
        .gather(qkv, head_split_index(windows, n, d, heads, 2));
    let scores = graph
        .tape
        .batch_matmul(q, k, windows * heads, n, hd, n, true);
    let mut scores = graph.tape.scale(scores, 1.0 / (hd as f64).sqrt());
    if shift > 0 {
        let mask = shift_mask(grid, ws, shift, heads);
        scores = graph.tape.shift(scores, &mask);
    }
    let attn = graph.tape.softmax(scores, n);
    let out = graph
        .tape
        .batch_matmul(attn, v, windows * heads, n, n, hd, false);
    let out = graph
        .tape
        .gather(out, head_merge_index(windows, n, d, heads));
    let out = linear(graph, out, &format!("{prefix}.proj"), d, d, true);
    let out = graph.tape.gather(out, from_windows);
    let x = graph.tape.add(x, out);

    let hidden = d * cfg.mlp_ratio;
    let h = norm(graph, x, &format!("{prefix}.norm2"));
    let h = linear(graph, h, &format!("{prefix}.fc1"), d, hidden, true);
    let h = graph.tape.gelu(h);
    let h = linear(graph, h, &format!("{prefix}.fc2"), hidden, d, true);
    graph.tape.add(x, h)
}

fn run_stage(
    graph: &mut Graph,
    cfg: &SwinConfig,
    side: &str,
    stage: usize,
    x: Var,
    grid: &Grid,
) -> Var {
    let d = stage_dim(cfg, stage);
    let mut x = x;
    for b in 0..cfg.depths[stage] {
        x = block(
            graph,
            cfg,
            &format!("{side}.stage{stage}.block{b}"),
            x,
            grid,
            d,
            b % 2 == 1,
        );
    }
    x
}

/// `[B, 2·n_delay·n_tx]` input to `[B, C·h·w]` latents.
pub(crate) fn encode(
    graph: &mut Graph,
    cfg: &SwinConfig,
    x: Var,
    batch: usize,
    n_delay: usize,
    n_tx: usize,
) -> Var {
    let p = cfg.patch_size;
    let p2 = 2 * p * p;
    let tokens = graph
        .tape
        .gather(x, patch_index(batch, n_delay, n_tx, p).into());
    let mut x = linear(graph, tokens, "enc.embed", p2, cfg.embed_dim, true);
    x = norm(graph, x, "enc.embed_norm");
    let stages = cfg.depths.len();
    let mut grid = Grid {
        batch,
        h: n_delay / p,
        w: n_tx / p,
    };
    for s in 0..stages {
        x = run_stage(graph, cfg, "enc", s, x, &grid);
        if s + 1 < stages {
            let d = stage_dim(cfg, s);
            x = graph.tape.gather(x, merge_index(&grid, d).into());
            x = norm(graph, x, &format!("enc.merge{s}.norm"));
            x = linear(graph, x, &format!("enc.merge{s}"), 4 * d, 2 * d, false);
            grid = Grid {
                batch,
                h: grid.h / 2,
                w: grid.w / 2,
            };
        }
    }
    let last = stage_dim(cfg, stages - 1);
    x = norm(graph, x, "enc.head_norm");
    x = linear(graph, x, "enc.head", last, cfg.latent_channels, true);
    graph
        .tape
        .gather(x, latent_index(&grid, cfg.latent_channels).into())
}

/// `[B, C·h·w]` latents back to `[B, 2·n_delay·n_tx]`.
pub(crate) fn decode(
    graph: &mut Graph,
    cfg: &SwinConfig,
    y: Var,
    batch: usize,
    n_delay: usize,
    n_tx: usize,
) -> Var {
    let p = cfg.patch_size;
    let p2 = 2 * p * p;
    let stages = cfg.depths.len();
    let (h, w) = stage_resolution(cfg, n_delay, n_tx, stages - 1);
    let mut grid = Grid { batch, h, w };
    let last = stage_dim(cfg, stages - 1);
    let c = cfg.latent_channels;

    let tokens = graph.tape.gather(y, invert(&latent_index(&grid, c)));
    let mut x = linear(graph, tokens, "dec.embed", c, last, true);
    for s in (0..stages).rev() {
        x = run_stage(graph, cfg, "dec", s, x, &grid);
        if s > 0 {
            let d = stage_dim(cfg, s);
            x = linear(graph, x, &format!("dec.expand{s}"), d, 2 * d, false);
            grid = Grid {
                batch,
                h: grid.h * 2,
                w: grid.w * 2,
            };
            x = graph.tape.gather(x, invert(&merge_index(&grid, d / 2)));
            x = norm(graph, x, &format!("dec.expand{s}.norm"));
        }
    }
    x = norm(graph, x, "dec.head_norm");
    x = linear(graph, x, "dec.head", cfg.embed_dim, p2, true);
    graph
        .tape
        .gather(x, invert(&patch_index(batch, n_delay, n_tx, p)))
}
