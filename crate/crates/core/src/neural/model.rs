//! The exchangeable transformer and its positional baselines.
//!
//! Each pair `i` becomes two tokens: an auxiliary token `a_i = (x_i, 0, 0)`
//! and a target token `g_i = (x_i, y_i, 1)`, interleaved as
//! `[a_1, g_1, a_2, g_2, ...]`. Predictions are read at auxiliary tokens.

use std::collections::HashMap;
use std::rc::Rc;

use super::config::{Arch, ExtConfig, PosMode};
use super::tape::{Graph, Var};
use super::tensor::{gelu, layer_norm_row, Tensor};
use crate::blr::Trajectory;
use crate::error::{check_dim, Error, Result};
use crate::mathkit::{Gaussian1, RngStream};

/// Attention permissions for `t` pairs, row-major `2t × 2t`; entry
/// `(r, c)` is true when token `r` may attend to token `c`.
///
/// Exchangeable: `a_i` attends `{a_i} ∪ {g_j : j < i}` and `g_i` attends
/// only itself. Letting `g_i` also see earlier targets would make target
/// states depend on their order from the second layer on, and predictions
/// would no longer be invariant to permutations of the context.
pub fn build_mask(arch: Arch, t: usize) -> Vec<bool> {
    let n = 2 * t;
    let mut m = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            m[r * n + c] = match arch {
                Arch::Exchangeable => c == r || (r % 2 == 0 && c % 2 == 1 && c / 2 < r / 2),
                Arch::GptStyle => c <= r,
            };
        }
    }
    m
}

#[derive(Clone, Debug)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: Vec<(usize, usize)>,
    pos: Option<usize>,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zero,
    One,
    /// Normal with variance `1 / fan_in`.
    Scaled(usize),
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn layout(cfg: &ExtConfig) -> (Layout, Vec<Spec>) {
    let mut specs = Vec::new();
    let mut add = |name: String, rows: usize, cols: usize, init: Init| {
        specs.push(Spec { name, rows, cols, init });
        specs.len() - 1
    };
    let dm = cfg.d_model;
    let mut embed = Vec::new();
    for l in 0..cfg.n_embed_layers {
        let fan_in = if l == 0 { cfg.token_width() } else { dm };
        let w = add(format!("embed.{l}.w"), fan_in, dm, Init::Scaled(fan_in));
        let b = add(format!("embed.{l}.b"), 1, dm, Init::Zero);
        embed.push((w, b));
    }
    let pos = (cfg.pos_mode == PosMode::Learned)
        .then(|| add("pos.table".into(), 2 * cfg.max_pairs, dm, Init::Scaled(dm)));
    let mut blocks = Vec::new();
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("block.{l}.{s}");
        blocks.push(BlockIdx {
            ln1_g: add(p("ln1.g"), 1, dm, Init::One),
            ln1_b: add(p("ln1.b"), 1, dm, Init::Zero),
            wq: add(p("attn.wq"), dm, dm, Init::Scaled(dm)),
            wk: add(p("attn.wk"), dm, dm, Init::Scaled(dm)),
            wv: add(p("attn.wv"), dm, dm, Init::Scaled(dm)),
            wo: add(p("attn.wo"), dm, dm, Init::Scaled(dm)),
            bo: add(p("attn.bo"), 1, dm, Init::Zero),
            ln2_g: add(p("ln2.g"), 1, dm, Init::One),
            ln2_b: add(p("ln2.b"), 1, dm, Init::Zero),
            w1: add(p("ff.w1"), dm, cfg.d_ff, Init::Scaled(dm)),
            b1: add(p("ff.b1"), 1, cfg.d_ff, Init::Zero),
            w2: add(p("ff.w2"), cfg.d_ff, dm, Init::Scaled(cfg.d_ff)),
            b2: add(p("ff.b2"), 1, dm, Init::Zero),
        });
    }
    let lnf_g = add("final.ln.g".into(), 1, dm, Init::One);
    let lnf_b = add("final.ln.b".into(), 1, dm, Init::Zero);
    let head_w = add("head.w".into(), dm, 2, Init::Zero);
    let head_b = add("head.b".into(), 1, 2, Init::Zero);
    let layout = Layout { embed, pos, blocks, lnf_g, lnf_b, head_w, head_b };
    (layout, specs)
}

/// Fixed (non-learned) positional vector for token position `p`.
fn fixed_position(mode: PosMode, p: usize, dm: usize) -> Option<Vec<f64>> {
    match mode {
        PosMode::None | PosMode::Learned => None,
        PosMode::Sinusoidal => Some(
            (0..dm)
                .map(|k| {
                    let freq = 10000f64.powf(-((k / 2 * 2) as f64) / dm as f64);
                    let a = p as f64 * freq;
                    if k % 2 == 0 {
                        a.sin()
                    } else {
                        a.cos()
                    }
                })
                .collect(),
        ),
        PosMode::Alternating01 => Some((0..dm).map(|k| ((p + k) % 2) as f64).collect()),
    }
}

/// Replaces the `y` entry of selected target tokens by tape values, so that
/// gradients flow through generated outcomes.
pub(crate) struct YOverride {
    /// `k × 1` values.
    pub values: Var,
    /// Global pair index (over the stacked batch) of each value.
    pub pairs: Vec<usize>,
}

/// Tape variables for one forward pass.
pub(crate) struct ForwardVars {
    /// `n_pairs × 1` predictive means, in stacked pair order.
    pub mu: Var,
    /// `n_pairs × 1` clamped log-variances.
    pub logvar: Var,
}

#[derive(Clone, Debug)]
pub struct ExtModel {
    config: ExtConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

impl ExtModel {
    /// Fresh model: scaled-normal weights, unit layer-norm gains, zero head.
    pub fn new(config: ExtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        let mut rng = RngStream::new(seed, 0x1417);
        let params = specs
            .iter()
            .map(|s| match s.init {
                Init::Zero => Tensor::zeros(s.rows, s.cols),
                Init::One => Tensor::filled(s.rows, s.cols, 1.0),
                Init::Scaled(fan_in) => {
                    let sd = (1.0 / fan_in as f64).sqrt();
                    Tensor::from_vec(s.rows, s.cols, (0..s.rows * s.cols).map(|_| sd * rng.normal()).collect())
                }
            })
            .collect();
        let names = specs.into_iter().map(|s| s.name).collect();
        Ok(Self { config, names, params, layout })
    }

    /// Rebuilds a model from a flat parameter vector in declaration order.
    pub fn from_flat(config: ExtConfig, flat: &[f64]) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        check_dim(m.num_params(), flat.len())?;
        m.set_flat(flat);
        Ok(m)
    }

    /// Overwrites the output head with `N(0, scale²)` entries. Untrained
    /// models have a zero head, which hides everything behind it.
    pub fn randomize_head(&mut self, scale: f64, rng: &mut RngStream) {
        for idx in [self.layout.head_w, self.layout.head_b] {
            self.params[idx].data.iter_mut().for_each(|v| *v = scale * rng.normal());
        }
    }

    pub fn config(&self) -> &ExtConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Errors when `t` pairs exceed the positional table.
    pub fn check_pairs(&self, t: usize) -> Result<()> {
        match self.config.pair_limit() {
            Some(max) if t > max => Err(Error::ContextTooLong { len: t, max }),
            _ => Ok(()),
        }
    }

    pub(crate) fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone())).collect()
    }

    /// Builds the forward pass for `seqs` stacked in order.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        pv: &[Var],
        seqs: &[&Trajectory],
        y_override: Option<&YOverride>,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let (d, dm, width) = (cfg.d, cfg.d_model, cfg.token_width());
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut n_pairs = 0;
        for s in seqs {
            check_dim(d, s.dim())?;
            if s.is_empty() {
                return Err(Error::Contract("empty trajectory in batch".into()));
            }
            self.check_pairs(s.len())?;
            offsets.push(n_pairs);
            n_pairs += s.len();
        }
        let rows = 2 * n_pairs;

        let mut input = Tensor::zeros(rows, width);
        for (s, &off) in seqs.iter().zip(&offsets) {
            for i in 0..s.len() {
                let (ra, rt) = (2 * (off + i), 2 * (off + i) + 1);
                input.row_mut(ra)[..d].copy_from_slice(s.x(i));
                let row = input.row_mut(rt);
                row[..d].copy_from_slice(s.x(i));
                row[d] = s.y(i);
                row[d + 1] = 1.0;
            }
        }
        let mut h = if let Some(ov) = y_override {
            for &p in &ov.pairs {
                *input.at_mut(2 * p + 1, d) = 0.0;
            }
            let base = g.leaf(input);
            let target_rows: Rc<[usize]> = ov.pairs.iter().map(|p| 2 * p + 1).collect();
            let ycol = g.scatter_rows(ov.values, target_rows, rows);
            let left = g.leaf(Tensor::zeros(rows, d));
            let right = g.leaf(Tensor::zeros(rows, 1));
            let pad = g.concat_cols(&[left, ycol, right]);
            g.add(base, pad)
        } else {
            g.leaf(input)
        };

        for (l, &(w, b)) in self.layout.embed.iter().enumerate() {
            h = g.affine(h, pv[w], pv[b]);
            if l + 1 < self.layout.embed.len() {
                h = g.gelu(h);
            }
        }

        let positions = || {
            seqs.iter()
                .zip(&offsets)
                .flat_map(|(s, _)| 0..2 * s.len())
                .collect::<Vec<usize>>()
        };
        if let Some(table) = self.layout.pos {
            let pos = g.select_rows(pv[table], positions().into());
            h = g.add(h, pos);
        } else if cfg.pos_mode != PosMode::None {
            let mut pe = Tensor::zeros(rows, dm);
            for (r, p) in positions().into_iter().enumerate() {
                let v = fixed_position(cfg.pos_mode, p, dm).expect("fixed mode");
                pe.row_mut(r).copy_from_slice(&v);
            }
            let pe = g.leaf(pe);
            h = g.add(h, pe);
        }

        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut masks: HashMap<usize, Rc<[bool]>> = HashMap::new();
        for blk in &self.layout.blocks {
            let n1 = g.layer_norm(h, pv[blk.ln1_g], pv[blk.ln1_b]);
            let q = g.matmul(n1, pv[blk.wq]);
            let k = g.matmul(n1, pv[blk.wk]);
            let v = g.matmul(n1, pv[blk.wv]);
            let mut per_seq = Vec::with_capacity(seqs.len());
            for (s, &off) in seqs.iter().zip(&offsets) {
                let n = 2 * s.len();
                let r0 = 2 * off;
                let mask = masks
                    .entry(s.len())
                    .or_insert_with(|| build_mask(cfg.arch, s.len()).into())
                    .clone();
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for hd in 0..cfg.n_heads {
                    let c0 = hd * dh;
                    let qs = g.slice(q, r0, n, c0, dh);
                    let ks = g.slice(k, r0, n, c0, dh);
                    let vs = g.slice(v, r0, n, c0, dh);
                    let sc = g.matmul_t(qs, false, ks, true);
                    let sc = g.scale(sc, inv_sqrt);
                    let p = g.masked_softmax(sc, mask.clone());
                    heads.push(g.matmul(p, vs));
                }
                per_seq.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) });
            }
            let att = if per_seq.len() == 1 { per_seq[0] } else { g.concat_rows(&per_seq) };
            let att = g.affine(att, pv[blk.wo], pv[blk.bo]);
            h = g.add(h, att);
            let n2 = g.layer_norm(h, pv[blk.ln2_g], pv[blk.ln2_b]);
            let f = g.affine(n2, pv[blk.w1], pv[blk.b1]);
            let f = g.gelu(f);
            let f = g.affine(f, pv[blk.w2], pv[blk.b2]);
            h = g.add(h, f);
        }

        let aux_rows: Rc<[usize]> = (0..n_pairs).map(|p| 2 * p).collect();
        let aux = g.select_rows(h, aux_rows);
        let nf = g.layer_norm(aux, pv[self.layout.lnf_g], pv[self.layout.lnf_b]);
        let out = g.affine(nf, pv[self.layout.head_w], pv[self.layout.head_b]);
        let mu = g.slice(out, 0, n_pairs, 0, 1);
        let raw = g.slice(out, 0, n_pairs, 1, 1);
        let (lo, hi) = cfg.logvar_clamp;
        let logvar = g.clamp(raw, lo, hi);
        Ok(ForwardVars { mu, logvar })
    }

    /// Per-pair predictives for each trajectory: entry `i` conditions on
    /// pairs before `i` and on `x_i`.
    pub fn forward(&self, batch: &[Trajectory]) -> Result<Vec<Vec<Gaussian1>>> {
        let mut g = Graph::new();
        let pv = self.leaves(&mut g);
        let seqs: Vec<&Trajectory> = batch.iter().collect();
        let fv = self.forward_graph(&mut g, &pv, &seqs, None)?;
        let (mu, lv) = (g.value(fv.mu), g.value(fv.logvar));
        let mut out = Vec::with_capacity(batch.len());
        let mut k = 0;
        for s in batch {
            out.push(
                (0..s.len())
                    .map(|i| {
                        let p = Gaussian1 { mean: mu.data[k + i], var: lv.data[k + i].exp() };
                        p.validate().map(|_| p)
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
            k += s.len();
        }
        Ok(out)
    }

    /// An incremental predictor with cached keys and values.
    pub fn session(&self) -> ExtSession<'_> {
        ExtSession {
            model: self,
            n_pairs: 0,
            cache: vec![KvCache::default(); self.config.n_layers],
        }
    }
}

#[derive(Clone, Default, Debug)]
struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
}

/// `x · w (+ b)` for a single row.
fn affine_row(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let mut out = match b {
        Some(b) => b.data.clone(),
        None => vec![0.0; w.cols],
    };
    for (i, &xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

/// Incremental evaluation of an [`ExtModel`], one token at a time.
///
/// Exchangeable models cache only target tokens, since auxiliary tokens
/// are never attended by anything else, and targets themselves ignore the
/// cache. GPT-style models cache every token and every token reads it.
#[derive(Clone)]
pub struct ExtSession<'a> {
    model: &'a ExtModel,
    n_pairs: usize,
    cache: Vec<KvCache>,
}

impl ExtSession<'_> {
    pub fn len(&self) -> usize {
        self.n_pairs
    }

    pub fn is_empty(&self) -> bool {
        self.n_pairs == 0
    }

    /// Predictive for the next pair at covariate `x`.
    pub fn predict(&self, x: &[f64]) -> Result<Gaussian1> {
        check_dim(self.model.config.d, x.len())?;
        self.model.check_pairs(self.n_pairs + 1)?;
        let (h, _) = self.run_token(x, None, 2 * self.n_pairs, true)?;
        self.read_head(&h)
    }

    /// Appends the pair `(x, y)` to the context.
    pub fn observe(&mut self, x: &[f64], y: f64) -> Result<()> {
        check_dim(self.model.config.d, x.len())?;
        self.model.check_pairs(self.n_pairs + 1)?;
        let pos = 2 * self.n_pairs;
        if self.model.config.arch == Arch::GptStyle {
            let (_, kv) = self.run_token(x, None, pos, true)?;
            self.push(&kv);
            let (_, kv) = self.run_token(x, Some(y), pos + 1, true)?;
            self.push(&kv);
        } else {
            let (_, kv) = self.run_token(x, Some(y), pos + 1, false)?;
            self.push(&kv);
        }
        self.n_pairs += 1;
        Ok(())
    }

    fn push(&mut self, kv: &[(Vec<f64>, Vec<f64>)]) {
        for (c, (k, v)) in self.cache.iter_mut().zip(kv) {
            c.keys.extend_from_slice(k);
            c.values.extend_from_slice(v);
        }
    }

    /// Runs one token through the stack, attending to the cache when
    /// `use_cache` is set; returns the final hidden state and the per-layer
    /// key/value rows of the token.
    #[allow(clippy::type_complexity)]
    fn run_token(
        &self,
        x: &[f64],
        y: Option<f64>,
        pos: usize,
        use_cache: bool,
    ) -> Result<(Vec<f64>, Vec<(Vec<f64>, Vec<f64>)>)> {
        let m = self.model;
        let cfg = &m.config;
        let p = &m.params;
        let (d, dm) = (cfg.d, cfg.d_model);
        let mut h = vec![0.0; cfg.token_width()];
        h[..d].copy_from_slice(x);
        if let Some(y) = y {
            h[d] = y;
            h[d + 1] = 1.0;
        }
        for (l, &(w, b)) in m.layout.embed.iter().enumerate() {
            h = affine_row(&h, &p[w], Some(&p[b]));
            if l + 1 < m.layout.embed.len() {
                h.iter_mut().for_each(|v| *v = gelu(*v));
            }
        }
        if let Some(table) = m.layout.pos {
            for (a, b) in h.iter_mut().zip(p[table].row(pos)) {
                *a += b;
            }
        } else if let Some(pe) = fixed_position(cfg.pos_mode, pos, dm) {
            for (a, b) in h.iter_mut().zip(pe) {
                *a += b;
            }
        }
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut kvs = Vec::with_capacity(cfg.n_layers);
        let mut n1 = vec![0.0; dm];
        for (blk, cache) in m.layout.blocks.iter().zip(&self.cache) {
            layer_norm_row(&h, &p[blk.ln1_g].data, &p[blk.ln1_b].data, &mut n1);
            let q = affine_row(&n1, &p[blk.wq], None);
            let k = affine_row(&n1, &p[blk.wk], None);
            let v = affine_row(&n1, &p[blk.wv], None);
            let n_cached = if use_cache { cache.keys.len() / dm } else { 0 };
            let mut att = vec![0.0; dm];
            let mut scores = vec![0.0; n_cached + 1];
            for hd in 0..cfg.n_heads {
                let cols = hd * dh..(hd + 1) * dh;
                let dot = |key: &[f64]| -> f64 {
                    q[cols.clone()].iter().zip(&key[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt
                };
                for j in 0..n_cached {
                    scores[j] = dot(&cache.keys[j * dm..(j + 1) * dm]);
                }
                scores[n_cached] = dot(&k);
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for j in 0..=n_cached {
                    let w = scores[j] / total;
                    let row = if j < n_cached { &cache.values[j * dm..(j + 1) * dm] } else { &v[..] };
                    for c in cols.clone() {
                        att[c] += w * row[c];
                    }
                }
            }
            let o = affine_row(&att, &p[blk.wo], Some(&p[blk.bo]));
            h.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let mut n2 = vec![0.0; dm];
            layer_norm_row(&h, &p[blk.ln2_g].data, &p[blk.ln2_b].data, &mut n2);
            let mut f = affine_row(&n2, &p[blk.w1], Some(&p[blk.b1]));
            f.iter_mut().for_each(|v| *v = gelu(*v));
            let f = affine_row(&f, &p[blk.w2], Some(&p[blk.b2]));
            h.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
            kvs.push((k, v));
        }
        Ok((h, kvs))
    }

    fn read_head(&self, h: &[f64]) -> Result<Gaussian1> {
        let m = self.model;
        let mut nf = vec![0.0; h.len()];
        layer_norm_row(h, &m.params[m.layout.lnf_g].data, &m.params[m.layout.lnf_b].data, &mut nf);
        let out = affine_row(&nf, &m.params[m.layout.head_w], Some(&m.params[m.layout.head_b]));
        let (lo, hi) = m.config.logvar_clamp;
        let g = Gaussian1 { mean: out[0], var: out[1].clamp(lo, hi).exp() };
        if !g.mean.is_finite() {
            return Err(Error::NonFinite("model mean".into()));
        }
        Ok(g)
    }
}
