//! Independent scalar-loop reference implementations. Nothing here calls the
//! tape or the strided gemm; matrices are plain `Vec<Vec<f64>>`.
#![allow(dead_code)]

use blrp::params::ParamStore;
use blrp::{Direction, InitVariant, Model, ModelConfig, ProjectionSharing, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_m(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> M {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
}

pub fn to_m(t: &Tensor) -> M {
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

pub fn to_tensor(m: &M) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn max_diff(a: &M, b: &M) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    let mut worst = 0.0_f64;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len(), "column count");
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

pub fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_bias(a: &M, bias: &[f64]) -> M {
    a.iter().map(|r| r.iter().zip(bias).map(|(p, q)| p + q).collect()).collect()
}

pub fn concat(parts: &[&M]) -> M {
    parts.iter().flat_map(|p| p.iter().cloned()).collect()
}

pub fn zeros(rows: usize, cols: usize) -> M {
    vec![vec![0.0; cols]; rows]
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn layer_norm(x: &M, gamma: &[f64], beta: &[f64]) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + EPS).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) / sd * gamma[j] + beta[j]).collect()
        })
        .collect()
}

/// Softmax over the entries with `valid[j]`; the rest are 0.
pub fn masked_softmax(row: &[f64], valid: &[bool]) -> Vec<f64> {
    let max = row.iter().zip(valid).filter(|(_, &v)| v).map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().zip(valid).map(|(x, &v)| if v { (x - max).exp() } else { 0.0 }).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Multi-head attention, one query row and one head at a time.
pub fn mha(q: &M, k: &M, v: &M, heads: usize, valid: &[bool]) -> M {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = zeros(q.len(), d);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = masked_softmax(&scores, valid);
            for c in cols.clone() {
                out[i][c] = w.iter().zip(v).map(|(wj, vj)| wj * vj[c]).sum();
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct BlockRef {
    pub heads: usize,
    pub w_q: M,
    pub w_k: M,
    pub w_v: M,
    pub w_o: M,
    pub norm_q: (Vec<f64>, Vec<f64>),
    pub norm_kv: Option<(Vec<f64>, Vec<f64>)>,
    pub norm_ff: (Vec<f64>, Vec<f64>),
    pub ffn_in: M,
    pub ffn_in_bias: Vec<f64>,
    pub ffn_out: M,
    pub ffn_out_bias: Vec<f64>,
}

fn named(store: &ParamStore, name: &str) -> M {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    to_m(store.get(id))
}

fn named_row(store: &ParamStore, name: &str) -> Vec<f64> {
    named(store, name).remove(0)
}

impl BlockRef {
    pub fn from_store(store: &ParamStore, prefix: &str, heads: usize) -> Self {
        let norm = |n: &str| (named_row(store, &format!("{prefix}.{n}.gamma")), named_row(store, &format!("{prefix}.{n}.beta")));
        Self {
            heads,
            w_q: named(store, &format!("{prefix}.w_q")),
            w_k: named(store, &format!("{prefix}.w_k")),
            w_v: named(store, &format!("{prefix}.w_v")),
            w_o: named(store, &format!("{prefix}.w_o")),
            norm_q: norm("norm_q"),
            norm_kv: store.find(&format!("{prefix}.norm_kv.gamma")).map(|_| norm("norm_kv")),
            norm_ff: norm("norm_ff"),
            ffn_in: named(store, &format!("{prefix}.ffn_in")),
            ffn_in_bias: named_row(store, &format!("{prefix}.ffn_in_bias")),
            ffn_out: named(store, &format!("{prefix}.ffn_out")),
            ffn_out_bias: named_row(store, &format!("{prefix}.ffn_out_bias")),
        }
    }

    /// `kv = None` is self-attention over `x`.
    pub fn apply(&self, x: &M, kv: Option<&M>, valid: &[bool]) -> M {
        let xn = layer_norm(x, &self.norm_q.0, &self.norm_q.1);
        let kvn = match kv {
            None => xn.clone(),
            Some(kv) => {
                let (g, b) = self.norm_kv.as_ref().expect("cross block");
                layer_norm(kv, g, b)
            }
        };
        let att = mha(&matmul(&xn, &self.w_q), &matmul(&kvn, &self.w_k), &matmul(&kvn, &self.w_v), self.heads, valid);
        let h = add(x, &matmul(&att, &self.w_o));
        let hn = layer_norm(&h, &self.norm_ff.0, &self.norm_ff.1);
        let inner: M = add_bias(&matmul(&hn, &self.ffn_in), &self.ffn_in_bias)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        add(&h, &add_bias(&matmul(&inner, &self.ffn_out), &self.ffn_out_bias))
    }
}

/// Dynamic projection: per basis column, softmax over valid tokens of
/// `x·w`, then that weighted average of token rows.
pub fn phi(x: &M, w: &M, valid: &[bool]) -> M {
    let l = w[0].len();
    let d = x[0].len();
    (0..l)
        .map(|c| {
            let scores: Vec<f64> = x.iter().map(|row| row.iter().zip(w).map(|(xv, wr)| xv * wr[c]).sum()).collect();
            let weights = masked_softmax(&scores, valid);
            (0..d).map(|j| x.iter().zip(&weights).map(|(row, wt)| wt * row[j]).sum()).collect()
        })
        .collect()
}

/// Every state produced while running the reference model.
#[derive(Clone, Debug, Default)]
pub struct RefTrace {
    pub l_init_f: Option<M>,
    pub l_init_b: Option<M>,
    pub x_f: Vec<M>,
    pub l_f: Vec<M>,
    pub x_b: Vec<M>,
    pub l_b: Vec<M>,
    pub l_final: M,
    pub logits: Vec<f64>,
}

/// Hand-stepped model: the recurrences are written out case by case
/// (first/later step forward, last/earlier step backward).
pub fn reference_model(model: &Model, tokens: &[usize]) -> RefTrace {
    let cfg = model.config();
    let store = model.params();
    let (t, d, l) = (cfg.t, cfg.d, cfg.l);
    let tok = named(store, "embed.token");
    let pos = named(store, "embed.position");

    let mut segments: Vec<M> = Vec::new();
    let mut masks: Vec<Vec<bool>> = Vec::new();
    for chunk in tokens.chunks(t) {
        let mut seg = zeros(t, d);
        let mut mask = vec![false; t];
        for (j, &id) in chunk.iter().enumerate() {
            seg[j] = tok[id].iter().zip(&pos[j]).map(|(a, b)| a + b).collect();
            mask[j] = true;
        }
        segments.push(seg);
        masks.push(mask);
    }
    let n_seg = segments.len();
    let self_blocks: Vec<BlockRef> =
        (0..cfg.self_layers).map(|i| BlockRef::from_store(store, &format!("self.{i}"), cfg.heads)).collect();
    let enc: Vec<M> = segments
        .iter()
        .zip(&masks)
        .map(|(s, m)| self_blocks.iter().fold(s.clone(), |h, b| b.apply(&h, None, m)))
        .collect();

    let all_x = concat(&segments.iter().collect::<Vec<_>>());
    let all_valid: Vec<bool> = masks.concat();
    let both_project = cfg.direction == Direction::Bidirectional
        && cfg.fwd_init.uses_projection()
        && cfg.bwd_init.uses_projection()
        && cfg.sharing != ProjectionSharing::SeparateWeights;
    let init_for = |variant: InitVariant, pass: &str| -> M {
        match variant {
            InitVariant::Blank => zeros(l, d),
            InitVariant::PosEmb1D => named(store, &format!("latent.{pass}.table")),
            InitVariant::DynProjInitOnly | InitVariant::DynProjResidual => {
                let w = if both_project { named(store, "latent.phi") } else { named(store, &format!("latent.{pass}.phi")) };
                phi(&all_x, &w, &all_valid)
            }
        }
    };
    let all_latent = vec![true; l];
    let mut tr = RefTrace::default();

    if cfg.direction.has_forward() {
        let init = init_for(cfg.fwd_init, "fwd");
        let res = cfg.fwd_init.is_residual();
        let cx = BlockRef::from_store(store, "fwd.cross_x", cfg.heads);
        let cl = BlockRef::from_store(store, "fwd.cross_l", cfg.heads);
        for i in 0..n_seg {
            let (x, mut lat) = if i == 0 {
                let x = cx.apply(&enc[0], Some(&init), &all_latent);
                let lat = cl.apply(&init, Some(&x), &masks[0]);
                (x, lat)
            } else {
                let prev = &tr.l_f[i - 1];
                let x = cx.apply(&enc[i], Some(prev), &all_latent);
                let (keys, valid) = if res {
                    (concat(&[&x, &init]), [masks[i].clone(), all_latent.clone()].concat())
                } else {
                    (x.clone(), masks[i].clone())
                };
                let lat = cl.apply(prev, Some(&keys), &valid);
                (x, lat)
            };
            if res {
                lat = add(&lat, &init);
            }
            tr.x_f.push(x);
            tr.l_f.push(lat);
        }
        tr.l_init_f = Some(init);
    }

    if cfg.direction.has_backward() {
        let init = init_for(cfg.bwd_init, "bwd");
        let res = cfg.bwd_init.is_residual();
        let bidir = cfg.direction == Direction::Bidirectional;
        let cx = BlockRef::from_store(store, "bwd.cross_x", cfg.heads);
        let cl = BlockRef::from_store(store, "bwd.cross_l", cfg.heads);
        let mut x_b: Vec<Option<M>> = vec![None; n_seg];
        let mut l_b: Vec<Option<M>> = vec![None; n_seg];
        for i in (0..n_seg).rev() {
            let mut keys: Vec<&M> = Vec::new();
            let mut valid: Vec<bool> = Vec::new();
            let lat = if i == n_seg - 1 {
                let x = cx.apply(&enc[i], Some(&init), &all_latent);
                let query = if bidir { tr.l_f[n_seg - 1].clone() } else { init.clone() };
                if bidir {
                    keys.push(&tr.x_f[i]);
                    valid.extend(&masks[i]);
                }
                x_b[i] = Some(x);
                keys.push(x_b[i].as_ref().unwrap());
                valid.extend(&masks[i]);
                cl.apply(&query, Some(&concat(&keys)), &valid)
            } else {
                let prev = l_b[i + 1].clone().unwrap();
                let x = cx.apply(&enc[i], Some(&prev), &all_latent);
                if bidir {
                    keys.push(&tr.x_f[i]);
                    valid.extend(&masks[i]);
                }
                x_b[i] = Some(x);
                keys.push(x_b[i].as_ref().unwrap());
                valid.extend(&masks[i]);
                if res {
                    keys.push(&init);
                    valid.extend(&all_latent);
                }
                cl.apply(&prev, Some(&concat(&keys)), &valid)
            };
            l_b[i] = Some(if res { add(&lat, &init) } else { lat });
        }
        tr.x_b = x_b.into_iter().map(Option::unwrap).collect();
        tr.l_b = l_b.into_iter().map(Option::unwrap).collect();
        tr.l_init_b = Some(init);
    }

    tr.l_final = if cfg.direction.has_backward() { tr.l_b[0].clone() } else { tr.l_f[n_seg - 1].clone() };
    let pooled: Vec<f64> = (0..d).map(|j| tr.l_final.iter().map(|r| r[j]).sum::<f64>() / l as f64).collect();
    let hidden: Vec<f64> = add_bias(&matmul(&vec![pooled], &named(store, "head.hidden")), &named_row(store, "head.hidden_bias"))
        .remove(0)
        .into_iter()
        .map(gelu)
        .collect();
    tr.logits = add_bias(&matmul(&vec![hidden], &named(store, "head.out")), &named_row(store, "head.out_bias")).remove(0);
    tr
}

pub fn toy_config(direction: Direction, fwd: InitVariant, bwd: InitVariant, sharing: ProjectionSharing) -> ModelConfig {
    ModelConfig {
        vocab_size: 17,
        d: 8,
        h_ff: 16,
        heads: 2,
        t: 4,
        l: 3,
        self_layers: 2,
        classes: 10,
        direction,
        fwd_init: fwd,
        bwd_init: bwd,
        sharing,
        seed: 21,
    }
}

/// A model whose classifier output layer is randomized so logits depend on
/// every upstream parameter.
pub fn live_model(config: ModelConfig) -> Model {
    let mut model = Model::new(config).unwrap();
    let id = model.layout().head.out;
    let (r, c) = (model.params().get(id).rows(), model.params().get(id).cols());
    let mut g = rng(99);
    *model.params_mut().get_mut(id) = to_tensor(&random_m(&mut g, r, c, 0.5));
    let bias = model.layout().head.out_bias;
    *model.params_mut().get_mut(bias) = to_tensor(&random_m(&mut g, 1, c, 0.1));
    model
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..vocab)).collect()
}

pub fn all_variant_configs() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for direction in [Direction::Forward, Direction::Backward, Direction::Bidirectional] {
        for fwd in InitVariant::ALL {
            for bwd in InitVariant::ALL {
                for sharing in [
                    ProjectionSharing::SharedSingle,
                    ProjectionSharing::SiameseSharedWeights,
                    ProjectionSharing::SeparateWeights,
                ] {
                    out.push(toy_config(direction, fwd, bwd, sharing));
                }
            }
        }
    }
    out
}

/// Recursive-descent evaluator over the documented id layout:
/// 1..=10 digits 0-9, 11 MAX, 12 MIN, 13 MED, 14 SUMMOD, 15 `[`, 16 `]`.
struct Evaluator<'a> {
    ids: &'a [usize],
    pos: usize,
}

impl Evaluator<'_> {
    fn expr(&mut self) -> u32 {
        let id = self.ids[self.pos];
        self.pos += 1;
        match id {
            1..=10 => (id - 1) as u32,
            15 => {
                let op = self.ids[self.pos];
                self.pos += 1;
                let mut args = Vec::new();
                while self.ids[self.pos] != 16 {
                    args.push(self.expr());
                }
                self.pos += 1;
                match op {
                    11 => *args.iter().max().unwrap(),
                    12 => *args.iter().min().unwrap(),
                    13 => {
                        args.sort_unstable();
                        let n = args.len();
                        if n % 2 == 1 {
                            args[n / 2]
                        } else {
                            (args[n / 2 - 1] + args[n / 2]) / 2
                        }
                    }
                    14 => args.iter().sum::<u32>() % 10,
                    other => panic!("unexpected operator id {other}"),
                }
            }
            other => panic!("unexpected id {other} at {}", self.pos - 1),
        }
    }
}

pub fn listops_value(ids: &[usize]) -> u32 {
    let mut e = Evaluator { ids, pos: 0 };
    let v = e.expr();
    assert_eq!(e.pos, ids.len(), "trailing tokens");
    v
}

pub fn listops_depth(ids: &[usize]) -> usize {
    let (mut cur, mut best) = (0usize, 0usize);
    for &id in ids {
        if id == 15 {
            cur += 1;
            best = best.max(cur);
        } else if id == 16 {
            cur -= 1;
        }
    }
    best
}
