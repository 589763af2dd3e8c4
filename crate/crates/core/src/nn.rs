//! Parameter storage, layers and the Adam optimizer.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::tensor::Mat;

/// Named groups of parameters. Freezing and checkpoint sections work at this
/// granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Recurrent,
    Encoder,
    Prior,
    Decoder,
    TipHead,
    Actor,
    Critic,
    LogStd,
}

impl ParamGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Recurrent => "recurrent",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Prior => "prior",
            ParamGroup::Decoder => "decoder",
            ParamGroup::TipHead => "tip_head",
            ParamGroup::Actor => "actor",
            ParamGroup::Critic => "critic",
            ParamGroup::LogStd => "log_std",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Registers every tensor as a leaf of `g`, in entry order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|e| g.leaf(e.value.clone())).collect()
    }

    pub fn grads(g: &Graph, vars: &[Var]) -> Vec<Mat> {
        vars.iter().map(|&v| g.grad(v)).collect()
    }

    pub fn groups(&self) -> BTreeSet<ParamGroup> {
        self.entries.iter().map(|e| e.group).collect()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        self.digest_filtered(|_| true)
    }

    pub fn group_digest(&self, group: ParamGroup) -> String {
        self.digest_filtered(|g| g == group)
    }

    fn digest_filtered(&self, keep: impl Fn(ParamGroup) -> bool) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| keep(e.group)) {
            h.update(e.name.as_bytes());
            h.update((e.value.rows as u64).to_le_bytes());
            h.update((e.value.cols as u64).to_le_bytes());
            for v in &e.value.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Euclidean distance between two stores with identical layout.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        assert_eq!(self.entries.len(), other.entries.len(), "store layout mismatch");
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| {
                a.value
                    .data
                    .iter()
                    .zip(&b.value.data)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Mat::from_vec(rows, cols, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseIdx {
    pub weight: usize,
    pub bias: usize,
}

/// Multilayer perceptron with ELU hidden activations and a linear output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseIdx>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        sizes: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseIdx {
                weight: store.add(format!("{name}.{i}.weight"), group, glorot(w[1], w[0], rng)),
                bias: store.add(format!("{name}.{i}.bias"), group, Mat::zeros(1, w[1])),
            })
            .collect();
        Self {
            layers,
            in_dim: sizes[0],
            out_dim: *sizes.last().unwrap(),
        }
    }

    /// Scales the final layer's weights; small output layers keep initial
    /// predictions near zero.
    pub fn scale_output(&self, store: &mut ParamStore, k: f64) {
        let last = self.layers.last().unwrap();
        for v in store.entries[last.weight].value.data.iter_mut() {
            *v *= k;
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let mut h = x;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = g.linear(h, vars[l.weight], vars[l.bias]);
            if i + 1 < n {
                h = g.elu(h);
            }
        }
        h
    }

    /// Gradient-free forward pass reading parameters in place.
    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Mat {
        let mut h = x.clone();
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = affine(&h, &store.entries[l.weight].value, &store.entries[l.bias].value);
            if i + 1 < n {
                h = h.map(elu);
            }
        }
        h
    }
}

fn affine(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = x.matmul_t(w);
    for r in 0..y.rows {
        for (o, bv) in y.row_mut(r).iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    y
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Gated recurrent cell:
///
/// ```text
/// r  = σ(Wr x + Ur h + br)
/// u  = σ(Wu x + Uu h + bu)
/// n  = tanh(Wn x + r ⊙ (Un h) + bn)
/// h' = n + u ⊙ (h − n)
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruCell {
    pub input_weight: usize,
    pub hidden_weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            input_weight: store.add(format!("{name}.input_weight"), group, glorot(3 * hidden, in_dim, rng)),
            hidden_weight: store.add(format!("{name}.hidden_weight"), group, glorot(3 * hidden, hidden, rng)),
            bias: store.add(format!("{name}.bias"), group, Mat::zeros(1, 3 * hidden)),
            in_dim,
            hidden,
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let gx = g.linear(x, vars[self.input_weight], vars[self.bias]);
        let gh = g.matmul_t(h, vars[self.hidden_weight]);
        let xr = g.slice_cols(gx, 0, hd);
        let xu = g.slice_cols(gx, hd, hd);
        let xn = g.slice_cols(gx, 2 * hd, hd);
        let hr = g.slice_cols(gh, 0, hd);
        let hu = g.slice_cols(gh, hd, hd);
        let hn = g.slice_cols(gh, 2 * hd, hd);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let u = g.add(xu, hu);
        let u = g.sigmoid(u);
        let rh = g.mul(r, hn);
        let n = g.add(xn, rh);
        let n = g.tanh(n);
        let diff = g.sub(h, n);
        let gated = g.mul(u, diff);
        g.add(n, gated)
    }

    /// Gradient-free step, bit-identical to [`GruCell::forward`].
    pub fn apply(&self, store: &ParamStore, x: &Mat, h: &Mat) -> Mat {
        let hd = self.hidden;
        let gx = affine(x, &store.entries[self.input_weight].value, &store.entries[self.bias].value);
        let gh = h.matmul_t(&store.entries[self.hidden_weight].value);
        let mut out = Mat::zeros(h.rows, hd);
        for b in 0..h.rows {
            let (gxr, ghr, hr) = (gx.row(b), gh.row(b), h.row(b));
            for (k, o) in out.row_mut(b).iter_mut().enumerate() {
                let r = sigmoid(gxr[k] + ghr[k]);
                let u = sigmoid(gxr[hd + k] + ghr[hd + k]);
                let n = (gxr[2 * hd + k] + r * ghr[2 * hd + k]).tanh();
                *o = n + u * (hr[k] - n);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(100.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store
            .entries
            .iter()
            .map(|e| Mat::zeros(e.value.rows, e.value.cols))
            .collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every entry whose group is not in `frozen`.
    /// Frozen entries are never written. Returns the pre-clip gradient norm
    /// over the trainable entries.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat], frozen: &BTreeSet<ParamGroup>) -> f64 {
        assert_eq!(grads.len(), store.entries.len(), "gradient list does not match store");
        let trainable: Vec<bool> = store.entries.iter().map(|e| !frozen.contains(&e.group)).collect();
        let norm = grads
            .iter()
            .zip(&trainable)
            .filter(|(_, &t)| t)
            .map(|(g, _)| g.sq_norm())
            .sum::<f64>()
            .sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, entry) in store.entries.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for (k, p) in entry.value.data.iter_mut().enumerate() {
                let gk = grads[i].data[k] * scale;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *p -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gru_has_fixed_point_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", ParamGroup::Recurrent, 3, 4, &mut rng);
        for e in &mut store.entries {
            e.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let x = g.constant(Mat::from_vec(1, 3, vec![0.3, -1.0, 2.0]));
        let h = g.constant(Mat::zeros(1, 4));
        let out = cell.forward(&mut g, &vars, x, h);
        assert_eq!(g.value(out), &Mat::zeros(1, 4));
    }

    #[test]
    fn apply_matches_graph_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", ParamGroup::Encoder, &[3, 5, 2], &mut rng);
        let cell = GruCell::new(&mut store, "gru", ParamGroup::Recurrent, 3, 4, &mut rng);
        for e in &mut store.entries {
            e.value.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let x = Mat::from_vec(2, 3, vec![0.3, -1.0, 2.0, 0.1, 0.5, -0.7]);
        let h0 = Mat::from_vec(2, 4, vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.5, -0.5, 0.9]);
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let hv = g.constant(h0.clone());
        let y = mlp.forward(&mut g, &vars, xv);
        let h1 = cell.forward(&mut g, &vars, xv, hv);
        assert_eq!(g.value(y), &mlp.apply(&store, &x));
        assert_eq!(g.value(h1), &cell.apply(&store, &x, &h0));
    }

    #[test]
    fn frozen_groups_are_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        Mlp::new(&mut store, "a", ParamGroup::Encoder, &[2, 3, 1], &mut rng);
        Mlp::new(&mut store, "b", ParamGroup::Recurrent, &[2, 3, 1], &mut rng);
        let before = store.group_digest(ParamGroup::Recurrent);
        let before_enc = store.group_digest(ParamGroup::Encoder);
        let grads: Vec<Mat> = store.entries.iter().map(|e| e.value.map(|_| 1.0)).collect();
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let frozen = BTreeSet::from([ParamGroup::Recurrent]);
        opt.step(&mut store, &grads, &frozen);
        assert_eq!(before, store.group_digest(ParamGroup::Recurrent));
        assert_ne!(before_enc, store.group_digest(ParamGroup::Encoder));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", ParamGroup::Actor, Mat::row_vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let mut g = Graph::new();
            let vars = store.bind(&mut g);
            let sq = g.square(vars[0]);
            let l = g.sum_all(sq);
            g.backward(l);
            let grads = ParamStore::grads(&g, &vars);
            opt.step(&mut store, &grads, &BTreeSet::new());
        }
        assert!(store.entries[0].value.sq_norm() < 1e-4);
    }
}
