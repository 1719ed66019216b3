//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use langmix::numerics::{Graph, ParamStore};
use langmix::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Plain `exp / Σ exp` without max subtraction; inputs stay moderate.
pub fn softmax_direct(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Levenshtein distance by memoized recursion on suffixes.
pub fn edit_distance_memo<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn random_string(rng: &mut ChaCha8Rng, max_len: usize, alphabet: &[char]) -> String {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            z * std
        })
        .collect()
}

/// Random probability vector of length `n`, sometimes sparse.
pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
    if rng.random_bool(0.2) {
        let keep = rng.random_range(0..n);
        for (i, v) in w.iter_mut().enumerate() {
            if i != keep && rng.random_bool(0.5) {
                *v = 0.0;
            }
        }
    }
    let s: f64 = w.iter().sum();
    if s == 0.0 {
        let mut one = vec![0.0; n];
        one[0] = 1.0;
        return one;
    }
    w.into_iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------------------
// Finite-difference oracle for small graphs.

#[derive(Clone, Copy, Debug)]
pub enum Act {
    Gelu,
    Tanh,
}

/// `loss(act(x·W1 + b1) [→ layer norm] [→ self-mix] · W2 + b2)` with MSE or
/// cross-entropy at the end. Parameters are `f32`-representable so both sides
/// see identical numbers.
#[derive(Clone, Debug)]
pub struct SmallGraph {
    pub n: usize,
    pub din: usize,
    pub h: usize,
    pub k: usize,
    pub act: Act,
    pub norm: bool,
    pub mix: bool,
    pub cross_entropy: bool,
    pub x: Vec<f64>,
    pub target: Vec<f64>,
    pub labels: Vec<usize>,
    /// `(name, shape, values)` in declaration order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

fn f32_exact(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

impl SmallGraph {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(2..=3);
        let din = rng.random_range(2..=3);
        let h = rng.random_range(2..=4);
        let k = rng.random_range(2..=3);
        let act = if rng.random_bool(0.5) { Act::Gelu } else { Act::Tanh };
        let norm = rng.random_bool(0.5);
        let mix = rng.random_bool(0.5);
        let cross_entropy = rng.random_bool(0.5);
        let mut params = vec![
            ("w1".to_string(), vec![din, h], f32_exact(normal_vec(rng, din * h, 0.8))),
            ("b1".to_string(), vec![h], f32_exact(normal_vec(rng, h, 0.3))),
        ];
        if norm {
            params.push(("g".to_string(), vec![h], f32_exact(normal_vec(rng, h, 0.3).into_iter().map(|v| 1.0 + v).collect())));
            params.push(("be".to_string(), vec![h], f32_exact(normal_vec(rng, h, 0.3))));
        }
        params.push(("w2".to_string(), vec![h, k], f32_exact(normal_vec(rng, h * k, 0.8))));
        params.push(("b2".to_string(), vec![k], f32_exact(normal_vec(rng, k, 0.3))));
        Self {
            n,
            din,
            h,
            k,
            act,
            norm,
            mix,
            cross_entropy,
            x: f32_exact(normal_vec(rng, n * din, 1.0)),
            target: f32_exact(normal_vec(rng, n * k, 1.0)),
            labels: (0..n).map(|_| rng.random_range(0..k)).collect(),
            params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.2.len()).sum()
    }

    fn get<'a>(&self, values: &'a [Vec<f64>], name: &str) -> &'a [f64] {
        let i = self.params.iter().position(|p| p.0 == name).expect("param");
        &values[i]
    }

    /// Loss evaluated entirely in `f64`.
    pub fn oracle_loss(&self, values: &[Vec<f64>]) -> f64 {
        let (n, h, k) = (self.n, self.h, self.k);
        let w1 = self.get(values, "w1");
        let b1 = self.get(values, "b1");
        let mut a = vec![0.0; n * h];
        for r in 0..n {
            for c in 0..h {
                let mut s = b1[c];
                for i in 0..self.din {
                    s += self.x[r * self.din + i] * w1[i * h + c];
                }
                a[r * h + c] = match self.act {
                    Act::Gelu => {
                        let u = (2.0 / std::f64::consts::PI).sqrt() * (s + 0.044715 * s * s * s);
                        0.5 * s * (1.0 + u.tanh())
                    }
                    Act::Tanh => s.tanh(),
                };
            }
        }
        if self.norm {
            let (g, be) = (self.get(values, "g"), self.get(values, "be"));
            for r in 0..n {
                let row = &mut a[r * h..(r + 1) * h];
                let mean = row.iter().sum::<f64>() / h as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
                let rs = 1.0 / (var + 1e-5).sqrt();
                for c in 0..h {
                    row[c] = (row[c] - mean) * rs * g[c] + be[c];
                }
            }
        }
        if self.mix {
            let scale = 1.0 / (h as f64).sqrt();
            let mut mixed = vec![0.0; n * h];
            for r in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|q| (0..h).map(|c| a[r * h + c] * a[q * h + c]).sum::<f64>() * scale)
                    .collect();
                let p = softmax_direct(&scores);
                for c in 0..h {
                    mixed[r * h + c] = (0..n).map(|q| p[q] * a[q * h + c]).sum();
                }
            }
            a = mixed;
        }
        let (w2, b2) = (self.get(values, "w2"), self.get(values, "b2"));
        let mut y = vec![0.0; n * k];
        for r in 0..n {
            for c in 0..k {
                y[r * k + c] = b2[c] + (0..h).map(|i| a[r * h + i] * w2[i * k + c]).sum::<f64>();
            }
        }
        if self.cross_entropy {
            (0..n)
                .map(|r| {
                    let row = &y[r * k..(r + 1) * k];
                    let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                    lse - row[self.labels[r]]
                })
                .sum::<f64>()
                / n as f64
        } else {
            y.iter().zip(&self.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (n * k) as f64
        }
    }

    /// Central differences of [`oracle_loss`] with step `h`.
    pub fn finite_difference(&self, h: f64) -> Vec<Vec<f64>> {
        let base: Vec<Vec<f64>> = self.params.iter().map(|p| p.2.clone()).collect();
        let mut out = Vec::new();
        for (pi, p) in self.params.iter().enumerate() {
            let mut g = vec![0.0; p.2.len()];
            for (j, gj) in g.iter_mut().enumerate() {
                let mut plus = base.clone();
                plus[pi][j] += h;
                let mut minus = base.clone();
                minus[pi][j] -= h;
                *gj = (self.oracle_loss(&plus) - self.oracle_loss(&minus)) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    /// Gradients from the library's reverse-mode sweep.
    pub fn autodiff(&self) -> Vec<Vec<f64>> {
        let mut store = ParamStore::new();
        let ids: Vec<_> = self
            .params
            .iter()
            .map(|(name, shape, v)| {
                let t = Tensor::new(shape.clone(), v.iter().map(|&x| x as f32).collect()).unwrap();
                store.insert(name.clone(), t).unwrap()
            })
            .collect();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(self.n, self.din, self.x.iter().map(|&v| v as f32).collect()).unwrap());
        let w1 = g.param_by_name("w1").unwrap();
        let b1 = g.param_by_name("b1").unwrap();
        let a = g.matmul(x, w1).unwrap();
        let a = g.add_bias(a, b1).unwrap();
        let mut a = match self.act {
            Act::Gelu => g.gelu(a),
            Act::Tanh => g.tanh(a),
        };
        if self.norm {
            let gain = g.param_by_name("g").unwrap();
            let bias = g.param_by_name("be").unwrap();
            a = g.layer_norm(a, gain, bias).unwrap();
        }
        if self.mix {
            let s = g.matmul_t(a, a).unwrap();
            let s = g.scale(s, 1.0 / (self.h as f32).sqrt());
            let p = g.softmax_rows(s);
            a = g.matmul(p, a).unwrap();
        }
        let w2 = g.param_by_name("w2").unwrap();
        let b2 = g.param_by_name("b2").unwrap();
        let y = g.matmul(a, w2).unwrap();
        let y = g.add_bias(y, b2).unwrap();
        let loss = if self.cross_entropy {
            g.cross_entropy(y, &self.labels).unwrap()
        } else {
            let t = g.input(Tensor::matrix(self.n, self.k, self.target.iter().map(|&v| v as f32).collect()).unwrap());
            g.mse(y, t).unwrap()
        };
        let grads = g.backward(loss).unwrap();
        ids.iter()
            .map(|&id| grads.param(id).unwrap().data().iter().map(|&v| v as f64).collect())
            .collect()
    }

    /// `‖autodiff − fd‖ / ‖fd‖` over all parameters jointly, differences taken
    /// with step `h`. Near-degenerate layer norms need `h` well below 1e-3 for the
    /// difference quotient itself to be accurate to 1e-4.
    pub fn relative_error(&self, h: f64) -> f64 {
        let (ad, fd) = (self.autodiff(), self.finite_difference(h));
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (a, f) in ad.iter().flatten().zip(fd.iter().flatten()) {
            diff += (a - f).powi(2);
            norm += f * f;
        }
        diff.sqrt() / norm.sqrt().max(1e-12)
    }
}

// ---------------------------------------------------------------------------
// Golden files.

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Returns the frozen vector stored under `name`. With `LANGMIX_BLESS=1` the
/// vector is (re)written from `actual` first.
pub fn golden(name: &str, actual: &[f32]) -> Vec<f32> {
    let path = fixture_path(name);
    if std::env::var_os("LANGMIX_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(actual).unwrap()).unwrap();
    }
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; regenerate with LANGMIX_BLESS=1", path.display()));
    serde_json::from_str(&text).unwrap()
}
