//! Brute-force reference for the tiny model: 6 pixels, 4 latent bits in two
//! groups, no hidden layers, RBM prior. Latent states are enumerated and the
//! smoothing integrals done by Gauss–Legendre quadrature, using only the
//! parameter values looked up by name.

#![allow(dead_code)]

use qvae::model::{Dvae, VaeConfig};
use qvae::ParamStore;

pub const PIXELS: usize = 6;
pub const LATENT: usize = 4;
pub const GROUP: usize = 2;

pub fn tiny_config() -> VaeConfig {
    serde_json::from_value(serde_json::json!({
        "input_size": PIXELS, "latent_size": LATENT, "groups": 2, "prior": "rbm",
        "encoder_hidden": [], "decoder_hidden": [], "batch_norm": false,
        "sampler": {"negative_phase": "exact"}
    }))
    .unwrap()
}

/// Nodes and weights of the `n`-point rule on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes.push(0.5 * (1.0 - x));
        weights.push(1.0 / ((1.0 - x * x) * dp * dp));
    }
    (nodes, weights)
}

fn sig(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn log_sig(a: f64) -> f64 {
    a.min(0.0) - (-a.abs()).exp().ln_1p()
}

/// Weights read back from a model's parameter store.
pub struct Tiny {
    enc0_w: Vec<f64>,
    enc0_b: Vec<f64>,
    enc1_w: Vec<f64>,
    enc1_b: Vec<f64>,
    dec_w: Vec<f64>,
    dec_b: Vec<f64>,
    h: Vec<f64>,
    w: Vec<f64>,
    beta: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Tiny {
    pub fn new(store: &ParamStore, beta: f64, points: usize) -> Self {
        let get = |n: &str| store.get(store.find(n).unwrap_or_else(|| panic!("no parameter {n}"))).values().to_vec();
        let (x, wq) = gauss_legendre(points);
        // Fold the truncated exponential density into the weights.
        let norm = beta / beta.exp_m1();
        let weights = x.iter().zip(&wq).map(|(&z, &w)| w * norm * (beta * z).exp()).collect();
        Self {
            enc0_w: get("enc0.l0.w"),
            enc0_b: get("enc0.l0.b"),
            enc1_w: get("enc1.l0.w"),
            enc1_b: get("enc1.l0.b"),
            dec_w: get("dec.l0.w"),
            dec_b: get("dec.l0.b"),
            h: get("prior.h"),
            w: get("prior.w"),
            beta,
            nodes: x,
            weights,
        }
    }

    pub fn from_model(model: &Dvae, beta: f64, points: usize) -> Self {
        Self::new(model.params(), beta, points)
    }

    fn affine(input: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let out = b.len();
        let mut y = b.to_vec();
        for (i, &v) in input.iter().enumerate() {
            for j in 0..out {
                y[j] += v * w[i * out + j];
            }
        }
        y
    }

    fn probs(logits: &[f64]) -> Vec<f64> {
        logits.iter().map(|&a| sig(a).clamp(1e-7, 1.0 - 1e-7)).collect()
    }

    pub fn energy(&self, z: &[u8]) -> f64 {
        let mut e: f64 = z.iter().zip(&self.h).map(|(&v, &h)| v as f64 * h).sum();
        for i in 0..GROUP {
            for j in 0..GROUP {
                e += self.w[i * GROUP + j] * (z[i] * z[GROUP + j]) as f64;
            }
        }
        e
    }

    pub fn log_z(&self) -> f64 {
        let terms: Vec<f64> = (0..1 << LATENT).map(|s| -self.energy(&bits(s, LATENT))).collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    fn log_lik(&self, x: &[f64], zeta: &[f64]) -> f64 {
        Self::affine(zeta, &self.dec_w, &self.dec_b)
            .iter()
            .zip(x)
            .map(|(&a, &t)| t * log_sig(a) + (1.0 - t) * log_sig(-a))
            .sum()
    }

    /// Quadrature over the smoothing variables of the bits set in `z`: calls
    /// `f(ζ)` with its weight.
    fn integrate(&self, z: &[u8], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let on: Vec<usize> = (0..z.len()).filter(|&k| z[k] == 1).collect();
        let n = self.nodes.len();
        let mut total = 0.0;
        let mut zeta = vec![0.0; z.len()];
        for idx in 0..n.pow(on.len() as u32) {
            let mut rem = idx;
            let mut w = 1.0;
            for &k in &on {
                zeta[k] = self.nodes[rem % n];
                w *= self.weights[rem % n];
                rem /= n;
            }
            total += w * f(&zeta);
        }
        total
    }

    /// Exact ELBO of one input.
    pub fn elbo(&self, x: &[f64]) -> f64 {
        let q1 = Self::probs(&Self::affine(x, &self.enc0_w, &self.enc0_b));
        let log_z = self.log_z();
        let mut total = entropy(&q1);
        for s1 in 0..1 << GROUP {
            let z1 = bits(s1, GROUP);
            let p1 = prob(&q1, &z1);
            total += p1
                * self.integrate(&z1, |zeta1| {
                    let mut inp = x.to_vec();
                    inp.extend_from_slice(zeta1);
                    let q2 = Self::probs(&Self::affine(&inp, &self.enc1_w, &self.enc1_b));
                    let mut inner = entropy(&q2);
                    for s2 in 0..1 << GROUP {
                        let z2 = bits(s2, GROUP);
                        let z: Vec<u8> = z1.iter().chain(&z2).copied().collect();
                        let ae = self.integrate(&z2, |zeta2| {
                            let full: Vec<f64> = zeta1.iter().chain(zeta2).copied().collect();
                            self.log_lik(x, &full)
                        });
                        inner += prob(&q2, &z2) * (ae - self.energy(&z) - log_z);
                    }
                    inner
                });
        }
        total
    }

    /// Exact `log p(x) = log Σ_z p(z) ∫ r(ζ|z) p(x|ζ) dζ`.
    pub fn log_px(&self, x: &[f64]) -> f64 {
        let log_z = self.log_z();
        let mut total = 0.0;
        for s in 0..1 << LATENT {
            let z = bits(s, LATENT);
            let lik = self.integrate(&z, |zeta| self.log_lik(x, zeta).exp());
            total += (-self.energy(&z) - log_z).exp() * lik;
        }
        total.ln()
    }
}

pub fn bits(s: usize, n: usize) -> Vec<u8> {
    (0..n).map(|k| ((s >> k) & 1) as u8).collect()
}

fn prob(q: &[f64], z: &[u8]) -> f64 {
    q.iter().zip(z).map(|(&q, &z)| if z == 1 { q } else { 1.0 - q }).product()
}

fn entropy(q: &[f64]) -> f64 {
    q.iter().map(|&q| -(q * q.ln() + (1.0 - q) * (1.0 - q).ln())).sum()
}

/// Mean exact ELBO over `xs`.
pub fn mean_elbo(store: &ParamStore, xs: &[Vec<f64>], beta: f64, points: usize) -> f64 {
    let t = Tiny::new(store, beta, points);
    xs.iter().map(|x| t.elbo(x)).sum::<f64>() / xs.len() as f64
}

/// Central-difference gradient of the mean exact ELBO, in store order.
pub fn elbo_gradient(model: &mut Dvae, xs: &[Vec<f64>], beta: f64, points: usize, h: f64) -> Vec<f64> {
    let base = model.params().flatten();
    let mut grad = Vec::with_capacity(base.len());
    let mut p = base.clone();
    for k in 0..base.len() {
        p[k] = base[k] + h;
        model.params_mut().assign_flat(&p).unwrap();
        let up = mean_elbo(model.params(), xs, beta, points);
        p[k] = base[k] - h;
        model.params_mut().assign_flat(&p).unwrap();
        let down = mean_elbo(model.params(), xs, beta, points);
        p[k] = base[k];
        grad.push((up - down) / (2.0 * h));
    }
    model.params_mut().assign_flat(&base).unwrap();
    grad
}

/// Names of each flattened parameter, in store order.
pub fn flat_names(store: &ParamStore) -> Vec<String> {
    store.iter().flat_map(|(n, t)| (0..t.numel()).map(move |i| format!("{n}[{i}]"))).collect()
}

/// Four 6-pixel patterns the tiny model is trained on.
pub const PATTERNS: [[f64; PIXELS]; 4] = [
    [1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
    [1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
];

/// Tiny model trained for 100 epochs on draws of [`PATTERNS`], exact negative
/// phase. Ends at `β = 10`.
pub fn trained_tiny(seed: u64) -> Dvae {
    use rand::Rng as _;
    let mut rng = qvae::rng::substream(seed, 2);
    let vals: Vec<f64> = (0..400).flat_map(|_| PATTERNS[rng.random_range(0..PATTERNS.len())]).collect();
    let data = qvae::data::Dataset::new(PIXELS, vals).unwrap();
    let mut c = tiny_config();
    c.epochs = 100;
    c.batch_size = 40;
    let mut m = Dvae::new(c, &mut qvae::rng::substream(seed, 0)).unwrap();
    qvae::model::train(&mut m, &data, &data, &Default::default(), seed).unwrap();
    m
}
