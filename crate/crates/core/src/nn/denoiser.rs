//! Set-transformer denoiser predicting clean ellipsoid features from noisy ones.
//!
//! Rows of `x_t` become tokens through a shared linear map; the timestep enters
//! as one extra token (sinusoidal embedding followed by a two-layer MLP)
//! prepended to the set. There is no positional encoding anywhere, and rows are
//! processed in a canonical (lexicographic) order that is undone at the output,
//! so permuting the input rows permutes the output rows bit-for-bit.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::FEATURE_DIM;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub point_count: usize,
    pub time_embed_dim: usize,
    /// Largest valid timestep `T`.
    pub num_timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            model_dim: 128,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            point_count: 256,
            time_embed_dim: 128,
            num_timesteps: 1000,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be positive and even".into()));
        }
        if self.mlp_ratio == 0 || self.num_timesteps == 0 || self.point_count == 0 {
            return Err(Error::Config("mlp_ratio, num_timesteps and point_count must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

const PER_LAYER: usize = 16;
const STEM: usize = 6;
pub const INIT_STD: f64 = 0.02;

/// Parameter layout in forward order.
pub fn param_specs(cfg: &DenoiserConfig) -> Vec<ParamSpec> {
    let d = cfg.model_dim;
    let e = cfg.time_embed_dim;
    let hidden = d * cfg.mlp_ratio;
    let spec = |name: String, shape: Vec<usize>, init| ParamSpec { name, shape, init };
    let mut specs = vec![
        spec("input.weight".into(), vec![FEATURE_DIM, d], Init::Normal),
        spec("input.bias".into(), vec![d], Init::Zeros),
        spec("time.fc1.weight".into(), vec![e, d], Init::Normal),
        spec("time.fc1.bias".into(), vec![d], Init::Zeros),
        spec("time.fc2.weight".into(), vec![d, d], Init::Normal),
        spec("time.fc2.bias".into(), vec![d], Init::Zeros),
    ];
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        specs.extend([
            spec(p("norm1.gain"), vec![d], Init::Ones),
            spec(p("norm1.bias"), vec![d], Init::Zeros),
            spec(p("attn.q.weight"), vec![d, d], Init::Normal),
            spec(p("attn.q.bias"), vec![d], Init::Zeros),
            spec(p("attn.k.weight"), vec![d, d], Init::Normal),
            spec(p("attn.k.bias"), vec![d], Init::Zeros),
            spec(p("attn.v.weight"), vec![d, d], Init::Normal),
            spec(p("attn.v.bias"), vec![d], Init::Zeros),
            spec(p("attn.out.weight"), vec![d, d], Init::Normal),
            spec(p("attn.out.bias"), vec![d], Init::Zeros),
            spec(p("norm2.gain"), vec![d], Init::Ones),
            spec(p("norm2.bias"), vec![d], Init::Zeros),
            spec(p("mlp.fc1.weight"), vec![d, hidden], Init::Normal),
            spec(p("mlp.fc1.bias"), vec![hidden], Init::Zeros),
            spec(p("mlp.fc2.weight"), vec![hidden, d], Init::Normal),
            spec(p("mlp.fc2.bias"), vec![d], Init::Zeros),
        ]);
    }
    specs.extend([
        spec("final_norm.gain".into(), vec![d], Init::Ones),
        spec("final_norm.bias".into(), vec![d], Init::Zeros),
        spec("output.weight".into(), vec![d, FEATURE_DIM], Init::Zeros),
        spec("output.bias".into(), vec![FEATURE_DIM], Init::Zeros),
    ]);
    debug_assert_eq!(specs.len(), STEM + PER_LAYER * cfg.num_layers + 4);
    specs
}

/// Normal sample truncated to two standard deviations (resampled).
fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights<T> {
    pub config: DenoiserConfig,
    pub params: Vec<Tensor<T>>,
}

/// Handles into the tape for one denoiser evaluation.
#[derive(Debug, Clone)]
pub struct DenoiserGraph {
    pub params: Vec<Var>,
    pub input: Var,
    pub output: Var,
}

/// Sinusoidal embedding of a timestep: `[sin(t·f_i)…, cos(t·f_i)…]`, `f_i = 10000^(-i/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Row order that depends only on row contents (lexicographic, total order on floats).
pub fn canonical_order<T: Scalar>(x: &[T], n: usize) -> Vec<usize> {
    let w = x.len() / n.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = &x[a * w..(a + 1) * w];
        let rb = &x[b * w..(b + 1) * w];
        ra.iter()
            .zip(rb)
            .map(|(p, q)| p.as_f64().total_cmp(&q.as_f64()))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

impl<T: Scalar> DenoiserWeights<T> {
    /// Truncated-normal (std 0.02) weights, zero biases, unit norm gains and a
    /// zero output projection.
    pub fn init(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = param_specs(&config)
            .into_iter()
            .map(|s| {
                let len: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Normal => (0..len).map(|_| T::from_f64(truncated_normal(rng, INIT_STD))).collect(),
                    Init::Zeros => vec![T::zero(); len],
                    Init::Ones => vec![T::one(); len],
                };
                Tensor::new(s.shape, data)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserWeights<U> {
        DenoiserWeights {
            config: self.config,
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_inputs(&self, x_len: usize, n: usize, t: usize) -> Result<()> {
        if n == 0 || x_len != n * FEATURE_DIM {
            return Err(Error::ShapeMismatch(format!(
                "denoiser input has {x_len} values, expected {n}x{FEATURE_DIM} with n > 0"
            )));
        }
        if t < 1 || t > self.config.num_timesteps {
            return Err(Error::InvalidTimestep {
                t,
                lo: 1,
                hi: self.config.num_timesteps,
            });
        }
        Ok(())
    }

    /// Records one evaluation on `tape`. The network output `v` is combined
    /// with the input as `x̂₀ = √ᾱ_t·x_t − √(1−ᾱ_t)·v`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x_t: &[T],
        n: usize,
        t: usize,
        alpha_bar: f64,
        input_requires_grad: bool,
        params_require_grad: bool,
    ) -> Result<DenoiserGraph> {
        self.check_inputs(x_t.len(), n, t)?;
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::Config(format!("alpha_bar must lie in (0, 1], got {alpha_bar}")));
        }
        let cfg = &self.config;
        let d = cfg.model_dim;
        let heads = cfg.num_heads;
        let hd = cfg.head_dim();

        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), params_require_grad))
            .collect();
        let input = tape.leaf(Tensor::new(vec![n, FEATURE_DIM], x_t.to_vec()), input_requires_grad);

        let order = canonical_order(x_t, n);
        let mut position = vec![0; n];
        for (pos, &row) in order.iter().enumerate() {
            position[row] = pos;
        }

        let linear = |tape: &mut Tape<T>, x: Var, w: usize, b: usize| -> Result<Var> {
            let y = tape.matmul(x, params[w], false)?;
            tape.add(y, params[b])
        };
        let norm = |tape: &mut Tape<T>, x: Var, g: usize, b: usize| -> Result<Var> {
            let y = tape.layer_norm(x);
            let y = tape.mul(y, params[g])?;
            tape.add(y, params[b])
        };

        let sorted = tape.gather(input, &order)?;
        let tokens = linear(tape, sorted, 0, 1)?;

        let emb = timestep_embedding(t, cfg.time_embed_dim);
        let emb = tape.leaf(Tensor::from_f64(vec![1, cfg.time_embed_dim], &emb), false);
        let temb = linear(tape, emb, 2, 3)?;
        let temb = tape.gelu(temb);
        let temb = linear(tape, temb, 4, 5)?;

        let mut h = tape.concat(temb, tokens)?;
        let rows = n + 1;
        let inv_sqrt = T::from_f64(1.0 / (hd as f64).sqrt());

        for l in 0..cfg.num_layers {
            let base = STEM + l * PER_LAYER;
            let a = norm(tape, h, base, base + 1)?;
            let mut split = |w: usize, b: usize| -> Result<Var> {
                let y = linear(tape, a, w, b)?;
                let y = tape.reshape(y, vec![rows, heads, hd])?;
                tape.permute(y, &[1, 0, 2])
            };
            let q = split(base + 2, base + 3)?;
            let k = split(base + 4, base + 5)?;
            let v = split(base + 6, base + 7)?;
            let scores = tape.matmul(q, k, true)?;
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.softmax(scores);
            let o = tape.matmul(attn, v, false)?;
            let o = tape.permute(o, &[1, 0, 2])?;
            let o = tape.reshape(o, vec![rows, d])?;
            let o = linear(tape, o, base + 8, base + 9)?;
            h = tape.add(h, o)?;

            let m = norm(tape, h, base + 10, base + 11)?;
            let m = linear(tape, m, base + 12, base + 13)?;
            let m = tape.gelu(m);
            let m = linear(tape, m, base + 14, base + 15)?;
            h = tape.add(h, m)?;
        }

        let tail = STEM + PER_LAYER * cfg.num_layers;
        let hf = norm(tape, h, tail, tail + 1)?;
        // drop the time token and restore the caller's row order
        let back: Vec<usize> = (0..n).map(|i| position[i] + 1).collect();
        let pts = tape.gather(hf, &back)?;
        let v = linear(tape, pts, tail + 2, tail + 3)?;
        let skip = tape.scale(input, T::from_f64(alpha_bar.sqrt()));
        let v = tape.scale(v, T::from_f64(-(1.0 - alpha_bar).sqrt()));
        let output = tape.add(skip, v)?;
        Ok(DenoiserGraph {
            params,
            input,
            output,
        })
    }

    /// `x̂₀ = p_θ(x_t, t)` for an `n×16` input; `alpha_bar` is `ᾱ_t` of the
    /// schedule the weights were trained with.
    pub fn denoise(&self, x_t: &[f64], n: usize, t: usize, alpha_bar: f64) -> Result<Vec<f64>> {
        let x: Vec<T> = x_t.iter().map(|&v| T::from_f64(v)).collect();
        let mut tape = Tape::new();
        let g = self.forward(&mut tape, &x, n, t, alpha_bar, false, false)?;
        let out = tape.value(g.output).to_f64_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        Ok(out)
    }

    /// Returns `(x̂₀, (∂x̂₀/∂x_t)ᵀ · grad_out)`.
    pub fn denoise_vjp(&self, x_t: &[f64], n: usize, t: usize, alpha_bar: f64, grad_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if grad_out.len() != x_t.len() {
            return Err(Error::ShapeMismatch("vjp seed must match the input shape".into()));
        }
        let x: Vec<T> = x_t.iter().map(|&v| T::from_f64(v)).collect();
        let mut tape = Tape::new();
        let g = self.forward(&mut tape, &x, n, t, alpha_bar, true, false)?;
        let seed: Vec<T> = grad_out.iter().map(|&v| T::from_f64(v)).collect();
        let grads = tape.backward(g.output, Some(&seed))?;
        let gx = grads
            .get(g.input)
            .map(|v| v.iter().map(|x| x.as_f64()).collect())
            .unwrap_or_else(|| vec![0.0; x_t.len()]);
        Ok((tape.value(g.output).to_f64_vec(), gx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            model_dim: 16,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2,
            point_count: 8,
            time_embed_dim: 8,
            num_timesteps: 100,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n * FEATURE_DIM).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn perturb_output(w: &mut DenoiserWeights<f64>, rng: &mut ChaCha8Rng) {
        let tail = w.params.len();
        for p in &mut w.params[tail - 2..] {
            for v in p.data_mut() {
                *v = truncated_normal(rng, 0.1);
            }
        }
    }

    #[test]
    fn zero_output_projection_predicts_scaled_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = DenoiserWeights::<f64>::init(tiny(), &mut rng).unwrap();
        let x = random_input(&mut rng, 8);
        let out = w.denoise(&x, 8, 17, 0.64).unwrap();
        for (o, v) in out.iter().zip(&x) {
            assert!((o - 0.8 * v).abs() <= 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = DenoiserWeights::<f32>::init(tiny(), &mut rng).unwrap();
        for p in &mut w.params {
            for v in p.data_mut() {
                *v = truncated_normal(&mut rng, 0.2) as f32;
            }
        }
        let n = 8;
        let x = random_input(&mut rng, n);
        let perm = [3, 7, 0, 5, 1, 6, 2, 4];
        let mut xp = vec![0.0; x.len()];
        for (i, &p) in perm.iter().enumerate() {
            xp[i * 16..(i + 1) * 16].copy_from_slice(&x[p * 16..(p + 1) * 16]);
        }
        let a = w.denoise(&x, n, 5, 0.3).unwrap();
        let b = w.denoise(&xp, n, 5, 0.3).unwrap();
        assert!(a.iter().any(|&v| v != 0.0));
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..16 {
                assert_eq!(b[i * 16 + c].to_bits(), a[p * 16 + c].to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DenoiserWeights::<f64>::init(tiny(), &mut rng).unwrap();
        let x = random_input(&mut rng, 4);
        assert!(matches!(w.denoise(&x, 4, 0, 0.5), Err(Error::InvalidTimestep { .. })));
        assert!(matches!(w.denoise(&x, 4, 101, 0.5), Err(Error::InvalidTimestep { .. })));
        assert!(matches!(w.denoise(&x[..10], 4, 3, 0.5), Err(Error::ShapeMismatch(_))));
        assert!(w.denoise(&x, 4, 3, 0.0).is_err());
        assert!(w.denoise(&x, 4, 3, f64::NAN).is_err());
        let bad = DenoiserConfig {
            num_heads: 3,
            ..tiny()
        };
        assert!(DenoiserWeights::<f64>::init(bad, &mut rng).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = DenoiserWeights::<f64>::init(tiny(), &mut rng).unwrap();
        perturb_output(&mut w, &mut rng);
        let x = random_input(&mut rng, 8);
        let a = w.denoise(&x, 8, 42, 0.5).unwrap();
        let b = w.denoise(&x, 8, 42, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = DenoiserWeights::<f64>::init(tiny(), &mut rng).unwrap();
        perturb_output(&mut w, &mut rng);
        let n = 4;
        let x = random_input(&mut rng, n);
        let seed = random_input(&mut rng, n);
        let (_, gx) = w.denoise_vjp(&x, n, 30, 0.7, &seed).unwrap();
        let f = |x: &[f64]| -> f64 {
            w.denoise(x, n, 30, 0.7).unwrap().iter().zip(&seed).map(|(a, b)| a * b).sum()
        };
        for i in (0..x.len()).step_by(5) {
            let h = 1e-5;
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - gx[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "entry {i}: fd {fd} vs {}", gx[i]);
        }
    }
}
