//! Variance-preserving diffusion over a pooled image latent, conditioned on
//! the fused feature hierarchy and a lighting code.
//!
//! The schedule keeps `alpha_t^2 + beta_t^2 = 1` exactly by construction.
//! The decoder predicts the added noise; conditioning enters spatially
//! (feature levels resized and concatenated at each decoder resolution) and
//! globally (lighting code added to the timestep embedding).

use crate::encoder::EncoderConfig;
use crate::error::{AliError, Result};
use crate::nn::{Conv2d, Linear, ParamStore};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};
use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Schedule family. Only the cosine form is implemented.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

/// Variance-preserving coefficients, 1-indexed by timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NoiseSchedule {
    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `alpha_t^2`, with the convention `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            let a = self.alpha_at(t);
            a * a
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max < 2 || self.alpha.len() != self.t_max || self.beta.len() != self.t_max {
            return Err(AliError::Config("schedule arrays inconsistent".into()));
        }
        for t in 0..self.t_max {
            let s = self.alpha[t] * self.alpha[t] + self.beta[t] * self.beta[t];
            if (s - 1.0).abs() > 1e-12 {
                return Err(AliError::Config(format!(
                    "schedule not variance preserving at t={}: {s}",
                    t + 1
                )));
            }
            if t > 0 && self.alpha[t] >= self.alpha[t - 1] {
                return Err(AliError::Config("alpha must strictly decrease".into()));
            }
        }
        if self.alpha[0] < 0.999 {
            return Err(AliError::Config(format!(
                "alpha_1 = {} below 0.999",
                self.alpha[0]
            )));
        }
        Ok(())
    }
}

/// Cosine schedule on a phase grid bounded away from the endpoints, so the
/// first step is nearly noise-free and the last nearly pure noise for every
/// `T >= 2`.
pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(AliError::Config(format!("schedule needs T >= 2, got {t_max}")));
    }
    let ScheduleKind::Cosine = kind;
    const U_MIN: f64 = 0.02;
    const U_MAX: f64 = 0.98;
    let mut alpha = Vec::with_capacity(t_max);
    let mut beta = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let u = U_MIN + (U_MAX - U_MIN) * t as f64 / (t_max - 1) as f64;
        let phase = std::f64::consts::FRAC_PI_2 * u;
        alpha.push(phase.cos());
        beta.push(phase.sin());
    }
    let s = NoiseSchedule { t_max, alpha, beta };
    s.validate()?;
    Ok(s)
}

/// `x_t = alpha_t x0 + beta_t eps`, exactly.
pub fn add_noise<F: Scalar>(
    x0: &ArrayD<F>,
    t: usize,
    eps: &ArrayD<F>,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<F>> {
    if t < 1 || t > schedule.t_max {
        return Err(AliError::Contract(format!(
            "timestep {t} outside 1..={}",
            schedule.t_max
        )));
    }
    if x0.shape() != eps.shape() {
        return Err(AliError::Contract("add_noise: shape mismatch".into()));
    }
    let a = F::from_f64(schedule.alpha_at(t));
    let b = F::from_f64(schedule.beta_at(t));
    Ok(x0.mapv(|v| v * a) + &eps.mapv(|v| v * b))
}

/// Architecture of the diffusion decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub base_channels: usize,
    pub down_channels: usize,
    pub temb_dim: usize,
    pub cond_channels: usize,
    /// Latent = image average-pooled by this factor, rescaled to `[-1,1]`.
    pub latent_factor: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            base_channels: 48,
            down_channels: 96,
            temb_dim: 64,
            cond_channels: 16,
            latent_factor: 4,
        }
    }
}

/// Average-pool an `[H,W,3]` image into the `[3,H/f,W/f]` latent in `[-1,1]`.
pub fn image_to_latent<F: Scalar>(img: &Array3<f64>, factor: usize) -> Result<Array3<F>> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if h % factor != 0 || w % factor != 0 {
        return Err(AliError::Contract(format!(
            "image {h}x{w} not divisible by latent factor {factor}"
        )));
    }
    let (lh, lw) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Array3::<F>::zeros((3, lh, lw));
    for c in 0..3 {
        for i in 0..lh {
            for j in 0..lw {
                let mut s = 0.0;
                for di in 0..factor {
                    for dj in 0..factor {
                        s += img[[i * factor + di, j * factor + dj, c]];
                    }
                }
                out[[c, i, j]] = F::from_f64(2.0 * s * inv - 1.0);
            }
        }
    }
    Ok(out)
}

/// Bilinearly upsample a `[3,h,w]` latent back to an `[H,W,3]` image in `[0,1]`.
pub fn latent_to_image<F: Scalar>(latent: &Array3<F>, factor: usize) -> Array3<f64> {
    let (lh, lw) = (latent.shape()[1], latent.shape()[2]);
    let mut g = Graph::<F>::new();
    let x = g.input(latent.clone().insert_axis(Axis(0)).into_dyn());
    let up = g.upsample_bilinear(x, lh * factor, lw * factor);
    let v = g.value(up);
    Array3::from_shape_fn((lh * factor, lw * factor, 3), |(i, j, c)| {
        ((v[[0, c, i, j]].to_f64() + 1.0) / 2.0).clamp(0.0, 1.0)
    })
}

/// Sinusoidal embedding of integer timesteps.
pub fn timestep_embedding<F: Scalar>(ts: &[usize], dim: usize) -> Array2<F> {
    let half = dim / 2;
    let mut out = Array2::<F>::zeros((ts.len(), dim));
    for (n, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
            let arg = t as f64 * freq;
            out[[n, 2 * i]] = F::from_f64(arg.sin());
            out[[n, 2 * i + 1]] = F::from_f64(arg.cos());
        }
    }
    out
}

/// Noise-prediction decoder; parameters live under `phi_prime.`.
///
/// Works at two resolutions (`H/f` and `H/2f`). Every conditioning level is
/// resized to its nearest decoder resolution and injected by channel
/// concatenation after a 1x1 projection; the lighting code joins the
/// timestep embedding.
#[derive(Clone, Debug)]
pub struct DiffusionDecoderNet {
    pub cfg: DiffusionConfig,
    enc_cfg: EncoderConfig,
    hi_levels: Vec<usize>,
    lo_levels: Vec<usize>,
    temb1: Linear,
    codeproj: Linear,
    cond_hi: Option<Conv2d>,
    cond_lo: Option<Conv2d>,
    enc16a: Conv2d,
    enc16b: Conv2d,
    temb16: Linear,
    down: Conv2d,
    enc8a: Conv2d,
    enc8b: Conv2d,
    temb8: Linear,
    dec16a: Conv2d,
    dec16b: Conv2d,
    temb16b: Linear,
    out: Conv2d,
}

impl DiffusionDecoderNet {
    pub fn new(cfg: &DiffusionConfig, enc_cfg: &EncoderConfig) -> Result<Self> {
        enc_cfg.validate()?;
        // Assign each encoder level to the nearer decoder resolution: levels
        // at or above the latent resolution go high, the rest go low.
        let mut hi_levels = Vec::new();
        let mut lo_levels = Vec::new();
        for i in 0..enc_cfg.n_levels() {
            let level_stride = 1usize << (i + 1);
            if level_stride <= cfg.latent_factor {
                hi_levels.push(i);
            } else {
                lo_levels.push(i);
            }
        }
        let hi_ch: usize = hi_levels.iter().map(|&i| enc_cfg.channels[i]).sum();
        let lo_ch: usize = lo_levels.iter().map(|&i| enc_cfg.channels[i]).sum();

        let cond_hi = (hi_ch > 0)
            .then(|| Conv2d::new("phi_prime.cond_hi", hi_ch, cfg.cond_channels, 1, 1, 0));
        let cond_lo = (lo_ch > 0)
            .then(|| Conv2d::new("phi_prime.cond_lo", lo_ch, cfg.cond_channels, 1, 1, 0));

        let in_ch = 3 + if cond_hi.is_some() { cfg.cond_channels } else { 0 };
        let mid_in = cfg.down_channels + if cond_lo.is_some() { cfg.cond_channels } else { 0 };
        Ok(DiffusionDecoderNet {
            cfg: cfg.clone(),
            enc_cfg: enc_cfg.clone(),
            hi_levels,
            lo_levels,
            temb1: Linear::new("phi_prime.temb1", cfg.temb_dim, cfg.temb_dim),
            codeproj: Linear::new("phi_prime.codeproj", enc_cfg.code_dim, cfg.temb_dim),
            cond_hi,
            cond_lo,
            enc16a: Conv2d::new("phi_prime.enc16a", in_ch, cfg.base_channels, 3, 1, 1),
            enc16b: Conv2d::new("phi_prime.enc16b", cfg.base_channels, cfg.base_channels, 3, 1, 1),
            temb16: Linear::new("phi_prime.temb16", cfg.temb_dim, cfg.base_channels),
            down: Conv2d::new("phi_prime.down", cfg.base_channels, cfg.down_channels, 3, 2, 1),
            enc8a: Conv2d::new("phi_prime.enc8a", mid_in, cfg.down_channels, 3, 1, 1),
            enc8b: Conv2d::new("phi_prime.enc8b", cfg.down_channels, cfg.down_channels, 3, 1, 1),
            temb8: Linear::new("phi_prime.temb8", cfg.temb_dim, cfg.down_channels),
            dec16a: Conv2d::new(
                "phi_prime.dec16a",
                cfg.down_channels + cfg.base_channels,
                cfg.base_channels,
                3,
                1,
                1,
            ),
            dec16b: Conv2d::new("phi_prime.dec16b", cfg.base_channels, cfg.base_channels, 3, 1, 1),
            temb16b: Linear::new("phi_prime.temb16b", cfg.temb_dim, cfg.base_channels),
            out: Conv2d::new("phi_prime.out", cfg.base_channels, 3, 3, 1, 1),
        })
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.temb1.init(store, rng);
        self.codeproj.init(store, rng);
        if let Some(c) = &self.cond_hi {
            c.init(store, rng);
        }
        if let Some(c) = &self.cond_lo {
            c.init(store, rng);
        }
        for c in [
            &self.enc16a, &self.enc16b, &self.down, &self.enc8a, &self.enc8b, &self.dec16a,
            &self.dec16b, &self.out,
        ] {
            c.init(store, rng);
        }
        for l in [&self.temb16, &self.temb8, &self.temb16b] {
            l.init(store, rng);
        }
    }

    fn gather_cond<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        levels: &[Var],
        idxs: &[usize],
        res: (usize, usize),
    ) -> Option<Var> {
        if idxs.is_empty() {
            return None;
        }
        let parts: Vec<Var> = idxs
            .iter()
            .map(|&i| {
                let s = g.value(levels[i]).shape().to_vec();
                if s[2] > res.0 {
                    g.avg_pool2d(levels[i], s[2] / res.0)
                } else if s[2] < res.0 {
                    g.upsample_bilinear(levels[i], res.0, res.1)
                } else {
                    levels[i]
                }
            })
            .collect();
        Some(g.concat_channels(&parts))
    }

    /// Predict the noise in `x_t` (`[N,3,h,w]` latent) given timesteps, the
    /// conditioning hierarchy, and the `[N,d_L]` lighting codes.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x_t: Var,
        ts: &[usize],
        cond_levels: &[Var],
        cond_code: Var,
        trainable: bool,
    ) -> Result<Var> {
        let xs = g.value(x_t).shape().to_vec();
        if xs.len() != 4 || xs[1] != 3 {
            return Err(AliError::Contract(format!(
                "diffusion decoder expects [N,3,h,w], got {xs:?}"
            )));
        }
        if xs[0] != ts.len() {
            return Err(AliError::Contract("one timestep per batch item".into()));
        }
        if cond_levels.len() != self.enc_cfg.n_levels() {
            return Err(AliError::Contract(format!(
                "conditioning has {} levels, expected {}",
                cond_levels.len(),
                self.enc_cfg.n_levels()
            )));
        }
        let (rh, rw) = (xs[2], xs[3]);
        if rh % 2 != 0 || rw % 2 != 0 {
            return Err(AliError::Contract("latent resolution must be even".into()));
        }

        // Timestep embedding plus the global lighting injection.
        let emb = g.input(timestep_embedding::<F>(ts, self.cfg.temb_dim).into_dyn());
        let t1 = self.temb1.forward(g, store, emb, trainable)?;
        let t1 = g.silu(t1);
        let cvec = self.codeproj.forward(g, store, cond_code, trainable)?;
        let temb = g.add(t1, cvec);

        // High-resolution trunk.
        let mut h16 = x_t;
        if let (Some(conv), Some(cat)) = (
            &self.cond_hi,
            self.gather_cond(g, cond_levels, &self.hi_levels, (rh, rw)),
        ) {
            let proj = conv.forward(g, store, cat, trainable)?;
            h16 = g.concat_channels(&[x_t, proj]);
        }
        let y = self.enc16a.forward(g, store, h16, trainable)?;
        let tv = self.temb16.forward(g, store, temb, trainable)?;
        let y = g.add_channel_vec(y, tv);
        let y = g.silu(y);
        let y = self.enc16b.forward(g, store, y, trainable)?;
        let h16 = g.silu(y);

        // Downsampled trunk.
        let mut h8 = self.down.forward(g, store, h16, trainable)?;
        if let (Some(conv), Some(cat)) = (
            &self.cond_lo,
            self.gather_cond(g, cond_levels, &self.lo_levels, (rh / 2, rw / 2)),
        ) {
            let proj = conv.forward(g, store, cat, trainable)?;
            h8 = g.concat_channels(&[h8, proj]);
        }
        let y = self.enc8a.forward(g, store, h8, trainable)?;
        let tv = self.temb8.forward(g, store, temb, trainable)?;
        let y = g.add_channel_vec(y, tv);
        let y = g.silu(y);
        let y = self.enc8b.forward(g, store, y, trainable)?;
        let h8 = g.silu(y);

        // Back up with the skip connection.
        let up = g.upsample_bilinear(h8, rh, rw);
        let cat = g.concat_channels(&[up, h16]);
        let y = self.dec16a.forward(g, store, cat, trainable)?;
        let tv = self.temb16b.forward(g, store, temb, trainable)?;
        let y = g.add_channel_vec(y, tv);
        let y = g.silu(y);
        let y = self.dec16b.forward(g, store, y, trainable)?;
        let y = g.silu(y);
        self.out.forward(g, store, y, trainable)
    }
}

/// Value-level single-item decoder pass.
pub fn decoder_forward<F: Scalar>(
    x_t: &Array3<F>,
    t: usize,
    cond_levels: &[Array3<F>],
    cond_code: &ndarray::Array1<F>,
    store: &ParamStore<F>,
    net: &DiffusionDecoderNet,
) -> Result<Array3<F>> {
    let mut g = Graph::<F>::new();
    let x = g.input(x_t.clone().insert_axis(Axis(0)).into_dyn());
    let levels: Vec<Var> = cond_levels
        .iter()
        .map(|l| g.input(l.clone().insert_axis(Axis(0)).into_dyn()))
        .collect();
    let code = g.input(
        cond_code
            .clone()
            .insert_axis(Axis(0))
            .into_dyn(),
    );
    let eps = net.forward(&mut g, store, x, &[t], &levels, code, false)?;
    Ok(g.value(eps)
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .unwrap())
}

/// Draw the per-item timesteps and noises used by one loss evaluation.
pub fn draw_noise_batch<F: Scalar>(
    n: usize,
    shape: &[usize],
    schedule: &NoiseSchedule,
    seed: u64,
) -> (Vec<usize>, Vec<ArrayD<F>>) {
    use rand::Rng;
    let mut trng = stream(seed, "ddpm/t");
    let ts: Vec<usize> = (0..n).map(|_| trng.gen_range(1..=schedule.t_max)).collect();
    let eps: Vec<ArrayD<F>> = (0..n)
        .map(|i| {
            let mut erng = stream(seed, &format!("ddpm/eps{i}"));
            ArrayD::from_shape_simple_fn(IxDyn(shape), || {
                let z: f64 = StandardNormal.sample(&mut erng);
                F::from_f64(z)
            })
        })
        .collect();
    (ts, eps)
}

/// Denoising score-matching loss against an arbitrary decoder: mean over the
/// batch of the per-element squared error between predicted and true noise.
pub fn ddpm_loss_with<F: Scalar, D>(
    x0s: &[ArrayD<F>],
    schedule: &NoiseSchedule,
    seed: u64,
    mut decoder: D,
) -> Result<f64>
where
    D: FnMut(usize, &ArrayD<F>, usize) -> Result<ArrayD<F>>,
{
    if x0s.is_empty() {
        return Err(AliError::Contract("ddpm_loss: empty batch".into()));
    }
    let shape = x0s[0].shape().to_vec();
    let (ts, eps) = draw_noise_batch::<F>(x0s.len(), &shape, schedule, seed);
    let mut total = 0.0;
    for (i, x0) in x0s.iter().enumerate() {
        if x0.shape() != shape.as_slice() {
            return Err(AliError::Contract("ddpm_loss: ragged batch".into()));
        }
        let x_t = add_noise(x0, ts[i], &eps[i], schedule)?;
        let pred = decoder(i, &x_t, ts[i])?;
        if pred.shape() != x0.shape() {
            return Err(AliError::Contract("ddpm_loss: decoder shape mismatch".into()));
        }
        let mut item = 0.0;
        for (p, e) in pred.iter().zip(eps[i].iter()) {
            let d = p.to_f64() - e.to_f64();
            item += d * d;
        }
        total += item / x0.len() as f64;
    }
    Ok(total / x0s.len() as f64)
}

/// Ancestral sampling over a strided timestep grid, batched over items.
/// Returns latents clamped to `[-1,1]`.
#[allow(clippy::too_many_arguments)]
pub fn sample_latents<F: Scalar>(
    net: &DiffusionDecoderNet,
    store: &ParamStore<F>,
    cond_levels: &[ArrayD<F>],
    cond_codes: &ArrayD<F>,
    latent_shape: (usize, usize),
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Array4<F>> {
    if steps < 1 {
        return Err(AliError::Config("sampling needs >= 1 step".into()));
    }
    let n = cond_codes.shape()[0];
    let (lh, lw) = latent_shape;

    // Descending strided grid covering t_max..1.
    let steps = steps.min(schedule.t_max);
    let mut grid: Vec<usize> = (0..steps)
        .map(|k| {
            let f = if steps == 1 {
                1.0
            } else {
                1.0 - k as f64 / (steps - 1) as f64
            };
            ((schedule.t_max as f64 - 1.0) * f + 1.0).round() as usize
        })
        .collect();
    grid.dedup();

    let mut rng = stream(seed, "sample/init");
    let mut x = Array4::<F>::from_shape_simple_fn((n, 3, lh, lw), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        F::from_f64(z)
    });

    for (k, &t) in grid.iter().enumerate() {
        let t_prev = if k + 1 < grid.len() { grid[k + 1] } else { 0 };
        let eps_hat = {
            let mut g = Graph::<F>::new();
            let xv = g.input(x.clone().into_dyn());
            let levels: Vec<Var> = cond_levels.iter().map(|l| g.input(l.clone())).collect();
            let code = g.input(cond_codes.clone());
            let e = net.forward(&mut g, store, xv, &vec![t; n], &levels, code, false)?;
            g.value(e).clone()
        };
        let a_t = schedule.alpha_at(t);
        let b_t = schedule.beta_at(t);
        let abar_t = schedule.alpha_bar(t);
        let abar_prev = schedule.alpha_bar(t_prev);

        // x0 estimate, clamped to the latent range.
        let mut x0 = Array4::<F>::zeros((n, 3, lh, lw));
        {
            let e4 = eps_hat.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            ndarray::Zip::from(&mut x0)
                .and(&x)
                .and(&e4)
                .for_each(|o, &xv, &ev| {
                    let v = (xv.to_f64() - b_t * ev.to_f64()) / a_t;
                    *o = F::from_f64(v.clamp(-1.0, 1.0));
                });
        }
        if t_prev == 0 {
            x = x0;
            break;
        }
        let beta_step = 1.0 - abar_t / abar_prev;
        let coef_x0 = abar_prev.sqrt() * beta_step / (1.0 - abar_t);
        let coef_xt = (abar_t / abar_prev).sqrt() * (1.0 - abar_prev) / (1.0 - abar_t);
        let var = ((1.0 - abar_prev) / (1.0 - abar_t)) * beta_step;
        let sigma = var.max(0.0).sqrt();
        let mut zrng = stream(seed, &format!("sample/step{k}"));
        let noise = Array4::<F>::from_shape_simple_fn((n, 3, lh, lw), || {
            let z: f64 = StandardNormal.sample(&mut zrng);
            F::from_f64(z)
        });
        let mut next = Array4::<F>::zeros((n, 3, lh, lw));
        ndarray::Zip::from(&mut next)
            .and(&x0)
            .and(&x)
            .and(&noise)
            .for_each(|o, &x0v, &xv, &zv| {
                *o = F::from_f64(
                    coef_x0 * x0v.to_f64() + coef_xt * xv.to_f64() + sigma * zv.to_f64(),
                );
            });
        x = next;
    }
    Ok(x.mapv(|v| F::from_f64(v.to_f64().clamp(-1.0, 1.0))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn schedule_invariants_hold_small_t() {
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        for t in 1..=10 {
            let sum = s.alpha_at(t).powi(2) + s.beta_at(t).powi(2);
            assert!((sum - 1.0).abs() < 1e-12);
        }
        s.validate().unwrap();
    }

    #[test]
    fn schedule_endpoints_for_large_t() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        assert!(s.alpha_at(1) >= 0.999, "alpha_1 = {}", s.alpha_at(1));
        assert!(s.alpha_at(100) <= 0.05, "alpha_T = {}", s.alpha_at(100));
    }

    #[test]
    fn schedule_deterministic() {
        let a = make_schedule(50, ScheduleKind::Cosine).unwrap();
        let b = make_schedule(50, ScheduleKind::Cosine).unwrap();
        assert_eq!(a, b);
        assert!(make_schedule(1, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn add_noise_closed_forms() {
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let x0 = ArrayD::from_elem(IxDyn(&[2, 2]), 1.0f64);
        let zero = ArrayD::zeros(IxDyn(&[2, 2]));
        // eps = 0 -> alpha_t * x0
        let xt = add_noise(&x0, 3, &zero, &s).unwrap();
        assert!(xt.iter().all(|v| (v - s.alpha_at(3)).abs() < 1e-15));
        // hand-built coefficients: x0=1, eps=-1 with alpha .6 beta .8 -> -0.2
        let hand = NoiseSchedule {
            t_max: 2,
            alpha: vec![0.9995, 0.6],
            beta: vec![(1.0f64 - 0.9995f64 * 0.9995).sqrt(), 0.8],
        };
        let eps = ArrayD::from_elem(IxDyn(&[1]), -1.0f64);
        let one = ArrayD::from_elem(IxDyn(&[1]), 1.0f64);
        let got = add_noise(&one, 2, &eps, &hand).unwrap();
        assert!((got[[0]] - (-0.2)).abs() < 1e-12);
        // out-of-range t rejected
        assert!(add_noise(&x0, 0, &zero, &s).is_err());
        assert!(add_noise(&x0, 11, &zero, &s).is_err());
    }

    #[test]
    fn variance_preserved_statistically() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let mut rng = stream(3, "diffusion/var");
        let n = 20000;
        let t = 100; // alpha ~ 0
        let mut acc = 0.0;
        for _ in 0..n {
            let x0: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let xt = s.alpha_at(t) * x0 + s.beta_at(t) * e;
            acc += xt * xt;
        }
        let var = acc / n as f64;
        assert!((var - 1.0).abs() < 0.05, "Var(x_T) = {var}");
    }

    #[test]
    fn ddpm_loss_oracle_decoder_zero() {
        let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let x0s: Vec<ArrayD<f64>> = (0..4)
            .map(|i| ArrayD::from_elem(IxDyn(&[3, 4, 4]), i as f64 * 0.1))
            .collect();
        let seed = 5;
        let shape = [3usize, 4, 4];
        let (ts, eps) = draw_noise_batch::<f64>(4, &shape, &s, seed);
        let loss = ddpm_loss_with(&x0s, &s, seed, |i, x_t, t| {
            assert_eq!(ts[i], t);
            let _ = x_t;
            Ok(eps[i].clone())
        })
        .unwrap();
        assert!(loss.abs() < 1e-24, "oracle decoder loss {loss}");
    }

    #[test]
    fn ddpm_loss_zero_decoder_near_one() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let mut rng = stream(8, "diffusion/zero-dec");
        let x0s: Vec<ArrayD<f64>> = (0..24)
            .map(|_| {
                ArrayD::from_shape_simple_fn(IxDyn(&[3, 16, 16]), || rng.gen_range(-1.0..1.0))
            })
            .collect();
        let loss = ddpm_loss_with(&x0s, &s, 21, |_, x_t, _| Ok(ArrayD::zeros(x_t.raw_dim())))
            .unwrap();
        assert!((loss - 1.0).abs() < 0.05, "zero decoder loss {loss}");
    }

    fn tiny_net() -> (DiffusionDecoderNet, ParamStore<f64>, EncoderConfig) {
        let enc_cfg = EncoderConfig {
            channels: vec![4, 6, 8],
            code_dim: 5,
        };
        let cfg = DiffusionConfig {
            base_channels: 8,
            down_channels: 12,
            temb_dim: 8,
            cond_channels: 4,
            latent_factor: 4,
        };
        let net = DiffusionDecoderNet::new(&cfg, &enc_cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        net.init(&mut store, &mut stream(0, "diff-init"));
        (net, store, enc_cfg)
    }

    fn rand_levels(seed: u64, enc_cfg: &EncoderConfig, h: usize) -> Vec<Array3<f64>> {
        let mut rng = stream(seed, "diffusion/levels");
        enc_cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = h >> (i + 1);
                Array3::from_shape_fn((c, s, s), |_| rng.gen_range(-1.0..1.0))
            })
            .collect()
    }

    #[test]
    fn decoder_output_shape_and_determinism() {
        let (net, store, enc_cfg) = tiny_net();
        for h in [16usize, 32] {
            let levels = rand_levels(1, &enc_cfg, h);
            let mut rng = stream(2, "diffusion/xt");
            let x_t =
                Array3::from_shape_fn((3, h / 4, h / 4), |_| rng.gen_range(-1.0..1.0));
            let code = ndarray::Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0));
            let a = decoder_forward(&x_t, 3, &levels, &code, &store, &net).unwrap();
            let b = decoder_forward(&x_t, 3, &levels, &code, &store, &net).unwrap();
            assert_eq!(a.shape(), x_t.shape());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn decoder_depends_on_code_not_on_lighting_pixels() {
        // The interface admits lighting only through the code: with the code
        // held fixed, no other input can leak lighting-image pixels.
        let (net, store, enc_cfg) = tiny_net();
        let levels = rand_levels(3, &enc_cfg, 16);
        let mut rng = stream(4, "diffusion/code");
        let x_t = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let code = ndarray::Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0));
        let a = decoder_forward(&x_t, 2, &levels, &code, &store, &net).unwrap();
        let b = decoder_forward(&x_t, 2, &levels, &code, &store, &net).unwrap();
        assert_eq!(a, b);
        let code2 = code.mapv(|v| v + 0.5);
        let c = decoder_forward(&x_t, 2, &levels, &code2, &store, &net).unwrap();
        let max_diff = a
            .iter()
            .zip(c.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.0, "code must influence the output");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (net, store, enc_cfg) = tiny_net();
        let levels = rand_levels(5, &enc_cfg, 16);
        let cond: Vec<ArrayD<f64>> = levels
            .iter()
            .map(|l| l.clone().insert_axis(Axis(0)).into_dyn())
            .collect();
        let mut rng = stream(6, "diffusion/sample");
        let codes = ndarray::Array2::from_shape_fn((1, 5), |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let a = sample_latents(&net, &store, &cond, &codes, (4, 4), &s, 10, 77).unwrap();
        let b = sample_latents(&net, &store, &cond, &codes, (4, 4), &s, 10, 77).unwrap();
        let c = sample_latents(&net, &store, &cond, &codes, (4, 4), &s, 10, 78).unwrap();
        assert_eq!(a, b);
        let diff = a
            .iter()
            .zip(c.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 0.0);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn latent_roundtrip_shapes() {
        let mut rng = stream(9, "diffusion/latent");
        let img = Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(0.0..1.0));
        let latent = image_to_latent::<f64>(&img, 4).unwrap();
        assert_eq!(latent.shape(), &[3, 4, 4]);
        assert!(latent.iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = latent_to_image(&latent, 4);
        assert_eq!(back.shape(), &[16, 16, 3]);
        // A constant image survives the round trip exactly.
        let flat = Array3::from_elem((16, 16, 3), 0.25);
        let l2 = image_to_latent::<f64>(&flat, 4).unwrap();
        let b2 = latent_to_image(&l2, 4);
        assert!(b2.iter().all(|v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn ddpm_gradient_matches_finite_differences() {
        use crate::numerics::{finite_diff_grad, max_rel_err};
        let (net, store, enc_cfg) = tiny_net();
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let levels = rand_levels(11, &enc_cfg, 16);
        let mut rng = stream(12, "diffusion/grad");
        let x0 = ArrayD::from_shape_simple_fn(IxDyn(&[1, 3, 4, 4]), || rng.gen_range(-0.9..0.9));
        let code =
            ndarray::Array2::from_shape_fn((1, 5), |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let (ts, eps) = draw_noise_batch::<f64>(1, &[1, 3, 4, 4], &s, 31);
        let x_t = add_noise(&x0, ts[0], &eps[0], &s).unwrap();

        let loss_of = |st: &ParamStore<f64>| -> f64 {
            let mut g = Graph::<f64>::new();
            let xv = g.input(x_t.clone());
            let lv: Vec<Var> = levels
                .iter()
                .map(|l| g.input(l.clone().insert_axis(Axis(0)).into_dyn()))
                .collect();
            let cv = g.input(code.clone());
            let ev = g.input(eps[0].clone());
            let pred = net.forward(&mut g, st, xv, &ts, &lv, cv, true).unwrap();
            let loss = crate::losses::mse_node(&mut g, pred, ev);
            g.scalar(loss)
        };

        let mut g = Graph::<f64>::new();
        let xv = g.input(x_t.clone());
        let lv: Vec<Var> = levels
            .iter()
            .map(|l| g.input(l.clone().insert_axis(Axis(0)).into_dyn()))
            .collect();
        let cv = g.input(code.clone());
        let ev = g.input(eps[0].clone());
        let pred = net.forward(&mut g, &store, xv, &ts, &lv, cv, true).unwrap();
        let loss = crate::losses::mse_node(&mut g, pred, ev);
        let grads = g.backward(loss);

        for name in ["phi_prime.enc16a.weight", "phi_prime.temb8.bias", "phi_prime.out.weight"] {
            let base = store.get(name).unwrap().clone();
            let numeric = finite_diff_grad(
                |probe: &ArrayD<f64>| {
                    let mut s2 = store.clone();
                    *s2.get_mut(name).unwrap() = probe.clone();
                    Ok(loss_of(&s2))
                },
                &base,
                1e-5,
            )
            .unwrap();
            let err = max_rel_err(grads.by_param.get(name).unwrap(), &numeric);
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }
}
