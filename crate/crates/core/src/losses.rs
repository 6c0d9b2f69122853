//! Training objectives.

use jscc_autodiff::{Graph, NodeId, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mae_node, mse_node, ssim_node, SsimParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reconstruction {
    Mse,
    /// `α·(1 - SSIM) + (1 - α)·MAE`.
    Mixed,
}

impl Reconstruction {
    pub fn as_str(self) -> &'static str {
        match self {
            Reconstruction::Mse => "mse",
            Reconstruction::Mixed => "mixed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub reconstruction: Reconstruction,
    /// Weight of the SSIM term in the mixed loss.
    pub alpha: f64,
    /// Weight of the KL term; only used for VAE models.
    pub beta_kl: f64,
    pub ssim: SsimParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            reconstruction: Reconstruction::Mse,
            alpha: 0.5,
            beta_kl: 1e-3,
            ssim: SsimParams::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta_kl >= 0.0) || !self.beta_kl.is_finite() {
            return Err(Error::Config(format!("beta_kl must be non-negative, got {}", self.beta_kl)));
        }
        self.ssim.validate()
    }
}

/// `½ Σ (μ² + σ² - log σ² - 1)` summed over latent dimensions and averaged
/// over the leading batch axis.
pub fn kl_divergence<T: Scalar>(g: &mut Graph<T>, mu: NodeId, log_var: NodeId) -> Result<NodeId> {
    if g.shape(mu) != g.shape(log_var) {
        return Err(Error::Config(format!(
            "mu {:?} and log_var {:?} differ in shape",
            g.shape(mu),
            g.shape(log_var)
        )));
    }
    let batch = g.shape(mu).first().copied().unwrap_or(1);
    let mu2 = g.square(mu)?;
    let var = g.exp(log_var)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, log_var)?;
    let t = g.add_scalar(t, -T::one())?;
    let s = g.sum(t)?;
    Ok(g.scale(s, T::from_f64_lossy(0.5 / batch as f64))?)
}

/// `α·(1 - SSIM(x, x̂)) + (1 - α)·MAE(x, x̂)`.
pub fn mixed_loss<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    x_hat: NodeId,
    alpha: f64,
    params: &SsimParams,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let s = ssim_node(g, x, x_hat, params)?;
    let ssim_loss = g.scale(s, -T::one())?;
    let ssim_loss = g.add_scalar(ssim_loss, T::one())?;
    let l1 = mae_node(g, x, x_hat)?;
    let a = g.scale(ssim_loss, T::from_f64_lossy(alpha))?;
    let b = g.scale(l1, T::from_f64_lossy(1.0 - alpha))?;
    Ok(g.add(a, b)?)
}

/// Reconstruction term selected by `cfg`.
pub fn reconstruction_loss<T: Scalar>(g: &mut Graph<T>, x: NodeId, x_hat: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    match cfg.reconstruction {
        Reconstruction::Mse => mse_node(g, x, x_hat),
        Reconstruction::Mixed => mixed_loss(g, x, x_hat, cfg.alpha, &cfg.ssim),
    }
}

/// Reconstruction term plus `β · KL(q(h|x) ‖ N(0, I))`.
///
/// `sampler` holds the `(mu, log_var)` nodes of the VAE sampler.
pub fn vae_loss<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    x_hat: NodeId,
    sampler: Option<(NodeId, NodeId)>,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let (mu, log_var) =
        sampler.ok_or_else(|| Error::Config("VAE loss needs the sampler's mu and log_var".into()))?;
    let rec = reconstruction_loss(g, x, x_hat, cfg)?;
    if cfg.beta_kl == 0.0 {
        return Ok(rec);
    }
    let kl = kl_divergence(g, mu, log_var)?;
    let kl = g.scale(kl, T::from_f64_lossy(cfg.beta_kl))?;
    Ok(g.add(rec, kl)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use jscc_autodiff::Tensor;

    fn kl(mu: &[f64], lv: &[f64]) -> f64 {
        let mut g = Graph::<f64>::new(0);
        let m = g.input("mu", Tensor::from_f64(&[1, mu.len()], mu).unwrap()).unwrap();
        let l = g.input("lv", Tensor::from_f64(&[1, lv.len()], lv).unwrap()).unwrap();
        let k = kl_divergence(&mut g, m, l).unwrap();
        g.value(k).data()[0]
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl(&[0.0], &[0.0]), 0.0);
        assert_eq!(kl(&[1.0], &[0.0]), 0.5);
        assert!((kl(&[0.0], &[1.0]) - (std::f64::consts::E - 2.0) / 2.0).abs() < 1e-12);
        assert!((kl(&[0.0], &[1.0]) - 0.35914).abs() < 1e-5);
    }

    #[test]
    fn kl_averages_over_batch() {
        let mut g = Graph::<f64>::new(0);
        let m = g.input("mu", Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap()).unwrap();
        let l = g.input("lv", Tensor::zeros(&[2, 1])).unwrap();
        let k = kl_divergence(&mut g, m, l).unwrap();
        assert_eq!(g.value(k).data()[0], 0.5);
    }

    #[test]
    fn alpha_out_of_range() {
        let cfg = LossConfig {
            alpha: 1.5,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut g = Graph::<f64>::new(0);
        let x = g.input("x", Tensor::zeros(&[1, 1, 12, 12])).unwrap();
        assert!(mixed_loss(&mut g, x, x, -0.1, &SsimParams::default()).is_err());
    }

    #[test]
    fn vae_loss_requires_sampler() {
        let mut g = Graph::<f64>::new(0);
        let x = g.input("x", Tensor::zeros(&[1, 1, 12, 12])).unwrap();
        assert!(vae_loss(&mut g, x, x, None, &LossConfig::default()).is_err());
    }

    #[test]
    fn mixed_loss_boundaries() {
        let mut g = Graph::<f64>::new(0);
        let zeros = g.input("x", Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        let ones = g.input("y", Tensor::full(&[1, 3, 16, 16], 1.0)).unwrap();
        let p = SsimParams::default();
        let same = mixed_loss(&mut g, zeros, zeros, 0.5, &p).unwrap();
        assert_eq!(g.value(same).data()[0], 0.0);
        let l1_only = mixed_loss(&mut g, zeros, ones, 0.0, &p).unwrap();
        assert_eq!(g.value(l1_only).data()[0], 1.0);
        let half = mixed_loss(&mut g, zeros, ones, 0.5, &p).unwrap();
        let want = 0.5 * (1.0 - p.c1() / (1.0 + p.c1())) + 0.5;
        assert!((g.value(half).data()[0] - want).abs() < 1e-9);
        assert!((g.value(half).data()[0] - 0.99995).abs() < 1e-6);
    }
}
