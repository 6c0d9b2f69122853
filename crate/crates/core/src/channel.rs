//! Power-constrained AWGN channel.
//!
//! Complex channel symbols are carried as interleaved real pairs
//! `(re_0, im_0, re_1, im_1, ..)`. Power and noise variance are accounted per
//! complex symbol, so each real component receives noise of variance `σ²/2`.

use jscc_autodiff::{Graph, NodeId, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a latent cannot be projected onto the power sphere.
pub const MIN_LATENT_NORM: f64 = 1e-12;

/// `σ² = P / 10^(snr/10)`. An SNR of `+∞` gives a noiseless channel.
pub fn snr_to_sigma2(snr_db: f64, power: f64) -> Result<f64> {
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::Config(format!("channel power must be positive, got {power}")));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Config(format!("invalid SNR {snr_db} dB")));
    }
    Ok(power / 10f64.powf(snr_db / 10.0))
}

/// `SNR = 10 log10(P / σ²)`.
pub fn sigma2_to_snr(sigma2: f64, power: f64) -> Result<f64> {
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::Config(format!("channel power must be positive, got {power}")));
    }
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::Config(format!("noise variance must be positive, got {sigma2}")));
    }
    Ok(10.0 * (power / sigma2).log10())
}

/// Serde adapter for SNR values: JSON has no infinities, so `±∞` dB is
/// written as the string `"inf"` / `"-inf"`.
pub mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(serde::de::Error::custom(format!("invalid SNR `{t}`"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Average power per complex channel use.
    pub power: f64,
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    /// Complex channel uses per image.
    pub k: usize,
}

impl ChannelConfig {
    pub fn new(power: f64, snr_db: f64, k: usize) -> Result<Self> {
        let cfg = Self { power, snr_db, k };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn noiseless(power: f64, k: usize) -> Result<Self> {
        Self::new(power, f64::INFINITY, k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("channel uses k must be at least 1".into()));
        }
        snr_to_sigma2(self.snr_db, self.power).map(|_| ())
    }

    /// Noise variance per complex symbol.
    pub fn sigma2(&self) -> f64 {
        self.power / 10f64.powf(self.snr_db / 10.0)
    }

    pub fn with_snr(mut self, snr_db: f64) -> Self {
        self.snr_db = snr_db;
        self
    }
}

/// Channel symbols for a batch, `[B, 2k]` real values.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSymbols<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> ChannelSymbols<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 2 || shape[1] % 2 != 0 {
            return Err(Error::Config(format!(
                "channel symbols must be [batch, 2k], got {shape:?}"
            )));
        }
        Ok(Self { values })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    /// Complex symbols per item.
    pub fn k(&self) -> usize {
        self.values.shape()[1] / 2
    }

    /// `(1/k) Σ |z_i|²` for each batch item.
    pub fn average_power(&self) -> Vec<f64> {
        let k = self.k() as f64;
        self.values
            .data()
            .chunks(self.values.shape()[1])
            .map(|row| row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / k)
            .collect()
    }
}

/// Projects each batch item of `z_s` onto the sphere `(1/k)·z*z = P`:
/// `z = √(kP) · z_s / ‖z_s‖`. Returns a `[B, 2k]` node.
pub fn normalize_power<T: Scalar>(g: &mut Graph<T>, z_s: NodeId, cfg: &ChannelConfig) -> Result<NodeId> {
    cfg.validate()?;
    let shape = g.shape(z_s).to_vec();
    let batch = shape.first().copied().unwrap_or(1);
    let per_item = g.value(z_s).numel() / batch.max(1);
    if shape.len() < 2 || per_item != 2 * cfg.k {
        return Err(Error::Config(format!(
            "latent {shape:?} does not carry 2k = {} values per item",
            2 * cfg.k
        )));
    }
    let flat = g.reshape(z_s, &[batch, per_item])?;
    let norms = g.l2_norm(flat)?;
    let smallest = g.value(norms).data().iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
    if smallest < MIN_LATENT_NORM {
        return Err(Error::DegenerateLatent(smallest));
    }
    let inv = g.recip(norms)?;
    let factor = g.scale(inv, T::from_f64_lossy((cfg.k as f64 * cfg.power).sqrt()))?;
    Ok(g.mul_rows(flat, factor)?)
}

/// Seeded source of channel noise.
pub struct Awgn {
    rng: ChaCha8Rng,
}

impl Awgn {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `n` real noise samples of variance `σ²/2` each.
    pub fn noise(&mut self, n: usize, sigma2: f64) -> Vec<f64> {
        let std = (sigma2 / 2.0).sqrt();
        (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                std * e
            })
            .collect()
    }

    /// Adds channel noise to `z` on the graph. The noise is a constant, so the
    /// gradient passes through unchanged. A noiseless channel returns `z`.
    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, z: NodeId, cfg: &ChannelConfig) -> Result<NodeId> {
        cfg.validate()?;
        let sigma2 = cfg.sigma2();
        if sigma2 == 0.0 {
            return Ok(z);
        }
        let shape = g.shape(z).to_vec();
        let noise = self.noise(g.value(z).numel(), sigma2);
        let noise = g.constant(Tensor::from_f64(&shape, &noise)?)?;
        Ok(g.add(z, noise)?)
    }
}

/// Passes symbols through the channel outside of any graph.
pub fn awgn_apply<T: Scalar>(z: &ChannelSymbols<T>, cfg: &ChannelConfig, seed: u64) -> Result<ChannelSymbols<T>> {
    cfg.validate()?;
    let sigma2 = cfg.sigma2();
    let mut values = z.values.clone();
    if sigma2 > 0.0 {
        let noise = Awgn::new(seed).noise(values.numel(), sigma2);
        for (v, n) in values.data_mut().iter_mut().zip(noise) {
            *v = T::from_f64_lossy(v.as_f64() + n);
        }
    }
    ChannelSymbols::new(values)
}

/// Measured `10 log10(P / E|z̃ - z|²)` per complex symbol.
pub fn empirical_snr_db<T: Scalar>(sent: &ChannelSymbols<T>, received: &ChannelSymbols<T>, power: f64) -> f64 {
    let diff: f64 = sent
        .values
        .data()
        .iter()
        .zip(received.values.data())
        .map(|(a, b)| (b.as_f64() - a.as_f64()).powi(2))
        .sum();
    let symbols = (sent.values.numel() / 2) as f64;
    10.0 * (power / (diff / symbols)).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normalize(values: &[f64], batch: usize, k: usize, power: f64) -> Result<Vec<f64>> {
        let mut g = Graph::<f64>::new(0);
        let z = g.input("z", Tensor::from_f64(&[batch, 2 * k], values)?)?;
        let cfg = ChannelConfig::new(power, 10.0, k)?;
        let out = normalize_power(&mut g, z, &cfg)?;
        Ok(g.value(out).data().to_vec())
    }

    #[test]
    fn snr_conversions() {
        assert_eq!(snr_to_sigma2(0.0, 1.0).unwrap(), 1.0);
        assert!((snr_to_sigma2(10.0, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(snr_to_sigma2(f64::INFINITY, 1.0).unwrap(), 0.0);
        assert!(snr_to_sigma2(3.0, 0.0).is_err());
        assert!(sigma2_to_snr(0.0, 1.0).is_err());
        assert!(sigma2_to_snr(1.0, -1.0).is_err());
    }

    #[test]
    fn config_rejects_zero_k() {
        assert!(ChannelConfig::new(1.0, 10.0, 0).is_err());
        assert!(ChannelConfig::new(-1.0, 10.0, 4).is_err());
    }

    #[test]
    fn normalize_examples() {
        let h = 2f64.sqrt() / 2.0;
        let out = normalize(&[1.0, 1.0, 1.0, 1.0], 1, 2, 1.0).unwrap();
        for v in &out {
            assert!((v - h).abs() < 1e-15);
        }
        let out = normalize(&[3.0, 4.0], 1, 1, 1.0).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
        let again = normalize(&out, 1, 1, 1.0).unwrap();
        assert!(again.iter().zip(&out).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn degenerate_latent_rejected() {
        let err = normalize(&[0.0, 0.0, 0.0, 0.0], 1, 2, 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateLatent(_)));
    }

    #[test]
    fn wrong_latent_size_rejected() {
        assert!(normalize(&[1.0, 2.0, 3.0, 4.0], 1, 3, 1.0).is_err());
    }

    #[test]
    fn noiseless_channel_is_identity() {
        let z = ChannelSymbols::new(Tensor::<f64>::from_f64(&[1, 4], &[0.1, -0.2, 0.3, 0.4]).unwrap()).unwrap();
        let cfg = ChannelConfig::noiseless(1.0, 2).unwrap();
        assert_eq!(awgn_apply(&z, &cfg, 5).unwrap(), z);
    }

    #[test]
    fn infinite_snr_survives_json() {
        let cfg = ChannelConfig::noiseless(1.0, 4).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"inf\""), "{text}");
        assert_eq!(serde_json::from_str::<ChannelConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn same_seed_same_noise() {
        let z = ChannelSymbols::new(Tensor::<f32>::zeros(&[2, 8])).unwrap();
        let cfg = ChannelConfig::new(1.0, 0.0, 4).unwrap();
        assert_eq!(awgn_apply(&z, &cfg, 11).unwrap(), awgn_apply(&z, &cfg, 11).unwrap());
        assert_ne!(awgn_apply(&z, &cfg, 11).unwrap(), awgn_apply(&z, &cfg, 12).unwrap());
    }

    #[test]
    fn graph_noise_passes_gradient_through() {
        let mut g = Graph::<f64>::new(0);
        let z = g.param("z", Tensor::from_f64(&[1, 4], &[0.5, 0.5, 0.5, 0.5]).unwrap()).unwrap();
        let cfg = ChannelConfig::new(1.0, 0.0, 2).unwrap();
        let y = Awgn::new(3).apply(&mut g, z, &cfg).unwrap();
        assert_eq!(g.shape(y), &[1, 4]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(z).unwrap().data(), &[1.0; 4]);
    }
}
